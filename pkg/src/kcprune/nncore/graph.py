"""Architecture description: layer specs, graphs, shape propagation, spec JSON."""

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from ..errors import UsageError

KINDS = (
    "conv2d",
    "linear",
    "relu",
    "maxpool2d",
    "global_avg_pool",
    "batchnorm2d",
    "residual_add",
    "flatten",
)


@dataclass
class LayerSpec:
    """One node of the graph.

    ``input_from`` names the producing layer (``None`` means the previous layer,
    ``-1`` the graph input).  ``residual_add`` sums its input with the output of
    layer ``source``.
    """

    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel_size: int | None = None
    stride: int | None = None
    padding: int | None = None
    has_bias: bool | None = None
    in_features: int | None = None
    out_features: int | None = None
    channels: int | None = None
    epsilon: float | None = None
    momentum: float | None = None
    source: int | None = None
    input_from: int | None = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise UsageError(f"layer entry must be an object, got {type(d).__name__}")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown layer fields: {sorted(unknown)}")
        if "kind" not in d:
            raise UsageError("layer entry lacks 'kind'")
        return cls(**d)


def conv2d(cin, cout, k, stride=1, padding=0, bias=False, input_from=None):
    return LayerSpec("conv2d", in_channels=cin, out_channels=cout, kernel_size=k, stride=stride,
                     padding=padding, has_bias=bias, input_from=input_from)


def linear(fin, fout, bias=True):
    return LayerSpec("linear", in_features=fin, out_features=fout, has_bias=bias)


def batchnorm2d(c, eps=1e-5, momentum=0.1):
    return LayerSpec("batchnorm2d", channels=c, epsilon=eps, momentum=momentum)


def relu():
    return LayerSpec("relu")


def maxpool2d(k=2, stride=None):
    return LayerSpec("maxpool2d", kernel_size=k, stride=stride or k)


def global_avg_pool():
    return LayerSpec("global_avg_pool")


def flatten():
    return LayerSpec("flatten")


def residual_add(source, input_from=None):
    return LayerSpec("residual_add", source=source, input_from=input_from)


@dataclass
class ModelGraph:
    name: str
    input_shape: tuple
    class_count: int
    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l) for l in self.layers]
        self._shapes = None

    def producer(self, i):
        """Index of the layer feeding layer ``i`` (-1 for the graph input)."""
        src = self.layers[i].input_from
        return i - 1 if src is None else src

    def conv_layers(self):
        return [i for i, l in enumerate(self.layers) if l.kind == "conv2d"]

    @property
    def shapes(self):
        """Per-sample output shape of every layer (validated on first access)."""
        if self._shapes is None:
            self._shapes = propagate_shapes(self)
        return self._shapes

    def input_shape_of(self, i):
        p = self.producer(i)
        return self.input_shape if p < 0 else self.shapes[p]

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise UsageError("architecture spec must be a JSON object")
        missing = [k for k in ("name", "input_shape", "class_count", "layers") if k not in d]
        if missing:
            raise UsageError(f"architecture spec missing fields: {missing}")
        if not isinstance(d["layers"], list):
            raise UsageError("'layers' must be a list")
        try:
            g = cls(str(d["name"]), tuple(d["input_shape"]), int(d["class_count"]), list(d["layers"]))
        except TypeError as exc:
            raise UsageError(f"malformed architecture spec: {exc}") from None
        g.shapes  # validate eagerly
        return g


def _pos(v, what, i, minimum=1):
    if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
        raise UsageError(f"layer {i}: {what} must be an integer >= {minimum}, got {v!r}")
    return v


def propagate_shapes(graph):
    if len(graph.input_shape) != 3 or min(graph.input_shape) < 1:
        raise UsageError(f"input_shape must be (C, H, W) with positive entries, got {graph.input_shape}")
    if graph.class_count < 1:
        raise UsageError("class_count must be positive")
    if not graph.layers:
        raise UsageError("graph has no layers")
    shapes = []
    for i, l in enumerate(graph.layers):
        if l.kind not in KINDS:
            raise UsageError(f"layer {i}: unsupported layer kind {l.kind!r}")
        p = graph.producer(i)
        if not -1 <= p < i:
            raise UsageError(f"layer {i}: input_from must refer to an earlier layer, got {p}")
        s = graph.input_shape if p < 0 else shapes[p]
        k = l.kind
        if k == "conv2d":
            cin = _pos(l.in_channels, "in_channels", i)
            cout = _pos(l.out_channels, "out_channels", i)
            ks = _pos(l.kernel_size, "kernel_size", i)
            st = _pos(l.stride if l.stride is not None else 1, "stride", i)
            pad = _pos(l.padding if l.padding is not None else 0, "padding", i, minimum=0)
            if len(s) != 3 or s[0] != cin:
                raise UsageError(f"layer {i}: conv2d expects {cin} input channels, got shape {s}")
            ho = (s[1] + 2 * pad - ks) // st + 1
            wo = (s[2] + 2 * pad - ks) // st + 1
            if ho < 1 or wo < 1:
                raise UsageError(f"layer {i}: conv2d output would be empty for input {s}")
            out = (cout, ho, wo)
        elif k == "linear":
            fin = _pos(l.in_features, "in_features", i)
            fout = _pos(l.out_features, "out_features", i)
            if s != (fin,):
                raise UsageError(f"layer {i}: linear expects ({fin},), got {s}")
            out = (fout,)
        elif k == "batchnorm2d":
            c = _pos(l.channels, "channels", i)
            if len(s) != 3 or s[0] != c:
                raise UsageError(f"layer {i}: batchnorm2d expects {c} channels, got {s}")
            out = s
        elif k == "maxpool2d":
            ks = _pos(l.kernel_size, "kernel_size", i)
            st = _pos(l.stride if l.stride is not None else ks, "stride", i)
            if len(s) != 3 or s[1] < ks or s[2] < ks:
                raise UsageError(f"layer {i}: maxpool2d window {ks} does not fit {s}")
            out = (s[0], (s[1] - ks) // st + 1, (s[2] - ks) // st + 1)
        elif k == "global_avg_pool":
            if len(s) != 3:
                raise UsageError(f"layer {i}: global_avg_pool expects (C, H, W), got {s}")
            out = (s[0],)
        elif k == "flatten":
            n = 1
            for d in s:
                n *= d
            out = (n,)
        elif k == "residual_add":
            src = l.source
            if not isinstance(src, int) or not -1 <= src < i:
                raise UsageError(f"layer {i}: residual_add source must be an earlier layer, got {src!r}")
            other = graph.input_shape if src < 0 else shapes[src]
            if other != s:
                raise UsageError(f"layer {i}: residual_add shapes differ {s} vs {other}")
            out = s
        else:  # relu
            out = s
        shapes.append(tuple(out))
    if shapes[-1] != (graph.class_count,):
        raise UsageError(f"final output {shapes[-1]} does not match class_count {graph.class_count}")
    return shapes


def load_graph(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    return ModelGraph.from_dict(doc)


def save_graph(graph, path):
    Path(path).write_text(json.dumps(graph.to_dict(), indent=1) + "\n", encoding="utf-8")


def resnet_cifar(depth, class_count=10):
    """CIFAR ResNet (depth = 6n + 2): widths 16/32/64, 1x1 projection on downsampling."""
    if (depth - 2) % 6 != 0 or depth < 8:
        raise UsageError(f"CIFAR ResNet depth must be 6n+2, got {depth}")
    n = (depth - 2) // 6
    layers = [conv2d(3, 16, 3, padding=1), batchnorm2d(16), relu()]
    cin = 16
    for stage, width in enumerate((16, 32, 64)):
        for b in range(n):
            stride = 2 if stage > 0 and b == 0 else 1
            block_in = len(layers) - 1
            layers += [conv2d(cin, width, 3, stride=stride, padding=1), batchnorm2d(width), relu(),
                       conv2d(width, width, 3, padding=1), batchnorm2d(width)]
            main = len(layers) - 1
            if stride != 1 or cin != width:
                layers += [conv2d(cin, width, 1, stride=stride, input_from=block_in), batchnorm2d(width)]
                shortcut = len(layers) - 1
                layers.append(residual_add(shortcut, input_from=main))
            else:
                layers.append(residual_add(block_in))
            layers.append(relu())
            cin = width
    layers += [global_avg_pool(), linear(64, class_count)]
    return ModelGraph(f"resnet{depth}", (3, 32, 32), class_count, layers)


def tinycnn(input_shape=(1, 16, 16), class_count=4):
    """conv8-relu-pool-conv16-relu-pool-conv32-relu-gap-linear."""
    c = input_shape[0]
    layers = [
        conv2d(c, 8, 3, padding=1, bias=True), relu(), maxpool2d(2),
        conv2d(8, 16, 3, padding=1, bias=True), relu(), maxpool2d(2),
        conv2d(16, 32, 3, padding=1, bias=True), relu(),
        global_avg_pool(), linear(32, class_count),
    ]
    return ModelGraph("tinycnn", input_shape, class_count, layers)


ARCH_DIR = Path(__file__).resolve().parent.parent / "archs"


def shipped_arch(name):
    """Load one of the architecture specs bundled with the package."""
    path = ARCH_DIR / f"{name}.json"
    if not path.exists():
        raise UsageError(f"no bundled architecture {name!r}")
    return load_graph(path)
