"""Model parameters plus forward/backward over a :class:`ModelGraph`."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import UsageError
from . import layers as L


def pname(i, what):
    return f"layers.{i}.{what}"


@dataclass
class ModelState:
    """Trainable parameters, non-trainable buffers and momentum slots.

    Conv weights are stored (C_out, C_in, K, K); linear weights (out, in).
    """

    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)  # conv layer -> bool (C_out, C_in), True = kept
    _cache: object = field(default=None, repr=False, compare=False)

    def copy(self, dtype=None):
        conv = (lambda a: a.astype(dtype)) if dtype is not None else (lambda a: a.copy())
        return ModelState(
            {k: conv(v) for k, v in self.params.items()},
            {k: conv(v) for k, v in self.buffers.items()},
            {k: conv(v) for k, v in self.velocity.items()},
            {k: v.copy() for k, v in self.masks.items()},
        )

    def tensors(self):
        """All named arrays in a stable order (params, buffers, velocity)."""
        out = dict(self.params)
        out.update(self.buffers)
        out.update({f"velocity.{k}": v for k, v in self.velocity.items()})
        return out

    def conv_weight(self, i):
        return self.params[pname(i, "weight")]


def parameter_shapes(graph):
    """name -> (shape, trainable) for every tensor a graph needs."""
    shapes = {}
    for i, l in enumerate(graph.layers):
        if l.kind == "conv2d":
            shapes[pname(i, "weight")] = ((l.out_channels, l.in_channels, l.kernel_size, l.kernel_size), True)
            if l.has_bias:
                shapes[pname(i, "bias")] = ((l.out_channels,), True)
        elif l.kind == "linear":
            shapes[pname(i, "weight")] = ((l.out_features, l.in_features), True)
            if l.has_bias is not False:
                shapes[pname(i, "bias")] = ((l.out_features,), True)
        elif l.kind == "batchnorm2d":
            c = (l.channels,)
            shapes[pname(i, "weight")] = (c, True)
            shapes[pname(i, "bias")] = (c, True)
            shapes[pname(i, "running_mean")] = (c, False)
            shapes[pname(i, "running_var")] = (c, False)
    return shapes


def init_state(graph, seed=0, dtype=np.float32):
    """He-normal weights, zero biases, identity batch norm."""
    graph.shapes
    rng = np.random.default_rng(seed)
    st = ModelState()
    for name, (shape, trainable) in parameter_shapes(graph).items():
        what = name.rsplit(".", 1)[1]
        i = int(name.split(".")[1])
        kind = graph.layers[i].kind
        if what == "weight" and kind in ("conv2d", "linear"):
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif what in ("weight", "running_var"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        (st.params if trainable else st.buffers)[name] = arr.astype(dtype)
    return st


def check_state(graph, state):
    expected = parameter_shapes(graph)
    for name, (shape, trainable) in expected.items():
        store = state.params if trainable else state.buffers
        if name not in store:
            raise UsageError(f"state lacks tensor {name}")
        if store[name].shape != shape:
            raise UsageError(f"{name}: shape {store[name].shape} does not match spec {shape}")
    extra = (set(state.params) | set(state.buffers)) - set(expected)
    if extra:
        raise UsageError(f"state has tensors not in graph: {sorted(extra)}")


def forward(graph, state, batch, training=False, taps=()):
    """Run the graph on ``batch`` of shape (N, C, H, W).

    Returns ``(logits, tapped)`` where ``tapped`` maps each requested layer
    index to its output.  A training-mode pass records what :func:`backward`
    needs; an inference pass clears it.
    """
    batch = np.asarray(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != graph.input_shape:
        raise UsageError(f"batch shape {batch.shape} does not match (N,) + {graph.input_shape}")
    for t in taps:
        if not 0 <= t < len(graph.layers):
            raise UsageError(f"tap {t} is not a layer index")
    p = state.params
    outs = [None] * len(graph.layers)
    caches = [None] * len(graph.layers)
    for i, l in enumerate(graph.layers):
        src = graph.producer(i)
        x = batch if src < 0 else outs[src]
        k = l.kind
        if k == "conv2d":
            b = p.get(pname(i, "bias")) if l.has_bias else None
            y, c = L.conv2d_forward(x, p[pname(i, "weight")], b, l.stride or 1, l.padding or 0)
        elif k == "linear":
            y, c = L.linear_forward(x, p[pname(i, "weight")], p.get(pname(i, "bias")))
        elif k == "relu":
            y, c = L.relu_forward(x)
        elif k == "maxpool2d":
            y, c = L.maxpool_forward(x, l.kernel_size, l.stride or l.kernel_size)
        elif k == "global_avg_pool":
            y, c = L.gap_forward(x)
        elif k == "flatten":
            y, c = x.reshape(x.shape[0], -1), x.shape
        elif k == "batchnorm2d":
            y, c = L.batchnorm_forward(
                x, p[pname(i, "weight")], p[pname(i, "bias")],
                state.buffers[pname(i, "running_mean")], state.buffers[pname(i, "running_var")],
                l.epsilon if l.epsilon is not None else 1e-5,
                l.momentum if l.momentum is not None else 0.1,
                training,
            )
        elif k == "residual_add":
            y, c = x + (batch if l.source < 0 else outs[l.source]), None
        else:
            raise UsageError(f"unsupported layer kind {k!r}")
        outs[i] = y
        caches[i] = c
    state._cache = caches if training else None
    return outs[-1], {t: outs[t] for t in taps}


def backward(graph, state, loss_grad, extra_grads=None):
    """Gradients of every trainable parameter given d(loss)/d(logits).

    ``extra_grads`` maps layer index -> gradient injected at that layer's
    output (used for feature-distillation taps).
    """
    caches = state._cache
    if caches is None:
        raise UsageError("backward called without a preceding training-mode forward")
    state._cache = None
    p = state.params
    n_layers = len(graph.layers)
    douts = [None] * n_layers

    def acc(j, g):
        if j < 0:
            return
        douts[j] = g if douts[j] is None else douts[j] + g

    acc(n_layers - 1, loss_grad)
    for j, g in (extra_grads or {}).items():
        acc(j, g)
    grads = {name: np.zeros_like(w) for name, w in p.items()}
    for i in range(n_layers - 1, -1, -1):
        g = douts[i]
        if g is None:
            continue
        douts[i] = None
        l = graph.layers[i]
        c = caches[i]
        k = l.kind
        if k == "conv2d":
            w = p[pname(i, "weight")]
            dx, dw, db = L.conv2d_backward(g, c, w, bool(l.has_bias))
            grads[pname(i, "weight")] = dw
            if db is not None:
                grads[pname(i, "bias")] = db
        elif k == "linear":
            dx, dw, db = L.linear_backward(g, c, p[pname(i, "weight")], pname(i, "bias") in p)
            grads[pname(i, "weight")] = dw
            if db is not None:
                grads[pname(i, "bias")] = db
        elif k == "relu":
            dx = L.relu_backward(g, c)
        elif k == "maxpool2d":
            dx = L.maxpool_backward(g, c)
        elif k == "global_avg_pool":
            dx = L.gap_backward(g, c)
        elif k == "flatten":
            dx = g.reshape(c)
        elif k == "batchnorm2d":
            dx, dgam, dbet = L.batchnorm_backward(g, c, p[pname(i, "weight")])
            grads[pname(i, "weight")] = dgam
            grads[pname(i, "bias")] = dbet
        elif k == "residual_add":
            dx = g
            acc(l.source, g)
        acc(graph.producer(i), dx)
    return grads
