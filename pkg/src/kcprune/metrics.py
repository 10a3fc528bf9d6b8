"""FLOPs, parameter and sparsity accounting plus run reports.

FLOPs follow the multiply-accumulate convention: a conv layer costs
C_in * C_out * K^2 * H_out * W_out per sample, a linear layer in * out, and
everything else is free.
"""

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UsageError

REPORT_VERSION = 1
CSV_FIELDS = (
    "epoch", "phase", "p", "train_loss", "task_loss", "fd_loss", "eval_accuracy", "eval_loss",
    "kernel_sparsity", "param_sparsity", "flops", "fully_pruned_filters",
)


def _layer_flops(graph, i, kept_kernels=None):
    l = graph.layers[i]
    if l.kind == "conv2d":
        _, ho, wo = graph.shapes[i]
        kernels = l.in_channels * l.out_channels if kept_kernels is None else kept_kernels
        return kernels * l.kernel_size ** 2 * ho * wo
    if l.kind == "linear":
        return l.in_features * l.out_features
    return 0


def flops_of_graph(graph):
    """Per-sample multiply-accumulate count at the graph's input shape."""
    graph.shapes  # raises UsageError on unsupported kinds or bad shapes
    return sum(_layer_flops(graph, i) for i in range(len(graph.layers)))


def _check_masks(graph, masks):
    for j, m in masks.items():
        if not (0 <= j < len(graph.layers)) or graph.layers[j].kind != "conv2d":
            raise UsageError(f"mask refers to layer {j}, which is not a conv layer")
        l = graph.layers[j]
        if np.shape(m) != (l.out_channels, l.in_channels):
            raise UsageError(f"mask for layer {j} has shape {np.shape(m)}, expected {(l.out_channels, l.in_channels)}")


def flops_with_masks(graph, masks):
    """FLOPs counting only kept kernels in masked conv layers."""
    graph.shapes
    masks = masks or {}
    _check_masks(graph, masks)
    total = 0
    for i in range(len(graph.layers)):
        kept = int(np.count_nonzero(masks[i])) if i in masks else None
        total += _layer_flops(graph, i, kept)
    return total


def param_count(graph, weights_only=False):
    """Trainable parameter count (conv/linear weights only if ``weights_only``)."""
    from .nncore.model import parameter_shapes

    n = 0
    for name, (shape, trainable) in parameter_shapes(graph).items():
        if not trainable:
            continue
        kind = graph.layers[int(name.split(".")[1])].kind
        if weights_only and not (name.endswith(".weight") and kind in ("conv2d", "linear")):
            continue
        n += int(np.prod(shape))
    return n


def masks_from_state(graph, state, layers=None):
    """Kept-kernel masks read off the weights: a kernel is pruned iff it is all zero."""
    layers = graph.conv_layers() if layers is None else layers
    out = {}
    for j in layers:
        w = state.params[f"layers.{j}.weight"]
        out[j] = np.any(w != 0, axis=(2, 3))
    return out


def sparsity(graph, masks=None, state=None):
    """Kernel sparsity, weight sparsity and fully-pruned filter count.

    ``masks`` (layer -> kept matrix) define the eligible layers; without them
    the masks are read off ``state`` when given, else nothing is pruned.
    Weight sparsity counts zeros in conv and linear weights of ``state`` or,
    without a state, the weights covered by pruned kernels.
    """
    if masks is None:
        masks = masks_from_state(graph, state) if state is not None else {}
    _check_masks(graph, masks)
    total = pruned = full = 0
    per_layer = {}
    for j, m in sorted(masks.items()):
        m = np.asarray(m, dtype=bool)
        dead = int(m.size - np.count_nonzero(m))
        total += m.size
        pruned += dead
        full += int(np.count_nonzero(~m.any(axis=1)))
        per_layer[j] = dead / m.size
    weight_total = param_count(graph, weights_only=True)
    if state is not None:
        zeros = 0
        for i, l in enumerate(graph.layers):
            if l.kind in ("conv2d", "linear"):
                w = state.params[f"layers.{i}.weight"]
                zeros += int(w.size - np.count_nonzero(w))
    else:
        zeros = sum(
            int(np.asarray(m).size - np.count_nonzero(m)) * graph.layers[j].kernel_size ** 2
            for j, m in masks.items()
        )
    return {
        "kernel_sparsity": pruned / total if total else 0.0,
        "param_sparsity": zeros / weight_total if weight_total else 0.0,
        "fully_pruned_filters": full,
        "per_layer": per_layer,
    }


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class MetricsReport:
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    report_version: int = REPORT_VERSION

    def to_dict(self):
        return {"report_version": self.report_version, "meta": self.meta, "records": self.records}

    @classmethod
    def from_dict(cls, d):
        if d.get("report_version") != REPORT_VERSION:
            raise UsageError(f"unsupported report_version {d.get('report_version')!r}")
        return cls(records=list(d.get("records", [])), meta=dict(d.get("meta", {})))

    def final(self, key):
        return self.records[-1][key] if self.records else None


def _atomic_write(path, text):
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    except OSError as exc:
        raise OSError(f"{path}: cannot write ({exc.strerror or exc})") from None
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(rows, fields):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})
    return buf.getvalue()


def emit_report(report, fmt, path):
    """Write ``report`` as ``json`` or ``csv`` via temp file + rename."""
    if fmt == "json":
        text = json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n"
    elif fmt == "csv":
        text = _csv_text(report.records, CSV_FIELDS)
    else:
        raise UsageError(f"unknown report format {fmt!r}")
    _atomic_write(path, text)
    return Path(path)


def load_report(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: cannot read report ({exc})") from None
    return MetricsReport.from_dict(doc)


def merge_reports(paths, out_path):
    """Concatenate several JSON reports into one CSV with a leading ``run`` column."""
    rows = []
    for p in paths:
        rep = load_report(p)
        run = rep.meta.get("run") or Path(p).parent.name or Path(p).stem
        rows += [dict(r, run=run) for r in rep.records]
    _atomic_write(out_path, _csv_text(rows, ("run",) + CSV_FIELDS))
    return len(rows)
