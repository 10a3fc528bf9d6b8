"""Kernel cluster pruning.

Each conv layer's kernels (the K x K slices of its weight tensor) are compared
with the layer's mean kernel.  The kernels closest to that mean are treated as
the least representative and are zeroed, with the pruned portion growing
linearly over the fine-tune epochs.
"""

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import _accel
from .errors import UsageError
from .metrics import MetricsReport, flops_with_masks, sparsity
from .nncore.model import check_state, pname
from .nncore.train import check_dataset, evaluate, train_epoch
from .tensorcore import mean_over_leading_axes

log = logging.getLogger(__name__)

CRITERIA = ("center", "adversarial")
MODES = ("soft", "hard")


@dataclass(frozen=True)
class KernelIndex:
    """Kernel position: conv layer index, input channel m, output channel n (0-based)."""

    layer: int
    m: int
    n: int


@dataclass
class PruneConfig:
    target_sparsity: float = 0.5
    epochs: int = 10
    criteria: str = "center"
    adversarial_layer_fraction: float = 0.0
    normalize_kernels: bool = False
    finetune_mode: str = "soft"
    eligible_layers: list | None = None  # None: every conv layer
    seed: int = 0
    guard_full_filters: bool = False

    @property
    def step(self):
        return self.target_sparsity / self.epochs

    def portion(self, epoch):
        """Portion pruned at 1-based ``epoch``: epoch * S / E, clamped to S."""
        return min(epoch * self.step, self.target_sparsity)

    def validate(self):
        errs = []
        if not 0.0 < self.target_sparsity <= 1.0:
            errs.append(f"target sparsity must lie in (0, 1], got {self.target_sparsity}")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            errs.append(f"pruning epochs must be a positive integer, got {self.epochs}")
        if self.criteria not in CRITERIA:
            errs.append(f"criteria must be one of {CRITERIA}, got {self.criteria!r}")
        if not 0.0 <= self.adversarial_layer_fraction <= 1.0:
            errs.append(f"adversarial layer fraction must lie in [0, 1], got {self.adversarial_layer_fraction}")
        if self.finetune_mode not in MODES:
            errs.append(f"fine-tune mode must be one of {MODES}, got {self.finetune_mode!r}")
        return errs

    def to_dict(self):
        return asdict(self)


@dataclass
class PruneState:
    p: float
    epoch: int
    masks: dict = field(default_factory=dict)  # conv layer -> bool (C_out, C_in), True = kept
    adversarial_layers: tuple = ()

    @classmethod
    def start(cls, graph, config):
        layers = eligible_layers(graph, config)
        adv = ()
        if config.criteria == "adversarial":
            adv = designate_adversarial_layers(layers, config.adversarial_layer_fraction, config.seed)
        masks = {j: np.ones(_kernel_grid(graph, j), dtype=bool) for j in layers}
        return cls(p=config.portion(1), epoch=1, masks=masks, adversarial_layers=adv)

    def advance(self, config):
        self.epoch += 1
        self.p = config.portion(self.epoch)


def _kernel_grid(graph, j):
    l = graph.layers[j]
    return (l.out_channels, l.in_channels)


def eligible_layers(graph, config=None):
    convs = graph.conv_layers()
    chosen = None if config is None else config.eligible_layers
    if chosen is None:
        return convs
    bad = [j for j in chosen if j not in convs]
    if bad:
        raise UsageError(f"eligible layers {bad} are not conv layers")
    return sorted(set(chosen))


def designate_adversarial_layers(layers, fraction, seed):
    """Seeded draw of ceil(fraction * len(layers)) layers.

    Draws at one seed are nested: a larger fraction always contains the layers
    chosen for a smaller one.
    """
    count = math.ceil(fraction * len(layers) - 1e-9)
    if count <= 0:
        return ()
    perm = np.random.default_rng(int(seed)).permutation(len(layers))
    return tuple(sorted(layers[i] for i in perm[:count]))


def cluster_center(layer_weights):
    """Mean kernel of a conv weight tensor (C_out, C_in, K, K); float64 (K, K)."""
    w = np.asarray(layer_weights)
    if w.ndim != 4:
        raise UsageError(f"conv weights must be 4-D, got shape {w.shape}")
    return mean_over_leading_axes(w, 2)


def _unit_kernels(w):
    co, ci, k, _ = w.shape
    flat = w.reshape(co, ci, k * k).astype(np.float64)
    norms = np.sqrt(np.sum(flat * flat, axis=2, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)
    return (flat / safe).reshape(w.shape)


def kernel_distances(layer_weights, center=None, normalize=False):
    """Frobenius distance of every kernel to the layer centre, shape (C_out, C_in).

    With ``normalize`` each kernel is first scaled to unit norm (zero kernels
    stay zero) and the centre is recomputed from the scaled kernels; the given
    ``center`` is then ignored.
    """
    w = np.asarray(layer_weights)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise UsageError(f"conv weights must be (C_out, C_in, K, K), got {w.shape}")
    if normalize:
        w = _unit_kernels(w)
        center = cluster_center(w)
    elif center is None:
        center = cluster_center(w)
    center = np.asarray(center, dtype=np.float64)
    if center.shape != w.shape[2:]:
        raise UsageError(f"center shape {center.shape} does not match kernel shape {w.shape[2:]}")
    co, ci, k, _ = w.shape
    return _accel.kernel_distances(np.ascontiguousarray(w).reshape(co, ci, k * k), center.reshape(-1))


def prune_count(p, total):
    """round(p * total), halves rounding up, tolerant of float noise in p."""
    return max(0, min(total, int(math.floor(p * total + 0.5 + 1e-9))))


def select_layer(distances, k, largest=False, guard_full_filters=False):
    """Boolean (C_out, C_in) matrix marking ``k`` kernels to prune.

    Smallest distances first (largest when ``largest``); equal distances are
    taken in ascending (n, m) order.
    """
    d = np.asarray(distances, dtype=np.float64)
    flat = d.reshape(-1)
    order = np.argsort(-flat if largest else flat, kind="stable")
    pruned = np.zeros(flat.size, dtype=bool)
    if not guard_full_filters:
        pruned[order[:k]] = True
        return pruned.reshape(d.shape)
    ci = d.shape[1]
    per_row = np.zeros(d.shape[0], dtype=np.int64)
    taken = 0
    for idx in order:
        if taken == k:
            break
        row = idx // ci
        if per_row[row] + 1 >= ci:
            continue
        per_row[row] += 1
        pruned[idx] = True
        taken += 1
    return pruned.reshape(d.shape)


def select_prune_set(distances, p, criteria="center", adversarial_layers=(), guard_full_filters=False):
    """Per-layer kernels to prune at portion ``p``.

    ``distances`` maps conv layer -> (C_out, C_in) matrix.  Each layer gets
    exactly round(p * C_out * C_in) kernels: the nearest to its centre, or the
    farthest for layers listed in ``adversarial_layers`` when ``criteria`` is
    "adversarial".  Returns layer -> boolean matrix (True = prune).
    """
    if not 0.0 <= p <= 1.0:
        raise UsageError(f"portion p must lie in [0, 1], got {p}")
    if criteria not in CRITERIA:
        raise UsageError(f"unknown criteria {criteria!r}")
    adv = set(adversarial_layers) if criteria == "adversarial" else set()
    out = {}
    for j, d in distances.items():
        d = np.asarray(d)
        if d.ndim != 2:
            raise UsageError(f"layer {j}: distance matrix must be 2-D")
        if not np.isfinite(d).all():
            raise UsageError(f"layer {j}: distances must be finite")
        out[j] = select_layer(d, prune_count(p, d.size), largest=j in adv, guard_full_filters=guard_full_filters)
    return out


def kernel_indices(layer, pruned):
    """KernelIndex entries for a boolean prune matrix, in ascending (n, m) order."""
    return [KernelIndex(layer, int(m), int(n)) for n, m in zip(*np.nonzero(pruned))]


def apply_masks(state, masks):
    """Zero every kernel whose mask entry is False; shapes never change."""
    for j, mask in masks.items():
        name = pname(j, "weight")
        w = state.params.get(name)
        if w is None or w.ndim != 4:
            raise UsageError(f"mask for layer {j} does not refer to a conv weight")
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != w.shape[:2]:
            raise UsageError(f"mask for layer {j} has shape {mask.shape}, kernels are {w.shape[:2]}")
        if not mask.all():
            w[~mask] = 0.0
    return state


def _zero_velocity(state, masks):
    for j, mask in masks.items():
        v = state.velocity.get(pname(j, "weight"))
        if v is not None:
            v[~mask] = 0.0


def hard_grad_hook(masks):
    """Gradient hook that freezes pruned kernels at zero."""
    def hook(grads):
        for j, mask in masks.items():
            g = grads.get(pname(j, "weight"))
            if g is not None:
                g[~mask] = 0.0
    return hook


def prune_epoch(graph, state, prune_state, config):
    """Prune every eligible layer at the current portion ``prune_state.p``.

    Soft mode rebuilds each mask from scratch; hard mode intersects with the
    existing mask, so once-pruned kernels stay pruned.
    """
    distances = {}
    for j in prune_state.masks:
        w = state.conv_weight(j)
        distances[j] = kernel_distances(w, normalize=config.normalize_kernels)
    selected = select_prune_set(distances, prune_state.p, config.criteria,
                                prune_state.adversarial_layers, config.guard_full_filters)
    masks = {}
    for j, pruned in selected.items():
        if config.finetune_mode == "hard":
            masks[j] = prune_state.masks[j] & ~pruned
        else:
            masks[j] = ~pruned
    apply_masks(state, masks)
    if config.finetune_mode == "hard":
        _zero_velocity(state, masks)
    prune_state.masks = masks
    return state, prune_state, masks


def portion_schedule(config):
    return [config.portion(e) for e in range(1, config.epochs + 1)]


def run_schedule(graph, state, dataset, config, train_config, eval_dataset=None, distill=None,
                 epoch_offset=0, report=None, on_epoch=None):
    """Fine-tune / prune loop for ``config.epochs`` epochs.

    Each epoch trains once over ``dataset``, prunes at p = epoch * S / E and
    records metrics evaluated on ``eval_dataset`` (``dataset`` if omitted).
    ``epoch_offset`` shifts the data-order and learning-rate epoch index so a
    run can continue a pretraining schedule.  ``on_epoch(record, state, masks)``
    is called after each prune step.  Returns ``(state, report)``.
    """
    errs = config.validate() + train_config.validate()
    if errs:
        raise UsageError("; ".join(errs))
    check_state(graph, state)
    check_dataset(graph, dataset)
    eval_dataset = dataset if eval_dataset is None else eval_dataset
    check_dataset(graph, eval_dataset)
    if distill is not None:
        distill.validate(graph)
    if report is None:
        report = MetricsReport(meta={"graph": graph.name, "seed": config.seed})
    ps = PruneState.start(graph, config)
    for e in range(config.epochs):
        hook = hard_grad_hook(ps.masks) if config.finetune_mode == "hard" else None
        stats = train_epoch(graph, state, dataset, train_config, epoch_offset + e, seed=config.seed,
                            grad_hook=hook, distill=distill)
        state, ps, masks = prune_epoch(graph, state, ps, config)
        acc, eval_loss = evaluate(graph, state, eval_dataset)
        sp = sparsity(graph, masks=masks, state=state)
        rec = {
            "epoch": ps.epoch,
            "phase": "prune",
            "p": ps.p,
            **stats,
            "eval_accuracy": acc,
            "eval_loss": eval_loss,
            "kernel_sparsity": sp["kernel_sparsity"],
            "param_sparsity": sp["param_sparsity"],
            "flops": flops_with_masks(graph, masks),
            "fully_pruned_filters": sp["fully_pruned_filters"],
            "layer_kernel_sparsity": {str(j): v for j, v in sp["per_layer"].items()},
        }
        report.records.append(rec)
        log.info("prune epoch %d/%d p=%.4f loss=%.4f acc=%.4f kernel_sparsity=%.4f flops=%d",
                 ps.epoch, config.epochs, ps.p, stats["train_loss"], acc, sp["kernel_sparsity"], rec["flops"])
        if on_epoch is not None:
            on_epoch(rec, state, masks)
        ps.advance(config)
    report.meta["final_masks"] = {str(j): int(m.sum()) for j, m in ps.masks.items()}
    state.masks = ps.masks
    return state, report
