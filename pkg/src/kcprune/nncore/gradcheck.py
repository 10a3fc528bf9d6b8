"""Central finite-difference gradient checking on float64 shadow parameters."""

from dataclasses import dataclass

import numpy as np

from .losses import softmax_cross_entropy
from .model import backward, forward


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: int | None
    checked: int
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def relative_error(a, b, floor=1e-10):
    return abs(a - b) / max(abs(a), abs(b), floor)


def ce_objective(labels):
    def objective(logits, tapped):
        loss, g = softmax_cross_entropy(logits, labels)
        return loss, g, {}
    return objective


def grad_check(graph, state, batch, labels=None, tolerance=1e-4, per_param=5, h=1e-5,
               seed=0, objective=None, taps=(), params=None):
    """Compare backprop against central differences on sampled parameters.

    ``objective(logits, tapped) -> (loss, dlogits, {layer: dtap})`` defaults to
    softmax cross-entropy on ``labels``.  The check always runs in training mode
    on a float64 copy of ``state``; the caller's state is not touched.
    """
    shadow = state.copy(dtype=np.float64)
    x = np.asarray(batch, dtype=np.float64)
    if objective is None:
        objective = ce_objective(labels)

    def loss_at():
        logits, tapped = forward(graph, shadow, x, training=True, taps=taps)
        return objective(logits, tapped)[0]

    logits, tapped = forward(graph, shadow, x, training=True, taps=taps)
    _, dlogits, extra = objective(logits, tapped)
    grads = backward(graph, shadow, dlogits, extra)

    rng = np.random.default_rng(seed)
    worst = (0.0, None, None)
    checked = 0
    names = params if params is not None else list(shadow.params)
    for name in names:
        w = shadow.params[name]
        flat = w.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
        for idx in sorted(int(i) for i in picks):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss_at()
            flat[idx] = orig - h
            lm = loss_at()
            flat[idx] = orig
            numeric = (lp - lm) / (2 * h)
            analytic = float(grads[name].reshape(-1)[idx])
            err = relative_error(analytic, numeric)
            checked += 1
            if err > worst[0]:
                worst = (err, name, idx)
    shadow._cache = None
    return GradCheckReport(worst[0], worst[1], worst[2], checked, tolerance)
