"""Feature distillation: temperature-softened KL between teacher and student taps."""

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .nncore.losses import log_softmax


@dataclass
class DistillConfig:
    teacher_graph: object
    teacher_state: object
    tap: int
    alpha: float = 0.9
    temperature: float = 15.0
    t_squared: bool = False  # conventional T^2 rescaling; off to keep the literal loss

    def validate(self, student_graph):
        if not 0.0 <= self.alpha <= 1.0:
            raise UsageError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise UsageError(f"temperature must be positive, got {self.temperature}")
        for label, g in (("teacher", self.teacher_graph), ("student", student_graph)):
            if not 0 <= self.tap < len(g.layers):
                raise UsageError(f"tap {self.tap} is not a layer of the {label} graph")
        ts = self.teacher_graph.shapes[self.tap]
        ss = student_graph.shapes[self.tap]
        if ts != ss:
            raise UsageError(f"tap {self.tap} shape differs: teacher {ts}, student {ss}")


def fd_loss(teacher_feat, student_feat, temperature, t_squared=False):
    """Sum over the batch of KL(softmax(C_t/T) || softmax(C_s/T)).

    Each sample's feature volume is flattened before the softmax.  Returns the
    loss and its gradient with respect to ``student_feat``; the teacher side is
    a constant.
    """
    ct = np.asarray(teacher_feat)
    cs = np.asarray(student_feat)
    if ct.shape != cs.shape:
        raise UsageError(f"teacher/student feature shapes differ: {ct.shape} vs {cs.shape}")
    if ct.ndim < 2:
        raise UsageError("features need a leading batch axis")
    if not temperature > 0:
        raise UsageError(f"temperature must be positive, got {temperature}")
    n = ct.shape[0]
    zt = ct.reshape(n, -1).astype(np.float64) / temperature
    zs = cs.reshape(n, -1).astype(np.float64) / temperature
    logp = log_softmax(zt, axis=1)
    logq = log_softmax(zs, axis=1)
    p = np.exp(logp)
    loss = float(np.sum(p * (logp - logq)))
    grad = (np.exp(logq) - p) / temperature
    if t_squared:
        loss *= temperature ** 2
        grad *= temperature ** 2
    return max(loss, 0.0), grad.reshape(cs.shape).astype(cs.dtype if cs.dtype.kind == "f" else np.float64)


def combined_loss(task, fd, alpha):
    """Blend ``(loss, grad)`` pairs: alpha * task + (1 - alpha) * fd.

    The two gradients live on different tensors (logits and tap output), so both
    are returned scaled: ``(loss, task_grad, fd_grad)``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise UsageError(f"alpha must lie in [0, 1], got {alpha}")
    (lt, gt), (lf, gf) = task, fd
    loss = alpha * lt + (1.0 - alpha) * lf
    return loss, gt * alpha, gf * (1.0 - alpha)
