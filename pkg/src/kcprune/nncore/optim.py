import numpy as np

from ..errors import UsageError


def sgd_step(state, grads, lr, momentum=0.0, weight_decay=0.0):
    """In-place SGD with momentum: v <- mu*v + g + wd*w ; w <- w - lr*v."""
    for name, w in state.params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != w.shape:
            raise UsageError(f"gradient for {name} has shape {g.shape}, parameter is {w.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(w)
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * w
        w -= lr * v
    return state
