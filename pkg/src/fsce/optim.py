"""AdamW and the two learning-rate schedules used by the training loop."""

import numpy as np

from .errors import ConfigError
from .tensor import Parameter


class AdamW:
    """Adam with decoupled weight decay.

    update: p <- p - lr * (mhat / (sqrt(vhat) + eps) + weight_decay * p)
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params: list[Parameter] = list(params)
        if not self.params:
            raise ConfigError("optimizer over an empty parameter list")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ConfigError(f"betas must be in [0, 1), got {betas}")
        if lr <= 0 or eps <= 0 or weight_decay < 0:
            raise ConfigError("lr and eps must be positive, weight_decay non-negative")
        self.lr = float(lr)
        self.b1, self.b2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else float(lr)
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (lr * (mhat / (np.sqrt(vhat) + self.eps)
                             + self.weight_decay * p.data)).astype(p.dtype, copy=False)


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max (step 0) to lr_min (step == total)."""
    if total <= 0:
        raise ConfigError(f"total must be positive, got {total}")
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * step / total))


def onecycle_lr(step: int, total: int, lr_max: float, warmup_frac: float = 0.3,
                div: float = 25.0, final_div: float = 1e4) -> float:
    """Linear warmup from lr_max/div over warmup_frac of the run, then cosine
    decay to lr_max/(div*final_div)."""
    if total <= 0:
        raise ConfigError(f"total must be positive, got {total}")
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    if not 0.0 < warmup_frac < 1.0:
        raise ConfigError(f"warmup_frac must be in (0, 1), got {warmup_frac}")
    lr0 = lr_max / div
    lr_end = lr0 / final_div
    warm = warmup_frac * total
    if step <= warm:
        return lr0 + (lr_max - lr0) * (step / warm)
    frac = (step - warm) / (total - warm)
    return lr_end + 0.5 * (lr_max - lr_end) * (1.0 + np.cos(np.pi * frac))
