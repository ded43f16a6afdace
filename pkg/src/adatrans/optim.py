"""First-order optimisation shared by the three fitters."""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .errors import NonFiniteGradient, NonFiniteLoss

log = logging.getLogger(__name__)


class ParamPacker:
    """Flatten a dict of named arrays into one vector and back.

    ``scales`` optionally maps names to a positive factor ``c``; the packed
    coordinate is then ``value / c``.  Adam's per-coordinate steps are scale
    free, so this acts as a per-block step size.
    """

    def __init__(self, template: Mapping[str, np.ndarray],
                 scales: Optional[Mapping[str, float]] = None):
        self.shapes: "OrderedDict[str, tuple]" = OrderedDict(
            (k, np.shape(v)) for k, v in template.items()
        )
        self.slices = {}
        start = 0
        for k, shp in self.shapes.items():
            size = int(np.prod(shp)) if shp else 1
            self.slices[k] = slice(start, start + size)
            start += size
        self.size = start
        self.scale = np.ones(self.size)
        for k, c in (scales or {}).items():
            if k in self.slices:
                self.scale[self.slices[k]] = float(c)

    def _flat(self, params: Mapping[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.size)
        for k, sl in self.slices.items():
            out[sl] = np.asarray(params[k], dtype=float).reshape(-1)
        return out

    def pack(self, params: Mapping[str, np.ndarray]) -> np.ndarray:
        return self._flat(params) / self.scale

    def pack_grad(self, grads: Mapping[str, np.ndarray]) -> np.ndarray:
        return self._flat(grads) * self.scale

    def unpack(self, vec: np.ndarray) -> Dict[str, np.ndarray]:
        vec = np.asarray(vec) * self.scale
        return {k: vec[sl].reshape(self.shapes[k]) if self.shapes[k] else float(vec[sl][0])
                for k, sl in self.slices.items()}


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    n_iter: int
    n_rejected: int
    converged: bool
    history: List[float] = field(default_factory=list)


def adam_minimize(fun: Callable[[np.ndarray], Tuple[float, np.ndarray]], x0: np.ndarray,
                  lr: float = 1e-2, max_iter: int = 2000, tol: float = 1e-6,
                  window: int = 20, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8, min_lr: float = 1e-9) -> OptimResult:
    """Adam with step-size control: a step is accepted only if it does not
    increase the objective, so the accepted history is non-increasing.

    A rejected step halves the step size and discards the first-moment
    estimate, so the retry moves along the preconditioned gradient (a descent
    direction) rather than along stale momentum.  Accepted steps let the step
    size recover toward ``lr``.  Stops when the objective moved less than
    ``tol * (1 + |f|)`` over the last ``window`` accepted steps, or when the
    step size falls below ``min_lr``.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not np.isfinite(f):
        raise NonFiniteLoss(f"objective is {f} at the starting point")
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("gradient is not finite at the starting point")
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    tm = tv = 0
    step = lr
    history = [f]
    rejected = 0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        m_new = beta1 * m + (1 - beta1) * g
        v_new = beta2 * v + (1 - beta2) * g * g
        mhat = m_new / (1 - beta1 ** (tm + 1))
        vhat = v_new / (1 - beta2 ** (tv + 1))
        cand = x - step * mhat / (np.sqrt(vhat) + eps)
        fc, gc = fun(cand)
        if np.isfinite(fc) and fc <= f and np.all(np.isfinite(gc)):
            x, f, g, m, v = cand, fc, gc, m_new, v_new
            tm += 1
            tv += 1
            step = min(lr, step * 1.25)
            history.append(f)
            if len(history) > window and abs(history[-1 - window] - f) < tol * (1 + abs(f)):
                converged = True
                break
        else:
            rejected += 1
            step *= 0.5
            m = np.zeros_like(x)
            tm = 0
            if step < min_lr:
                converged = True
                break
    return OptimResult(x, float(f), it, rejected, converged, history)
