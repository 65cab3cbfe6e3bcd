# app/services/utils/lbfgs.py
from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, List, Optional, Tuple

import numpy as np
from scipy.optimize import line_search

try:
    from scipy.optimize import LineSearchWarning
except ImportError:  # scipy < 1.16 does not re-export it
    from scipy.optimize._linesearch import LineSearchWarning

from app.core.config import TrainConfig
from app.core.errors import NumericalError

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    value_before: float
    value: float
    slope_before: float  # g0 . p
    slope_after: float  # g1 . p
    step: float
    grad_max: float


@dataclass
class LbfgsResult:
    params: np.ndarray
    value: float
    gradient: np.ndarray
    reason: str
    trace: List[TraceEntry] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.reason in ("ftol", "gtol")


class _Memo:
    """scipy's line search asks for f and f' separately; evaluate the pair once per point."""

    def __init__(self, objective: Objective):
        self.objective = objective
        self._x: Optional[np.ndarray] = None
        self._fg: Tuple[float, np.ndarray] = (0.0, np.zeros(0))
        self.calls = 0

    def __call__(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        if self._x is None or not np.array_equal(x, self._x):
            value, grad = self.objective(x)
            self.calls += 1
            self._x = np.array(x, copy=True)
            self._fg = (float(value), np.asarray(grad, dtype=np.float64))
        return self._fg

    def f(self, x: np.ndarray) -> float:
        return self(x)[0]

    def g(self, x: np.ndarray) -> np.ndarray:
        return self(x)[1]


def _two_loop(g: np.ndarray, pairs: Deque[Tuple[np.ndarray, np.ndarray, float]]) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * float(s @ q)
        q -= a * y
        alphas.append(a)
    if pairs:
        s, y, _ = pairs[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(objective: Objective, init: np.ndarray, cfg: Optional[TrainConfig] = None,
                   raise_on_failure: bool = False) -> LbfgsResult:
    """Minimise ``objective`` (returning value and gradient) from ``init``.

    Stops on relative objective change < ``cfg.ftol``, gradient max-norm
    < ``cfg.gtol`` or ``cfg.max_iters``. A line-search failure first drops
    the curvature memory and retries along the steepest descent; if that
    fails too the current iterate is returned with reason
    ``line_search_failed``.
    """
    cfg = cfg or TrainConfig()
    memo = _Memo(objective)
    x = np.array(init, dtype=np.float64, copy=True)
    f, g = memo(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericalError("objective is not finite at the initial point")

    pairs: Deque[Tuple[np.ndarray, np.ndarray, float]] = deque(maxlen=cfg.lbfgs_memory)
    trace: List[TraceEntry] = []
    f_prev: Optional[float] = None
    reason = "max_iters"

    if x.size == 0 or float(np.max(np.abs(g), initial=0.0)) < cfg.gtol:
        return LbfgsResult(x, f, g, "gtol", trace)

    for it in range(1, cfg.max_iters + 1):
        p = _two_loop(g, pairs)
        if float(g @ p) >= 0.0:
            pairs.clear()
            p = -g
        # first step: scale so the trial point moves ~1 unit (scipy's BFGS convention)
        old_old = f_prev if f_prev is not None else f + float(np.linalg.norm(g)) / 2.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LineSearchWarning)
            alpha, *_ = line_search(memo.f, memo.g, x, p, gfk=g, old_fval=f, old_old_fval=old_old,
                                    c1=cfg.wolfe_c1, c2=cfg.wolfe_c2, maxiter=50)
            if alpha is None and pairs:
                logger.debug("lbfgs iter %d: line search failed, resetting memory", it)
                pairs.clear()
                p = -g
                alpha, *_ = line_search(memo.f, memo.g, x, p, gfk=g, old_fval=f,
                                        old_old_fval=f + float(np.linalg.norm(g)) / 2.0,
                                        c1=cfg.wolfe_c1, c2=cfg.wolfe_c2, maxiter=50)
        if alpha is None:
            reason = "line_search_failed"
            break

        x_new = x + alpha * p
        f_new, g_new = memo(x_new)
        if not np.isfinite(f_new):
            raise NumericalError(f"objective became non-finite at L-BFGS iteration {it}")
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * float(y @ y):
            pairs.append((s, y, 1.0 / sy))
        grad_max = float(np.max(np.abs(g_new)))
        trace.append(TraceEntry(it, f, f_new, float(g @ p), float(g_new @ p), float(alpha), grad_max))
        logger.debug("lbfgs iter %d: f=%.10g |g|_inf=%.3g step=%.3g", it, f_new, grad_max, alpha)

        rel = abs(f - f_new) / max(abs(f), abs(f_new), np.finfo(float).tiny)
        f_prev, x, f, g = f, x_new, f_new, g_new
        if grad_max < cfg.gtol:
            reason = "gtol"
            break
        if rel < cfg.ftol:
            reason = "ftol"
            break

    logger.info("lbfgs stopped after %d iterations (%s), f=%.8g, %d evaluations",
                len(trace), reason, f, memo.calls)
    if reason == "line_search_failed" and raise_on_failure:
        raise NumericalError(f"line search failed after {len(trace)} iterations")
    return LbfgsResult(x, f, g, reason, trace)


def check_gradient(objective: Objective, params: np.ndarray, eps: float = 1e-5, n_coords: int = 50,
                   seed: int = 0) -> float:
    """Max relative error between analytic and central-difference partials on random coordinates."""
    params = np.asarray(params, dtype=np.float64)
    _, grad = objective(params)
    rng = np.random.default_rng(seed)
    coords = np.sort(rng.choice(params.size, size=min(n_coords, params.size), replace=False))
    worst = 0.0
    for c in coords:
        step = np.zeros_like(params)
        step[c] = eps
        numeric = (objective(params + step)[0] - objective(params - step)[0]) / (2.0 * eps)
        analytic = float(grad[c])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
        worst = max(worst, err)
    return worst
