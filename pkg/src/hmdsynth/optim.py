"""Small Levenberg-Marquardt driver over manifold-valued states."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class ConvergenceError(RuntimeError):
    pass


@dataclass
class LMResult:
    x: Any
    cost: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)  # cost after every accepted step, starting value first


def levenberg_marquardt(
    residual_jac: Callable[[Any], tuple[np.ndarray, np.ndarray] | None],
    x0: Any,
    retract: Callable[[Any, np.ndarray], Any],
    max_iter: int = 50,
    tol: float = 1e-12,
    lam: float = 1e-3,
) -> LMResult:
    """Minimise ``0.5 * |r(x)|^2``.

    ``residual_jac(x)`` returns ``(r, J)`` with ``J = dr/d(delta)`` at ``x`` or
    ``None`` if ``x`` is infeasible; ``retract(x, delta)`` applies an increment.
    Marquardt scaling of the damping keeps steps invariant to parameter units.
    """
    out = residual_jac(x0)
    if out is None:
        raise ConvergenceError("initial state is infeasible")
    r, J = out
    x = x0
    cost = 0.5 * float(r @ r)
    history = [cost]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = J.T @ r
        if np.linalg.norm(g, np.inf) <= tol * max(1.0, cost) or cost == 0.0:
            converged = True
            break
        H = J.T @ J
        d = np.diag(H).copy()
        d[d <= 0] = 1.0
        accepted = False
        while lam < 1e16:
            try:
                delta = np.linalg.solve(H + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = retract(x, delta)
            out = residual_jac(x_new)
            if out is not None:
                r_new, J_new = out
                cost_new = 0.5 * float(r_new @ r_new)
                if cost_new < cost:
                    accepted = True
                    break
            lam *= 10.0
        if not accepted:
            converged = np.linalg.norm(g) <= 1e-6 * max(1.0, np.sqrt(cost))
            break
        rel = (cost - cost_new) / max(cost, 1e-300)
        x, r, J, cost = x_new, r_new, J_new, cost_new
        history.append(cost)
        lam = max(lam / 10.0, 1e-12)
        if rel < tol or np.linalg.norm(delta) < 1e-14:
            converged = True
            break
    return LMResult(x=x, cost=cost, iterations=it, converged=converged, history=history)
