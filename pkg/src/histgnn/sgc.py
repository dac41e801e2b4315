"""Convergence harness for a linear (pre-propagated) graph model trained
with per-row historical predictions.

The model is least squares on smoothed inputs: propagate features k hops
through the normalized adjacency once, then fit W by minimizing
l(W) = 1/2 ||X W - Y||_F^2. Each step draws a staleness tau per row:
tau = 0 with probability p0, else uniform on 1..s. Rows with tau = 0 are
predicted with the current weights and are the only rows contributing to
the update; stale rows are served from the weight history (earliest
available if tau reaches past the start). Serving a tau = 0 row from
history must agree with the fresh prediction to float round-off; the run
verifies that identity every step.

With p0 = 1 every row is fresh and the iteration is bitwise identical to
plain full-batch gradient descent. For eta < 2/L the mean over selector
seeds of the smallest squared gradient norm seen in T+1 steps is bounded
by (l(W0) - l(W*)) / ((T+1) * eta * p0 * (1 - L * eta / 2)).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

DIVERGENCE_LIMIT = 1e6


def propagate(adj_norm, features: np.ndarray, k: int) -> np.ndarray:
    """k-hop smoothing: adj_norm applied k times. Done once, up front."""
    if k < 0:
        raise ValueError("k must be >= 0")
    x = np.asarray(features, dtype=np.float64)
    for _ in range(k):
        x = adj_norm @ x
    return x


def estimate_lipschitz(
    x_hat: np.ndarray, loss: str = "least_squares", tol: float = 1e-8,
    max_iter: int = 100_000,
) -> float:
    """Largest eigenvalue of X^T X by power iteration on the d x d gram;
    the softmax variant uses the standard 1/2 curvature factor."""
    if loss not in ("least_squares", "softmax"):
        raise ValueError(f"unknown loss {loss!r}")
    gram = x_hat.T @ x_hat
    d = gram.shape[0]
    v = np.ones(d) + 1e-3 * np.arange(d)  # deterministic, not eigvec-orthogonal
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new = float(v @ (gram @ v))
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            lam = new
            break
        lam = new
    return 0.5 * lam if loss == "softmax" else lam


def least_squares_loss(x_hat: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    r = x_hat @ w - y
    return 0.5 * float(np.sum(r * r))


def draw_staleness(rng: np.random.Generator, n: int, p0: float, s: int) -> np.ndarray:
    """tau = 0 with probability p0, else uniform on 1..s."""
    u = rng.random(n)
    taus = np.zeros(n, dtype=np.int64)
    stale = u >= p0
    if s > 0 and stale.any():
        taus[stale] = rng.integers(1, s + 1, size=int(stale.sum()))
    return taus


def stale_predictions(
    x_hat: np.ndarray, history: list[np.ndarray], taus: np.ndarray
) -> np.ndarray:
    """Row i predicted with history[-1 - taus[i]]; reaches before the start
    of the recorded history fall back to its earliest entry."""
    out = np.empty((x_hat.shape[0], history[-1].shape[1]), dtype=np.float64)
    for tau in np.unique(taus):
        rows = taus == tau
        idx = max(len(history) - 1 - int(tau), 0)
        out[rows] = x_hat[rows] @ history[idx]
    return out


@dataclass
class SgcResult:
    grad_norms: np.ndarray  # true full-gradient Frobenius norm at W^t
    losses: np.ndarray
    identity_violations: np.ndarray  # max |history-served - fresh| on tau=0 rows
    weights: np.ndarray
    diverged: bool

    @property
    def steps(self) -> int:
        return len(self.grad_norms)

    @property
    def min_grad_norm(self) -> float:
        return float(self.grad_norms.min())

    @property
    def min_grad_sq(self) -> float:
        return float((self.grad_norms**2).min())


def run_convergence(
    x_hat: np.ndarray,
    y: np.ndarray,
    w0: np.ndarray,
    eta: float,
    num_steps: int,
    p0: float,
    s: int,
    seed: int = 0,
    trace_path=None,
) -> SgcResult:
    """num_steps + 1 gradient evaluations (at W^0 .. W^num_steps)."""
    if not 0.0 < p0 <= 1.0:
        raise ValueError(f"p0 must be in (0, 1], got {p0}")
    if s < 0:
        raise ValueError("s must be >= 0")
    if s == 0 and p0 != 1.0:
        raise ValueError("s=0 leaves no history for stale rows; needs p0=1")
    if eta <= 0:
        raise ValueError("eta must be positive")
    x_hat = np.asarray(x_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w0, dtype=np.float64).copy()
    history: list[np.ndarray] = []
    rng = np.random.default_rng(seed)
    n = x_hat.shape[0]
    grad_norms, losses, violations = [], [], []
    diverged = False
    for _t in range(num_steps + 1):
        history.append(w.copy())
        if len(history) > s + 1:
            history.pop(0)
        z_fresh = x_hat @ w
        resid = z_fresh - y
        grad_true = x_hat.T @ resid
        grad_norms.append(float(np.linalg.norm(grad_true)))
        losses.append(0.5 * float(np.sum(resid * resid)))
        taus = draw_staleness(rng, n, p0, s)
        mask0 = taus == 0
        z_tilde = stale_predictions(x_hat, history, taus)
        viol = (
            float(np.abs(z_tilde[mask0] - z_fresh[mask0]).max()) if mask0.any() else 0.0
        )
        violations.append(viol)
        grad_used = x_hat.T @ np.where(mask0[:, None], resid, 0.0)
        w = w - eta * grad_used
        if not np.all(np.isfinite(w)) or np.linalg.norm(w) > DIVERGENCE_LIMIT:
            diverged = True
            break
    result = SgcResult(
        grad_norms=np.array(grad_norms),
        losses=np.array(losses),
        identity_violations=np.array(violations),
        weights=w,
        diverged=diverged,
    )
    if trace_path is not None:
        write_trace(trace_path, result)
    return result


def run_gd(
    x_hat: np.ndarray, y: np.ndarray, w0: np.ndarray, eta: float, num_steps: int
) -> SgcResult:
    """Plain full-batch gradient descent; the p0=1 run must match it bitwise."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w0, dtype=np.float64).copy()
    grad_norms, losses = [], []
    diverged = False
    for _t in range(num_steps + 1):
        resid = x_hat @ w - y
        grad = x_hat.T @ resid
        grad_norms.append(float(np.linalg.norm(grad)))
        losses.append(0.5 * float(np.sum(resid * resid)))
        w = w - eta * grad
        if not np.all(np.isfinite(w)) or np.linalg.norm(w) > DIVERGENCE_LIMIT:
            diverged = True
            break
    return SgcResult(
        grad_norms=np.array(grad_norms),
        losses=np.array(losses),
        identity_violations=np.zeros(len(grad_norms)),
        weights=w,
        diverged=diverged,
    )


def convergence_bound(
    x_hat: np.ndarray,
    y: np.ndarray,
    w0: np.ndarray,
    eta: float,
    num_steps: int,
    p0: float,
) -> float:
    """(l(W0) - l(W*)) / ((T+1) eta p0 (1 - L eta / 2)), W* in closed form."""
    lip = estimate_lipschitz(x_hat)
    if eta >= 2.0 / lip:
        raise ValueError(f"eta={eta} is not below 2/L={2.0 / lip}")
    w_star = np.linalg.lstsq(x_hat, y, rcond=None)[0]
    gap = least_squares_loss(x_hat, y, w0) - least_squares_loss(x_hat, y, w_star)
    return gap / ((num_steps + 1) * eta * p0 * (1.0 - lip * eta / 2.0))


def write_trace(path, result: SgcResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "grad_norm", "loss", "identity_violation_max"])
        for t in range(result.steps):
            w.writerow(
                [
                    t,
                    result.grad_norms[t],
                    result.losses[t],
                    result.identity_violations[t],
                ]
            )
