"""Closed-loop request/response timing model, Kalman filtering and residual tests.

Notation: u is the request inter-arrival series, y the response
inter-arrival series, both in ms. Measurement noise is w (not eta, which
names the scan-cycle ratio elsewhere).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .ksdetect import ks_decide
from .tracestore import TraceLog, response_iat

MAX_ORDER = 3


class StateModelError(ValueError):
    pass


@dataclass
class StateSpaceModel:
    """x_{k+1} = A x_k + B u_k + v_k,  y_k = C x_k + w_k (on centered data)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    u_mean: float = 0.0
    y_mean: float = 0.0
    fit_residual_var: float = float("nan")

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = self.A.shape[0]
        self.B = np.asarray(self.B, dtype=float).reshape(n, 1)
        self.C = np.asarray(self.C, dtype=float).reshape(1, n)
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.validate()

    @property
    def order(self) -> int:
        return self.A.shape[0]

    @property
    def cb(self) -> float:
        return float((self.C @ self.B)[0, 0])

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))

    def validate(self) -> None:
        n = self.order
        if self.A.shape != (n, n) or self.Q.shape != (n, n) or self.R.shape != (1, 1):
            raise StateModelError("inconsistent model dimensions")
        for name in ("Q", "R"):
            M = getattr(self, name)
            if not np.allclose(M, M.T):
                raise StateModelError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(M)) < -1e-12:
                raise StateModelError(f"{name} must be positive semidefinite")
        if self.spectral_radius() >= 1.0:
            raise StateModelError(f"unstable model: spectral radius of A is {self.spectral_radius():.4f}")

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(), "B": self.B.ravel().tolist(), "C": self.C.ravel().tolist(),
            "Q": self.Q.tolist(), "R": self.R.tolist(),
            "u_mean": self.u_mean, "y_mean": self.y_mean, "fit_residual_var": self.fit_residual_var,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StateSpaceModel":
        return cls(d["A"], d["B"], d["C"], d["Q"], d["R"], d.get("u_mean", 0.0), d.get("y_mean", 0.0),
                   d.get("fit_residual_var", float("nan")))


def closed_loop_series(trace: TraceLog, flow) -> tuple[np.ndarray, np.ndarray]:
    """(u, y) for the model, with u[k] the request gap that drives y[k+1].

    The response gap follows its request gap within the same step, so the
    raw pairs are shifted by one to make the model strictly proper.
    """
    u, y = response_iat(trace, flow)
    return u[1:], y[:-1]


def fit_state_space(u, y, order: int = 1, q_fraction: float = 0.5) -> StateSpaceModel:
    """Least-squares ARX(order) fit converted to observable canonical form.

    y_k = sum_i a_i y_{k-i} + sum_i b_i u_{k-i} + e_k. The residual variance
    of e is split into process noise (q_fraction, on the first state) and
    measurement noise (the rest).
    """
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    if not 1 <= order <= MAX_ORDER:
        raise StateModelError(f"order must be in 1..{MAX_ORDER}, got {order}")
    if len(u) != len(y):
        raise StateModelError(f"u has {len(u)} samples but y has {len(y)}")
    if len(y) < 20 * order:
        raise StateModelError(f"need at least {20 * order} samples for order {order}, got {len(y)}")
    if not 0 <= q_fraction <= 1:
        raise StateModelError("q_fraction must be in [0, 1]")
    um, ym = float(u.mean()), float(y.mean())
    uc, yc = u - um, y - ym
    n, N = order, len(y)
    rows = N - n
    Phi = np.empty((rows, 2 * n))
    for i in range(1, n + 1):
        Phi[:, i - 1] = yc[n - i:N - i]
        Phi[:, n + i - 1] = uc[n - i:N - i]
    target = yc[n:]
    sv = np.linalg.svd(Phi, compute_uv=False)
    if sv[-1] <= 1e-10 * max(sv[0], 1e-300):
        raise StateModelError(f"rank-deficient regression at order {order}; try a lower order")
    theta, *_ = np.linalg.lstsq(Phi, target, rcond=None)
    a, b = theta[:n], theta[n:]
    e = target - Phi @ theta
    # centering on full-series means leaves a small offset in e; it is not noise
    e = e - e.mean()
    var = float(e @ e / max(rows - 2 * n - 1, 1))
    A = np.zeros((n, n))
    A[:, 0] = a
    A[:-1, 1:] = np.eye(n - 1)
    Q = np.zeros((n, n))
    Q[0, 0] = q_fraction * var
    C = np.zeros(n)
    C[0] = 1.0
    return StateSpaceModel(A, b, C, Q, [[(1 - q_fraction) * var]], um, ym, var)


# ---------------------------------------------------------------------------
# Kalman filter
# ---------------------------------------------------------------------------

@dataclass
class KalmanState:
    x_hat: np.ndarray  # prior estimate for the next step
    P: np.ndarray  # prior error covariance for the next step
    L: np.ndarray  # last gain
    x_pred: np.ndarray = field(repr=False, default=None)  # prior estimates, one row per step
    gain_delta: np.ndarray = field(repr=False, default=None)  # ||L_k - L_{k-1}|| per step

    def predictor_radius(self, model: StateSpaceModel) -> float:
        """Spectral radius of A - A L C, the one-step predictor error dynamics."""
        M = model.A - model.A @ self.L @ model.C
        return float(np.max(np.abs(np.linalg.eigvals(M))))


@dataclass
class ResidualStats:
    residuals: np.ndarray
    mean: float
    covariance: float  # sample covariance of the residuals
    expected_cov: float  # C P C' + R at the last step

    @classmethod
    def of(cls, r: np.ndarray, expected_cov: float = float("nan")) -> "ResidualStats":
        r = np.asarray(r, dtype=float)
        cov = float(np.var(r, ddof=1)) if len(r) > 1 else 0.0
        return cls(r, float(np.mean(r)) if len(r) else 0.0, cov, float(expected_cov))

    def to_dict(self, with_residuals: bool = False) -> dict:
        d = {"n": int(len(self.residuals)), "mean": self.mean, "covariance": self.covariance,
             "expected_cov": self.expected_cov}
        if with_residuals:
            d["residuals"] = self.residuals.tolist()
        return d


class KalmanResult(NamedTuple):
    y_hat: np.ndarray
    stats: ResidualStats
    state: KalmanState


def stationary_covariance(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve P = A P A' + Q."""
    n = A.shape[0]
    vecP = np.linalg.solve(np.eye(n * n) - np.kron(A, A), Q.reshape(-1))
    P = vecP.reshape(n, n)
    return (P + P.T) / 2


def kalman_filter(model: StateSpaceModel, u, y, *, x0=None, P0=None, fixed_gain=None) -> KalmanResult:
    """Run predict/update over raw (uncentered) series.

    r_k = y_k - C x_{k|k-1}; y_hat are the one-step predictions. With
    ``fixed_gain`` the update uses that L at every step.
    """
    u = np.asarray(u, dtype=float) - model.u_mean
    y = np.asarray(y, dtype=float) - model.y_mean
    if len(u) != len(y):
        raise StateModelError(f"u has {len(u)} samples but y has {len(y)}")
    A, B, C, Q, R = model.A, model.B[:, 0], model.C, model.Q, model.R
    n = model.order
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    if P0 is None:
        P = stationary_covariance(A, Q) if np.any(Q) else np.eye(n) * float(R[0, 0] + 1.0)
    else:
        P = np.asarray(P0, dtype=float).copy()
    I = np.eye(n)
    N = len(y)
    r = np.empty(N)
    x_pred = np.empty((N, n))
    dL = np.empty(N)
    L_prev = np.zeros((n, 1))
    L = L_prev
    S = float("nan")
    for k in range(N):
        x_pred[k] = x
        S = float((C @ P @ C.T + R)[0, 0])
        if fixed_gain is None:
            # S = 0 means the prediction is exact; the pseudo-inverse gain is zero
            L = (P @ C.T) / S if S > 0 else np.zeros((n, 1))
        else:
            L = np.asarray(fixed_gain, dtype=float).reshape(n, 1)
        r[k] = y[k] - float(C[0] @ x)
        xu = x + L[:, 0] * r[k]
        Pu = (I - L @ C) @ P
        x = A @ xu + B * u[k]
        P = A @ Pu @ A.T + Q
        P = (P + P.T) / 2
        dL[k] = float(np.linalg.norm(L - L_prev))
        L_prev = L
        if not np.isfinite(P).all() or not np.isfinite(x).all():
            raise StateModelError(f"filter diverged at step {k}")
    y_hat = y - r + model.y_mean
    state = KalmanState(x, P, L, x_pred, dL)
    return KalmanResult(y_hat, ResidualStats.of(r, S), state)


def steady_state_gain(model: StateSpaceModel, tol: float = 1e-9, max_steps: int = 500):
    """Iterate the Riccati recursion until the gain settles; returns (L, steps)."""
    n = model.order
    A, C, Q, R = model.A, model.C, model.Q, model.R
    P = stationary_covariance(A, Q) if np.any(Q) else np.eye(n)
    L_prev = None
    for k in range(1, max_steps + 1):
        L = (P @ C.T) / float((C @ P @ C.T + R)[0, 0])
        P = A @ ((np.eye(n) - L @ C) @ P) @ A.T + Q
        if L_prev is not None and np.linalg.norm(L - L_prev) < tol:
            return L, k
        L_prev = L
    raise StateModelError(f"gain did not converge within {max_steps} steps")


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResidualVerdict:
    alarm: bool
    z: float
    ks_reject: bool


def residual_verdict(stats: ResidualStats, window: int, threshold_sigma: float = 3.0,
                     reference: ResidualStats | None = None, ks_alpha: float = 0.01) -> ResidualVerdict:
    r = stats.residuals
    if not 1 <= window <= len(r):
        raise StateModelError(f"window {window} not in 1..{len(r)}")
    seg = r[-window:]
    sigma2 = reference.covariance if reference is not None else stats.expected_cov
    if not sigma2 > 0:
        raise StateModelError("residual variance must be positive")
    z = float(np.mean(seg) / math.sqrt(sigma2 / window))
    ks_reject = False
    if reference is not None and window >= 2:
        ks_reject = ks_decide(seg, reference.residuals, ks_alpha).reject_null
    return ResidualVerdict(abs(z) > threshold_sigma or ks_reject, z, ks_reject)


def residual_test(stats: ResidualStats, window: int, threshold_sigma: float = 3.0,
                  reference: ResidualStats | None = None, ks_alpha: float = 0.01) -> bool:
    """Alarm on the last ``window`` residuals.

    Mean test against sqrt(sigma^2 / window), with sigma^2 from ``reference``
    (enrollment residuals) when given, else the filter's C P C' + R. With a
    reference, a K-S test of the window against it can also raise the alarm.
    """
    return residual_verdict(stats, window, threshold_sigma, reference, ks_alpha).alarm


def residual_alarms(stats: ResidualStats, window: int, threshold_sigma: float = 3.0,
                    reference: ResidualStats | None = None, ks_alpha: float = 0.01) -> np.ndarray:
    """residual_test over consecutive disjoint windows."""
    r = stats.residuals
    out = []
    for i in range(len(r) // window):
        seg = ResidualStats.of(r[i * window:(i + 1) * window], stats.expected_cov)
        out.append(residual_test(seg, window, threshold_sigma, reference, ks_alpha))
    return np.asarray(out, dtype=bool)


@dataclass(frozen=True)
class WatermarkCheck:
    alarm: bool
    z: float  # matched-filter statistic of the residuals against -CB du
    residual_mean: float
    expected_mean: float  # mean of -CB du over the window


def detect_replay_with_watermark(model: StateSpaceModel, kstate: KalmanState | None, delta_u, u_commanded,
                                 y_observed, threshold_sigma: float = 3.0,
                                 reference: ResidualStats | None = None) -> WatermarkCheck:
    """Alarm when the residuals carry the -C B du signature of a missing watermark.

    ``u_commanded`` already contains the watermark ``delta_u``. If y is live,
    the filter explains the watermark and residuals stay centered; if y was
    recorded without it, residuals follow -C B du. The statistic projects the
    residuals on that signature, scaled to unit variance under no attack.
    """
    du = np.asarray(delta_u, dtype=float)
    if len(du) != len(np.asarray(u_commanded)) or len(du) != len(np.asarray(y_observed)):
        raise StateModelError("delta_u, u and y must have equal lengths")
    if not np.any(du != 0):
        raise StateModelError("watermark schedule is inactive over the test window")
    x0 = None if kstate is None else kstate.x_hat
    P0 = None if kstate is None else kstate.P
    res = kalman_filter(model, u_commanded, y_observed, x0=x0, P0=P0)
    r = res.stats.residuals
    s = -model.cb * du
    sigma2 = reference.covariance if reference is not None else res.stats.expected_cov
    ss = float(s @ s)
    z = float(r @ s / math.sqrt(sigma2 * ss))
    return WatermarkCheck(z > threshold_sigma, z, float(np.mean(r)), float(np.mean(s)))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_model(model: StateSpaceModel, path, enrollment: ResidualStats | None = None) -> None:
    doc = {"format": "scancycle.statemodel", "version": 1, "model": model.to_dict()}
    if enrollment is not None:
        doc["enrollment"] = enrollment.to_dict(with_residuals=True)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path) -> tuple[StateSpaceModel, ResidualStats | None]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "scancycle.statemodel":
        raise StateModelError("not a state-model document")
    enr = doc.get("enrollment")
    stats = None
    if enr is not None:
        stats = ResidualStats(np.asarray(enr["residuals"]), enr["mean"], enr["covariance"], enr["expected_cov"])
    return StateSpaceModel.from_dict(doc["model"]), stats


def save_residuals(stats: ResidualStats, path) -> None:
    lines = ["k,residual"] + [f"{k},{v!r}" for k, v in enumerate(stats.residuals.tolist())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
