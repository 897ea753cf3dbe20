"""Per-feature classifiers: sigmoid normalization, histogram intersection
kernel SVM trained with SMO, and balanced-prior logistic calibration."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ValidationError

log = logging.getLogger(__name__)

KERNEL = "histogram_intersection"
SIGMA_FLOOR = 1e-12


# -- normalization ------------------------------------------------------------


@dataclass
class SigmoidNormalizer:
    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def fit(cls, X) -> SigmoidNormalizer:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 2:
            raise ContractError("normalizer needs at least 2 training rows")
        return cls(X.mean(axis=0), np.maximum(X.std(axis=0), SIGMA_FLOOR))

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.mu.shape[0]:
            raise ContractError(f"expected {self.mu.shape[0]} dims, got {X.shape[-1]}")
        z = (X - self.mu) / self.sigma
        e = np.exp(-np.abs(z))
        return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def fit_normalizer(X) -> SigmoidNormalizer:
    return SigmoidNormalizer.fit(X)


def apply_normalizer(norm: SigmoidNormalizer, x) -> np.ndarray:
    return norm.apply(x)


# -- kernel -------------------------------------------------------------------


def hik(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractError(f"dimension mismatch {x.shape} vs {y.shape}")
    return float(np.minimum(x, y).sum())


def hik_gram(X, Y=None) -> np.ndarray:
    """Pairwise histogram-intersection kernel between the rows of X and Y."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = X if Y is None else np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise ContractError(f"dimension mismatch {X.shape[1]} vs {Y.shape[1]}")
    K = np.empty((X.shape[0], Y.shape[0]))
    for i in range(X.shape[0]):
        K[i] = np.minimum(X[i], Y).sum(axis=1)
    return K


# -- SVM ----------------------------------------------------------------------


@dataclass
class SvmModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i
    bias: float
    C: float
    kernel: str = KERNEL
    iterations: int = 0

    def decision(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.support_vectors.shape[0] == 0:
            return np.full(X.shape[0], self.bias)
        if X.shape[1] != self.support_vectors.shape[1]:
            raise ContractError(
                f"expected {self.support_vectors.shape[1]} dims, got {X.shape[1]}"
            )
        return hik_gram(X, self.support_vectors) @ self.dual_coef + self.bias


def decision(m: SvmModel, x) -> float | np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = m.decision(x)
    return float(out[0]) if x.ndim == 1 else out


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if not np.all((y == 1) | (y == -1)):
        raise ContractError("labels must be -1 or +1")
    if (y == 1).sum() == 0 or (y == -1).sum() == 0:
        raise ContractError("both classes must be present")
    return y.astype(np.float64)


def smo(K: np.ndarray, y: np.ndarray, C: float, tol: float = 1e-3, max_iter: int | None = None):
    """Solve ``min 0.5 a'Qa - sum(a)`` s.t. ``y'a = 0, 0 <= a <= C``.

    Uses the maximal violating pair at each step. Returns ``(alpha, bias,
    iterations)`` where the bias makes ``K @ (alpha*y) + bias`` the decision
    function.
    """
    n = y.shape[0]
    alpha = np.zeros(n)
    grad = -np.ones(n)
    max_iter = max_iter or max(100_000, 100 * n)
    tau = 1e-12
    it = 0
    while True:
        minus_yg = -y * grad
        up = ((alpha < C) & (y > 0)) | ((alpha > 0) & (y < 0))
        low = ((alpha < C) & (y < 0)) | ((alpha > 0) & (y > 0))
        i = int(np.argmax(np.where(up, minus_yg, -np.inf)))
        j = int(np.argmin(np.where(low, minus_yg, np.inf)))
        gap = minus_yg[i] - minus_yg[j]
        if gap <= tol:
            break
        if it >= max_iter:
            log.warning("SMO stopped after %d iterations with KKT gap %.3g", it, gap)
            break
        quad = max(K[i, i] + K[j, j] - 2.0 * K[i, j], tau)
        t = gap / quad
        t = min(t, C - alpha[i] if y[i] > 0 else alpha[i])
        t = min(t, alpha[j] if y[j] > 0 else C - alpha[j])
        alpha[i] += y[i] * t
        alpha[j] -= y[j] * t
        # snap onto the box so bound membership is exact
        for k in (i, j):
            if alpha[k] < 1e-14 * C:
                alpha[k] = 0.0
            elif alpha[k] > C * (1 - 1e-14):
                alpha[k] = C
        grad += t * y * (K[:, i] - K[:, j])
        it += 1

    minus_yg = -y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        bias = float(minus_yg[free].mean())
    else:
        up = ((alpha < C) & (y > 0)) | ((alpha > 0) & (y < 0))
        low = ((alpha < C) & (y < 0)) | ((alpha > 0) & (y > 0))
        hi = minus_yg[up].max() if up.any() else minus_yg[low].min()
        lo = minus_yg[low].min() if low.any() else minus_yg[up].max()
        bias = float((hi + lo) / 2)
    return alpha, bias, it


def train_svm(X, y, C: float = 1.0, tol: float = 1e-3) -> SvmModel:
    X = np.asarray(X, dtype=np.float64)
    y = _check_labels(y)
    if C <= 0:
        raise ContractError("C must be positive")
    if X.shape[0] != y.shape[0]:
        raise ContractError("X and y lengths differ")
    K = hik_gram(X)
    alpha, bias, it = smo(K, y, C, tol)
    sv = alpha > 0
    return SvmModel(X[sv].copy(), (alpha * y)[sv], bias, C, KERNEL, it)


def dual_objective(K, y, alpha) -> float:
    ay = alpha * y
    return 0.5 * float(ay @ K @ ay) - float(alpha.sum())


def kkt_violations(K, y, alpha, bias, C, tol=1e-3) -> np.ndarray:
    """Boolean mask of points violating the soft-margin KKT conditions."""
    margin = y * (K @ (alpha * y) + bias)
    at_zero = alpha <= 0
    at_c = alpha >= C
    free = ~at_zero & ~at_c
    return (
        (at_zero & (margin < 1 - tol))
        | (at_c & (margin > 1 + tol))
        | (free & (np.abs(margin - 1) > tol))
    )


# -- calibration --------------------------------------------------------------


@dataclass
class Calibration:
    A: float
    B: float

    def __call__(self, d) -> np.ndarray:
        z = self.A * np.asarray(d, dtype=np.float64) + self.B
        # 1 / (1 + exp(z)) without overflow
        e = np.exp(-np.abs(z))
        return np.where(z >= 0, e / (1.0 + e), 1.0 / (1.0 + e))


def fit_logistic(decisions, labels, balanced: bool = True, max_iter: int = 100) -> Calibration:
    """Regularized maximum-likelihood fit of ``p = 1/(1+exp(A*d+B))``.

    Targets use the ``(N+1)/(N+2)`` smoothing. With ``balanced`` both classes
    are reweighted to an effective count of N/2 first, which encodes an equal
    class prior.
    """
    f = np.asarray(decisions, dtype=np.float64)
    pos = np.asarray(labels) > 0
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("calibration needs both classes")
    n = n_pos + n_neg
    if balanced:
        w = np.where(pos, n / (2.0 * n_pos), n / (2.0 * n_neg))
        eff_pos = eff_neg = n / 2.0
    else:
        w = np.ones(n)
        eff_pos, eff_neg = float(n_pos), float(n_neg)
    t = np.where(pos, (eff_pos + 1.0) / (eff_pos + 2.0), 1.0 / (eff_neg + 2.0))

    def loss(a, b):
        z = a * f + b
        return float(np.sum(w * (np.logaddexp(0.0, z) - (1.0 - t) * z)))

    A, B = 0.0, math.log((eff_neg + 1.0) / (eff_pos + 1.0))
    current = loss(A, B)
    for _ in range(max_iter):
        p = Calibration(A, B)(f)
        r = w * (t - p)
        g = np.array([r @ f, r.sum()])
        h = w * p * (1.0 - p)
        H = np.array([[h @ (f * f), h @ f], [h @ f, h.sum()]]) + 1e-12 * np.eye(2)
        if np.max(np.abs(g)) < 1e-10:
            break
        step = np.linalg.solve(H, g)
        size = 1.0
        while size >= 1e-10:
            a_new, b_new = A - size * step[0], B - size * step[1]
            new = loss(a_new, b_new)
            if new < current + 1e-4 * size * float(g @ -step):
                break
            size /= 2.0
        else:
            break
        A, B, current = a_new, b_new, new
    return Calibration(float(A), float(B))


def stratified_folds(labels, k: int, seed: int) -> np.ndarray:
    """Fold id per sample; each class is shuffled and dealt round-robin."""
    labels = np.asarray(labels)
    folds = np.empty(labels.shape[0], dtype=np.intp)
    rng = np.random.default_rng(seed)
    offset = 0
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k:
            raise ContractError(f"class {cls} has {idx.size} samples, fewer than {k} folds")
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = (np.arange(idx.size) + offset) % k
        offset += idx.size
    return folds


def platt_calibrate(X, y, C: float = 1.0, folds: int = 3, seed: int = 0, tol: float = 1e-3):
    """Out-of-fold decision values, a logistic fit on them, then a full refit."""
    X = np.asarray(X, dtype=np.float64)
    y = _check_labels(y)
    assignment = stratified_folds(y, folds, seed)
    oof = np.empty(y.shape[0])
    for f in range(folds):
        held = assignment == f
        model = train_svm(X[~held], y[~held], C, tol)
        oof[held] = model.decision(X[held])
    cal = fit_logistic(oof, y)
    if cal.A >= 0:
        log.info("calibration slope A=%.3g is not negative; classifier no better than chance", cal.A)
    return train_svm(X, y, C, tol), cal


# -- full per-feature pipeline ------------------------------------------------


@dataclass
class CalibratedSvm:
    """Normalizer + SVM + calibration for one (feature, context) component."""

    normalizer: SigmoidNormalizer
    model: SvmModel
    calibration: Calibration
    feature_name: str = ""
    context: str = ""
    seed: int = 0
    folds: int = 3
    extra: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, X_raw, labels01, C=1.0, folds=3, seed=0, feature_name="", context="") -> CalibratedSvm:
        norm = SigmoidNormalizer.fit(X_raw)
        y = np.where(np.asarray(labels01) > 0, 1.0, -1.0)
        model, cal = platt_calibrate(norm.apply(X_raw), y, C, folds, seed)
        return cls(norm, model, cal, feature_name, context, seed, folds)

    def decision(self, X_raw) -> np.ndarray:
        return self.model.decision(self.normalizer.apply(np.atleast_2d(X_raw)))

    def predict_proba(self, X_raw) -> np.ndarray:
        return self.calibration(self.decision(X_raw))

    def to_dict(self) -> dict:
        return {
            "feature_name": self.feature_name,
            "context": self.context,
            "kernel": self.model.kernel,
            "C": self.model.C,
            "seed": self.seed,
            "folds": self.folds,
            "normalizer": {"mu": self.normalizer.mu.tolist(), "sigma": self.normalizer.sigma.tolist()},
            "support_vectors": self.model.support_vectors.tolist(),
            "dual_coef": self.model.dual_coef.tolist(),
            "bias": self.model.bias,
            "calibration": {"A": self.calibration.A, "B": self.calibration.B},
        }

    @classmethod
    def from_dict(cls, d: dict) -> CalibratedSvm:
        try:
            if d["kernel"] != KERNEL:
                raise ValidationError(f"unsupported kernel {d['kernel']!r}")
            mu = np.asarray(d["normalizer"]["mu"], dtype=np.float64)
            sv = np.asarray(d["support_vectors"], dtype=np.float64).reshape(-1, mu.shape[0])
            model = SvmModel(sv, np.asarray(d["dual_coef"], dtype=np.float64), float(d["bias"]), float(d["C"]))
            return cls(
                SigmoidNormalizer(mu, np.asarray(d["normalizer"]["sigma"], dtype=np.float64)),
                model,
                Calibration(float(d["calibration"]["A"]), float(d["calibration"]["B"])),
                d.get("feature_name", ""),
                d.get("context", ""),
                int(d.get("seed", 0)),
                int(d.get("folds", 3)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed model file: {exc!r}") from exc


def predict_proba(m: SvmModel | None, cal: Calibration | None,
                  normalizer: SigmoidNormalizer | None, x_raw) -> np.ndarray:
    if m is None or cal is None or normalizer is None:
        raise ContractError("model, calibration and normalizer must all be fitted")
    return cal(m.decision(normalizer.apply(np.atleast_2d(x_raw))))
