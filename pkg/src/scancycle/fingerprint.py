"""Kernel-SVM fingerprinting: multi-class, binary and one-class models.

The dual problems are solved by sequential minimal optimization with
second-order working-set selection (the scheme popularised by LIBSVM):

    min_a  1/2 a'Qa + p'a   s.t.  y'a = const,  0 <= a_i <= C_i

C-SVC uses Q_ij = y_i y_j K_ij, p = -1. The one-class nu-SVM uses Q = K,
p = 0, upper bound 1 and sum(a) = nu * l.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .featurize import FEATURE_NAMES, FeatureVector, feature_matrix

log = logging.getLogger(__name__)

MODEL_FORMAT = "scancycle.fingerprint"
MODEL_VERSION = 1
TAU = 1e-12
INLIER, OUTLIER = 1, -1


class FingerprintError(ValueError):
    pass


class ConvergenceError(FingerprintError):
    def __init__(self, violation: float, iterations: int):
        super().__init__(f"SMO did not converge after {iterations} iterations; final KKT violation {violation:.3e}")
        self.violation = violation
        self.iterations = iterations


class Mode(str, Enum):
    MULTI = "MULTI"
    BINARY = "BINARY"
    ONECLASS = "ONECLASS"


@dataclass(frozen=True)
class Kernel:
    kind: str = "rbf"  # "rbf" or "linear"
    gamma: float | None = None  # None: 1 / (d * var) of the standardized training data

    def matrix(self, X: np.ndarray, Z: np.ndarray, gamma: float) -> np.ndarray:
        if self.kind == "linear":
            return X @ Z.T
        if self.kind == "rbf":
            d2 = (X * X).sum(1)[:, None] + (Z * Z).sum(1)[None, :] - 2.0 * (X @ Z.T)
            np.maximum(d2, 0.0, out=d2)
            return np.exp(-gamma * d2)
        raise FingerprintError(f"unknown kernel {self.kind!r}")


RBF = Kernel("rbf")
LINEAR = Kernel("linear")


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_vectors(cls, vectors: Sequence[FeatureVector], labels=None) -> "Dataset":
        X = feature_matrix(vectors)
        y = np.asarray([v.label for v in vectors] if labels is None else labels)
        return cls(X, y)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.labels)
        if len(X) != len(y):
            raise FingerprintError(f"{len(X)} vectors but {len(y)} labels")
        if not np.isfinite(X).all():
            raise FingerprintError("dataset contains non-finite features")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.labels[idx])

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        return Dataset(np.vstack([p.X for p in parts]), np.concatenate([p.labels for p in parts]))


# ---------------------------------------------------------------------------
# SMO solver
# ---------------------------------------------------------------------------

@dataclass
class SolveResult:
    alpha: np.ndarray
    rho: float
    gap: float
    iterations: int


def smo_solve(Q: np.ndarray, p: np.ndarray, y: np.ndarray, C: np.ndarray, alpha0: np.ndarray,
              eps: float = 1e-3, max_iter: int | None = None) -> SolveResult:
    """Solve the box- and equality-constrained dual QP (LIBSVM's Solver)."""
    n = len(p)
    y = y.astype(float)
    a = alpha0.astype(float).copy()
    QD = np.diag(Q).copy()
    G = p + Q @ a
    if max_iter is None:
        max_iter = max(100_000, 100 * n)
    it = 0
    gap = np.inf
    while True:
        up = ((y > 0) & (a < C)) | ((y < 0) & (a > 0))
        low = ((y > 0) & (a > 0)) | ((y < 0) & (a < C))
        minus_yG = -y * G
        if not up.any() or not low.any():
            gap = 0.0
            break
        cand = np.where(up, minus_yG, -np.inf)
        i = int(np.argmax(cand))
        gmax = cand[i]
        gmin = float(np.min(minus_yG[low]))
        gap = gmax - gmin
        if gap < eps:
            break
        if it >= max_iter:
            raise ConvergenceError(gap, it)
        it += 1
        # second-order choice of j
        b = gmax + y * G  # = gmax - (-y G)
        ok = low & (b > 0)
        quad = QD[i] + QD - 2.0 * y[i] * y * Q[i]
        quad = np.where(quad > 0, quad, TAU)
        obj = np.where(ok, -(b * b) / quad, np.inf)
        j = int(np.argmin(obj))
        Qi, Qj = Q[i], Q[j]
        Ci, Cj = C[i], C[j]
        ai, aj = a[i], a[j]
        if y[i] != y[j]:
            qc = QD[i] + QD[j] + 2.0 * Qi[j]
            qc = qc if qc > 0 else TAU
            delta = (-G[i] - G[j]) / qc
            diff = ai - aj
            a[i] += delta
            a[j] += delta
            if diff > 0:
                if a[j] < 0:
                    a[j] = 0.0
                    a[i] = diff
            else:
                if a[i] < 0:
                    a[i] = 0.0
                    a[j] = -diff
            if diff > Ci - Cj:
                if a[i] > Ci:
                    a[i] = Ci
                    a[j] = Ci - diff
            else:
                if a[j] > Cj:
                    a[j] = Cj
                    a[i] = Cj + diff
        else:
            qc = QD[i] + QD[j] - 2.0 * Qi[j]
            qc = qc if qc > 0 else TAU
            delta = (G[i] - G[j]) / qc
            s = ai + aj
            a[i] -= delta
            a[j] += delta
            if s > Ci:
                if a[i] > Ci:
                    a[i] = Ci
                    a[j] = s - Ci
            else:
                if a[j] < 0:
                    a[j] = 0.0
                    a[i] = s
            if s > Cj:
                if a[j] > Cj:
                    a[j] = Cj
                    a[i] = s - Cj
            else:
                if a[i] < 0:
                    a[i] = 0.0
                    a[j] = s
        G += Qi * (a[i] - ai) + Qj * (a[j] - aj)

    # rho: average over free variables, else midpoint of the feasible interval
    yG = y * G
    free = (a > 0) & (a < C)
    if free.any():
        rho = float(np.mean(yG[free]))
    else:
        ub, lb = np.inf, -np.inf
        at_up = a >= C
        at_low = a <= 0
        m1 = (at_up & (y < 0)) | (at_low & (y > 0))
        m2 = (at_up & (y > 0)) | (at_low & (y < 0))
        if m1.any():
            ub = float(np.min(yG[m1]))
        if m2.any():
            lb = float(np.max(yG[m2]))
        rho = (ub + lb) / 2.0 if np.isfinite(ub) and np.isfinite(lb) else (ub if np.isfinite(ub) else lb)
    return SolveResult(a, rho, float(gap), it)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

@dataclass
class BinaryMachine:
    """One decision function sum_i coef_i K(sv_i, x) - rho.

    For C-SVC, a positive value votes for ``pos``; for one-class, a positive
    value means inlier.
    """

    pos: object
    neg: object
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # y_i * alpha_i (C-SVC) or alpha_i (one-class)
    rho: float
    # training-set bookkeeping for KKT checks; not serialized
    train_alpha: np.ndarray | None = None
    train_index: np.ndarray | None = None
    train_y: np.ndarray | None = None
    upper: float = 0.0

    def decision(self, K: np.ndarray) -> np.ndarray:
        return K @ self.dual_coef - self.rho


@dataclass
class FingerprintModel:
    mode: Mode
    kernel: Kernel
    gamma: float
    C: float
    nu: float
    mean: np.ndarray
    std: np.ndarray
    keep: np.ndarray  # retained feature mask (std > 0)
    classes: list
    machines: list[BinaryMachine] = field(default_factory=list)
    target: object = None  # one-class: the PLC the model describes
    meta: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return len(self.mean)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise FingerprintError(f"expected {self.n_features} features, got {X.shape[1]}")
        return ((X - self.mean) / np.where(self.keep, self.std, 1.0))[:, self.keep]

    def kernel_matrix(self, Z: np.ndarray, m: BinaryMachine) -> np.ndarray:
        return self.kernel.matrix(Z, m.support_vectors, self.gamma)

    def decision_function(self, X) -> np.ndarray:
        """Per-machine decision values, shape (n_samples, n_machines)."""
        Z = self.transform(X)
        return np.column_stack([m.decision(self.kernel_matrix(Z, m)) for m in self.machines])

    def predict(self, X) -> np.ndarray:
        D = self.decision_function(X)
        if self.mode is Mode.ONECLASS:
            return np.where(D[:, 0] > 0, INLIER, OUTLIER)
        if self.mode is Mode.BINARY:
            m = self.machines[0]
            return np.array([m.pos if d > 0 else m.neg for d in D[:, 0]], dtype=object)
        votes = np.zeros((len(D), len(self.classes)), dtype=int)
        pos_idx = [self.classes.index(m.pos) for m in self.machines]
        neg_idx = [self.classes.index(m.neg) for m in self.machines]
        for k in range(len(self.machines)):
            win = np.where(D[:, k] > 0, pos_idx[k], neg_idx[k])
            votes[np.arange(len(D)), win] += 1
        # ties go to the earlier class, as in one-vs-one voting
        return np.array([self.classes[i] for i in np.argmax(votes, axis=1)], dtype=object)


@dataclass
class Prediction:
    label: object
    score: float


def predict(model: FingerprintModel, vector) -> Prediction:
    """Label for one vector plus its decision score.

    The score is the signed margin for binary and one-class models, and the
    winning class's vote share for multi-class.
    """
    x = vector.as_array() if isinstance(vector, FeatureVector) else np.asarray(vector, dtype=float)
    if x.ndim != 1:
        raise FingerprintError("predict takes a single vector")
    D = model.decision_function(x[None, :])[0]
    label = model.predict(x[None, :])[0]
    if model.mode is Mode.MULTI:
        wins = sum(1 for m, d in zip(model.machines, D) if (m.pos if d > 0 else m.neg) == label)
        score = wins / max(1, len(model.classes) - 1)
    else:
        score = float(D[0])
    if isinstance(label, np.generic):
        label = label.item()
    return Prediction(label, float(score))


def _standardizer(X: np.ndarray):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    keep = std > 1e-12 * np.maximum(1.0, np.abs(mean))
    if not keep.any():
        raise FingerprintError("all features are constant in the training data")
    return mean, std, keep


def _train_csvc(K: np.ndarray, y: np.ndarray, C: float, eps: float, max_iter):
    n = len(y)
    Q = (y[:, None] * y[None, :]) * K
    res = smo_solve(Q, -np.ones(n), y, np.full(n, C), np.zeros(n), eps, max_iter)
    return res


def _train_oneclass(K: np.ndarray, nu: float, eps: float, max_iter):
    n = len(K)
    total = nu * n
    a0 = np.zeros(n)
    full = int(total)
    a0[:full] = 1.0
    if full < n:
        a0[full] = total - full
    return smo_solve(K, np.zeros(n), np.ones(n), np.ones(n), a0, eps, max_iter)


def train(dataset: Dataset, mode: Mode | str = Mode.MULTI, kernel: Kernel = RBF, *, C: float = 10.0,
          nu: float = 0.05, gamma: float | None = None, target=None, eps: float = 1e-3,
          max_iter: int | None = None) -> FingerprintModel:
    """Train a fingerprint model.

    ``target`` selects the class for ONECLASS (only its rows are used); when
    omitted every row is treated as the target class.
    """
    mode = Mode(mode)
    X, labels = dataset.X, dataset.labels
    if mode is Mode.ONECLASS:
        if target is not None:
            X = X[labels == target]
        if len(X) < 2:
            raise FingerprintError("one-class training needs at least 2 samples of the target class")
        if not 0 < nu <= 1:
            raise FingerprintError("nu must be in (0, 1]")
        classes = [target]
    else:
        classes = sorted(np.unique(labels).tolist())
        counts = {c: int(np.sum(labels == c)) for c in classes}
        if len(classes) < 2:
            raise FingerprintError(f"{mode.value} training needs at least 2 classes, got {len(classes)}")
        if mode is Mode.BINARY and len(classes) != 2:
            raise FingerprintError(f"BINARY mode needs exactly 2 classes, got {len(classes)}")
        small = [c for c, k in counts.items() if k < 2]
        if small:
            raise FingerprintError(f"classes {small} have fewer than 2 samples")
    mean, std, keep = _standardizer(X)
    Z = ((X - mean) / np.where(keep, std, 1.0))[:, keep]
    if gamma is None:
        gamma = kernel.gamma
    if gamma is None:
        var = float(Z.var())
        gamma = 1.0 / (Z.shape[1] * var) if var > 0 else 1.0 / Z.shape[1]
    model = FingerprintModel(mode, kernel, float(gamma), float(C), float(nu), mean, std, keep, classes,
                             target=target)
    if mode is Mode.ONECLASS:
        K = kernel.matrix(Z, Z, gamma)
        res = _train_oneclass(K, nu, eps, max_iter)
        sv = res.alpha > 0
        model.machines.append(BinaryMachine(
            INLIER, OUTLIER, Z[sv], res.alpha[sv], res.rho, res.alpha, np.arange(len(Z)), np.ones(len(Z)), 1.0
        ))
        model.meta["iterations"] = res.iterations
        return model
    K_all = kernel.matrix(Z, Z, gamma)
    for pos, neg in combinations(classes, 2):
        idx = np.flatnonzero((labels == pos) | (labels == neg)) if mode is Mode.MULTI else np.arange(len(Z))
        y = np.where(labels[idx] == pos, 1.0, -1.0)
        res = _train_csvc(K_all[np.ix_(idx, idx)], y, C, eps, max_iter)
        sv = res.alpha > 0
        model.machines.append(BinaryMachine(
            pos, neg, Z[idx][sv], (y * res.alpha)[sv], res.rho, res.alpha, idx, y, C
        ))
    return model


def kkt_violations(model: FingerprintModel, dataset: Dataset) -> np.ndarray:
    """Largest KKT violation per training point, over every machine it took part in.

    ``dataset`` must be the one the model was trained on.
    """
    Z = model.transform(dataset.X)
    if model.mode is Mode.ONECLASS and model.target is not None:
        Z = Z[dataset.labels == model.target]
    worst = np.zeros(len(Z))
    for m in model.machines:
        if m.train_alpha is None:
            raise FingerprintError("model has no training bookkeeping (loaded from disk?)")
        Zi = Z[m.train_index]
        f = m.decision(model.kernel_matrix(Zi, m))
        if model.mode is Mode.ONECLASS:
            g = f  # one-class: condition on f itself
        else:
            g = m.train_y * f - 1.0
        a, C = m.train_alpha, m.upper
        v = np.where(a <= 0, np.maximum(0.0, -g), np.where(a >= C, np.maximum(0.0, g), np.abs(g)))
        np.maximum.at(worst, m.train_index, v)
    return worst


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    acc: float
    tpr: float
    fpr: float
    fnr: float
    tnr: float
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float  # fraction of predictions equal to the truth

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _rate(num: int, den: int) -> float:
    return num / den if den else 0.0


def evaluate(predictions, truth, positive=None) -> EvalReport:
    """Confusion-count metrics.

    With ``positive`` set, counts are for that class against the rest.
    Otherwise per-class one-vs-rest counts are summed over all classes.
    """
    pred = list(predictions)
    true = list(truth)
    if len(pred) != len(true):
        raise FingerprintError(f"{len(pred)} predictions for {len(true)} truths")
    if not pred:
        raise FingerprintError("cannot evaluate empty input")
    classes = [positive] if positive is not None else sorted(set(true) | set(pred), key=str)
    tp = tn = fp = fn = 0
    for c in classes:
        for p, t in zip(pred, true):
            if t == c and p == c:
                tp += 1
            elif t == c:
                fn += 1
            elif p == c:
                fp += 1
            else:
                tn += 1
    tpr = _rate(tp, tp + fn)
    fpr = _rate(fp, fp + tn)
    return EvalReport(
        acc=_rate(tp + tn, tp + tn + fp + fn),
        tpr=tpr,
        fpr=fpr,
        fnr=1.0 - tpr,
        tnr=1.0 - fpr,
        tp=tp, tn=tn, fp=fp, fn=fn,
        accuracy=sum(p == t for p, t in zip(pred, true)) / len(pred),
    )


def stratified_folds(labels, k: int, seed: int = 0) -> np.ndarray:
    labels = np.asarray(labels)
    if k < 2:
        raise FingerprintError("k must be >= 2")
    classes, counts = np.unique(labels, return_counts=True)
    if k > counts.min():
        raise FingerprintError(f"k={k} exceeds the smallest class count {int(counts.min())}")
    rng = np.random.default_rng(seed)
    folds = np.empty(len(labels), dtype=int)
    offset = 0
    for c in classes:
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        folds[idx] = (np.arange(len(idx)) + offset) % k
        offset += len(idx)
    return folds


def cross_validate(dataset: Dataset, k: int = 5, mode: Mode | str = Mode.MULTI, kernel: Kernel = RBF, *,
                   seed: int = 0, folds=None, **hyper) -> float:
    """Mean fold accuracy (fraction of correctly labelled test vectors)."""
    mode = Mode(mode)
    if mode is Mode.ONECLASS:
        raise FingerprintError("cross_validate supports MULTI and BINARY modes")
    folds = stratified_folds(dataset.labels, k, seed) if folds is None else np.asarray(folds)
    scores = []
    for f in np.unique(folds):
        test = folds == f
        model = train(dataset.subset(~test), mode, kernel, **hyper)
        pred = model.predict(dataset.X[test])
        scores.append(float(np.mean(pred == dataset.labels[test])))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


def model_to_dict(model: FingerprintModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "mode": model.mode.value,
        "kernel": {"kind": model.kernel.kind, "gamma": model.gamma},
        "hyperparams": {"C": model.C, "nu": model.nu},
        "features": list(FEATURE_NAMES) if model.n_features == len(FEATURE_NAMES) else model.n_features,
        "standardizer": {"mean": model.mean.tolist(), "std": model.std.tolist(), "keep": model.keep.tolist()},
        "classes": [_plain(c) for c in model.classes],
        "target": _plain(model.target),
        "machines": [
            {
                "pos": _plain(m.pos),
                "neg": _plain(m.neg),
                "rho": m.rho,
                "dual_coef": m.dual_coef.tolist(),
                "support_vectors": m.support_vectors.tolist(),
            }
            for m in model.machines
        ],
    }


def model_from_dict(d: dict) -> FingerprintModel:
    if d.get("format") != MODEL_FORMAT:
        raise FingerprintError("not a fingerprint model document")
    if d.get("version") != MODEL_VERSION:
        raise FingerprintError(f"unsupported model version {d.get('version')}")
    st = d["standardizer"]
    k = d["kernel"]
    model = FingerprintModel(
        Mode(d["mode"]), Kernel(k["kind"], k["gamma"]), float(k["gamma"]), d["hyperparams"]["C"],
        d["hyperparams"]["nu"], np.asarray(st["mean"]), np.asarray(st["std"]), np.asarray(st["keep"], dtype=bool),
        list(d["classes"]), target=d.get("target"),
    )
    dim = int(model.keep.sum())
    for m in d["machines"]:
        sv = np.asarray(m["support_vectors"], dtype=float).reshape(-1, dim)
        model.machines.append(BinaryMachine(m["pos"], m["neg"], sv, np.asarray(m["dual_coef"]), m["rho"]))
    return model


def save_model(model: FingerprintModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path) -> FingerprintModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
