"""RBF support vector machines trained by sequential minimal optimization.

One quadratic solver backs both the one-vs-one classifier and the
epsilon-insensitive regressor:

    minimize   1/2 z^T Q z + p^T z
    subject to sum_k u_k z_k = 0,  0 <= z_k <= C,   Q_kl = u_k u_l K_kl

with maximal-violating-pair working-set selection and the standard
two-variable analytic update. Training stops when the duality gap proxy
m - M drops below the KKT tolerance; the bias is (m + M) / 2, which bounds
every KKT violation by tol/2.

Features are z-scored with training statistics before the kernel; gamma
defaults to 1 / dimension.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ModelError

KKT_TOL = 1e-3
MAX_SMO_ITER = 1_000_000
DEFAULT_SVC_C = 0.03125
DEFAULT_SVR_C = 0.25
DEFAULT_EPSILON = 0.1


def rbf_kernel(x, y, gamma: float) -> float:
    """exp(-gamma * ||x - y||^2) for two equal-length vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("dimension mismatch")
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    d = x - y
    return float(np.exp(-gamma * float(d @ d)))


def kernel_matrix(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    """Pairwise RBF kernel between rows of a and rows of b."""
    sq_a = np.sum(a * a, axis=1)[:, None]
    sq_b = np.sum(b * b, axis=1)[None, :]
    d2 = np.maximum(sq_a + sq_b - 2.0 * (a @ b.T), 0.0)
    return np.exp(-gamma * d2)


@dataclass
class SmoResult:
    z: np.ndarray
    bias: float
    iterations: int
    objective_trace: list[float] | None


def smo_solve(
    q: np.ndarray,
    u: np.ndarray,
    p: np.ndarray,
    c: float,
    tol: float = KKT_TOL,
    debug: bool = False,
) -> SmoResult:
    """Maximal-violating-pair SMO on the generic box/equality dual.

    The step direction is d = u_i e_i - u_j e_j, which preserves the
    equality constraint; its curvature in Q-space is
    Q_ii + Q_jj - 2 u_i u_j Q_ij.
    """
    n = u.size
    z = np.zeros(n, dtype=np.float64)
    grad = p.copy()
    trace: list[float] | None = [] if debug else None

    def objective() -> float:
        return 0.5 * float(z @ grad) + 0.5 * float(z @ p)

    for it in range(MAX_SMO_ITER):
        r = -u * grad
        up = ((u > 0) & (z < c)) | ((u < 0) & (z > 0))
        low = ((u > 0) & (z > 0)) | ((u < 0) & (z < c))
        if not up.any() or not low.any():
            break
        r_up = np.where(up, r, -np.inf)
        r_low = np.where(low, r, np.inf)
        i = int(np.argmax(r_up))
        j = int(np.argmin(r_low))
        m, mm = r[i], r[j]
        if m - mm <= tol:
            break

        a = q[i, i] + q[j, j] - 2.0 * u[i] * u[j] * q[i, j]
        t_star = (m - mm) / max(a, 1e-12)
        lim_i = c - z[i] if u[i] > 0 else z[i]
        lim_j = z[j] if u[j] > 0 else c - z[j]
        t = min(t_star, lim_i, lim_j)
        if t <= 0:
            break
        if t == lim_i:
            z[i] = c if u[i] > 0 else 0.0
        else:
            z[i] += u[i] * t
        if t == lim_j:
            z[j] = 0.0 if u[j] > 0 else c
        else:
            z[j] -= u[j] * t
        grad += t * (u[i] * q[:, i] - u[j] * q[:, j])
        if trace is not None:
            trace.append(objective())
    else:
        raise ModelError("SMO did not converge within the iteration budget")

    r = -u * grad
    up = ((u > 0) & (z < c)) | ((u < 0) & (z > 0))
    low = ((u > 0) & (z > 0)) | ((u < 0) & (z < c))
    if up.any() and low.any():
        bias = 0.5 * (float(np.max(np.where(up, r, -np.inf)))
                      + float(np.min(np.where(low, r, np.inf))))
    else:
        bias = float(r[up].max()) if up.any() else float(r[low].min())
    return SmoResult(z=z, bias=bias, iterations=it, objective_trace=trace)


@dataclass
class BinaryMachine:
    """One trained binary machine of the one-vs-one set."""

    class_pos: int
    class_neg: int
    support_vectors: np.ndarray  # standardized feature rows
    coefficients: np.ndarray  # alpha_i * y_i
    bias: float
    # full training-state (not serialized) for KKT auditing
    train_x: np.ndarray | None = field(default=None, repr=False)
    train_y: np.ndarray | None = field(default=None, repr=False)
    alphas: np.ndarray | None = field(default=None, repr=False)
    c: float = 0.0
    gamma: float = 0.0

    def decision(self, x_std: np.ndarray) -> np.ndarray:
        k = kernel_matrix(x_std, self.support_vectors, self.gamma)
        return k @ self.coefficients + self.bias

    def kkt_max_violation(self) -> float:
        """Largest violation of the stationarity conditions over training data."""
        if self.train_x is None:
            raise ModelError("KKT audit needs the in-memory trained machine")
        f = self.decision(self.train_x)
        margins = self.train_y * f
        viol = 0.0
        for a, m in zip(self.alphas, margins):
            if a <= 0:
                viol = max(viol, 1.0 - m)
            elif a >= self.c:
                viol = max(viol, m - 1.0)
            else:
                viol = max(viol, abs(m - 1.0))
        return float(viol)


@dataclass
class SvmModel:
    kind: str  # "classifier" | "regressor"
    gamma: float
    c: float
    epsilon: float | None
    feature_indices: tuple[int, ...] | None
    mean: np.ndarray
    std: np.ndarray
    classes: tuple[int, ...] = ()
    machines: list[BinaryMachine] = field(default_factory=list)
    support_vectors: np.ndarray | None = None  # regressor
    coefficients: np.ndarray | None = None
    bias: float = 0.0

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def n_features(self) -> int:
        return self.mean.shape[0]


def _validate_training_inputs(samples: np.ndarray, c: float) -> None:
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise ModelError("need a 2-D sample matrix with at least 2 rows")
    if not np.all(np.isfinite(samples)):
        raise ModelError("non-finite feature values")
    if c <= 0:
        raise ModelError("C must be > 0")


def _standardization(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = samples.mean(axis=0)
    std = samples.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def train_svc(
    samples,
    labels,
    c: float = DEFAULT_SVC_C,
    gamma: float | None = None,
    tol: float = KKT_TOL,
    debug: bool = False,
) -> SvmModel:
    """One-vs-one multiclass RBF SVM trained by SMO.

    In debug mode every pairwise machine asserts that its dual objective
    decreased monotonically over SMO iterations.
    """
    x = np.asarray(samples, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    _validate_training_inputs(x, c)
    if y.shape != (x.shape[0],):
        raise ModelError("labels must align with samples")
    classes = tuple(sorted(set(int(v) for v in y)))
    if len(classes) < 2:
        raise ModelError("need at least 2 classes")
    if gamma is None:
        gamma = 1.0 / x.shape[1]
    if gamma <= 0:
        raise ModelError("gamma must be > 0")

    mean, std = _standardization(x)
    xs = (x - mean) / std

    machines = []
    for ai in range(len(classes)):
        for bi in range(ai + 1, len(classes)):
            pos, neg = classes[ai], classes[bi]
            mask = (y == pos) | (y == neg)
            xp = xs[mask]
            yp = np.where(y[mask] == pos, 1.0, -1.0)
            kmat = kernel_matrix(xp, xp, gamma)
            q = kmat * np.outer(yp, yp)
            res = smo_solve(q, yp, -np.ones(yp.size), c, tol=tol, debug=debug)
            if debug and res.objective_trace:
                diffs = np.diff(np.asarray(res.objective_trace))
                assert np.all(diffs <= 1e-9), "dual objective increased during SMO"
            sv = res.z != 0
            machines.append(
                BinaryMachine(
                    class_pos=pos,
                    class_neg=neg,
                    support_vectors=xp[sv].copy(),
                    coefficients=(res.z * yp)[sv].copy(),
                    bias=res.bias,
                    train_x=xp,
                    train_y=yp,
                    alphas=res.z,
                    c=c,
                    gamma=gamma,
                )
            )
    return SvmModel(
        kind="classifier",
        gamma=gamma,
        c=c,
        epsilon=None,
        feature_indices=None,
        mean=mean,
        std=std,
        classes=classes,
        machines=machines,
    )


def train_svr(
    samples,
    targets,
    c: float = DEFAULT_SVR_C,
    gamma: float | None = None,
    epsilon: float = DEFAULT_EPSILON,
    tol: float = KKT_TOL,
    debug: bool = False,
) -> SvmModel:
    """Epsilon-insensitive RBF SVR via the same SMO core (2n variables)."""
    x = np.asarray(samples, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    _validate_training_inputs(x, c)
    if y.shape != (x.shape[0],) or not np.all(np.isfinite(y)):
        raise ModelError("targets must be finite and align with samples")
    if epsilon < 0:
        raise ModelError("epsilon must be >= 0")
    if gamma is None:
        gamma = 1.0 / x.shape[1]

    mean, std = _standardization(x)
    xs = (x - mean) / std
    n = xs.shape[0]
    kbase = kernel_matrix(xs, xs, gamma)
    ktil = np.tile(kbase, (2, 2))
    u = np.concatenate([np.ones(n), -np.ones(n)])
    p = np.concatenate([epsilon - y, epsilon + y])
    q = ktil * np.outer(u, u)
    res = smo_solve(q, u, p, c, tol=tol, debug=debug)
    if debug and res.objective_trace:
        diffs = np.diff(np.asarray(res.objective_trace))
        assert np.all(diffs <= 1e-9), "dual objective increased during SMO"
    beta = res.z[:n] - res.z[n:]
    sv = beta != 0
    return SvmModel(
        kind="regressor",
        gamma=gamma,
        c=c,
        epsilon=epsilon,
        feature_indices=None,
        mean=mean,
        std=std,
        support_vectors=xs[sv].copy(),
        coefficients=beta[sv].copy(),
        bias=res.bias,
    )


def decision_values(model: SvmModel, samples) -> np.ndarray:
    """Raw decision values: per-machine columns (classifier) or (n,)."""
    x = model.standardize(np.asarray(samples, dtype=np.float64))
    if model.kind == "regressor":
        k = kernel_matrix(x, model.support_vectors, model.gamma)
        return k @ model.coefficients + model.bias
    return np.column_stack([m.decision(x) for m in model.machines])


def predict(model: SvmModel, samples) -> np.ndarray:
    """Class labels (majority vote, ties to the smaller label) or values."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.n_features():
        raise ModelError(
            f"feature dimension {x.shape[1]} does not match model ({model.n_features()})"
        )
    if model.kind == "regressor":
        return decision_values(model, x)
    dec = decision_values(model, x)
    votes = np.zeros((x.shape[0], len(model.classes)), dtype=np.int64)
    class_pos = {cls: k for k, cls in enumerate(model.classes)}
    for col, machine in enumerate(model.machines):
        winner_pos = dec[:, col] >= 0
        votes[winner_pos, class_pos[machine.class_pos]] += 1
        votes[~winner_pos, class_pos[machine.class_neg]] += 1
    best = np.argmax(votes, axis=1)  # argmax takes the first (smallest) on ties
    return np.array([model.classes[b] for b in best], dtype=np.int64)


@dataclass
class CrossValResult:
    mean_score: float
    fold_scores: list[float]
    predictions: np.ndarray  # out-of-fold predictions aligned with inputs
    fold_of: np.ndarray


def cross_validate(
    samples,
    targets,
    trainer,
    metric,
    folds: int = 10,
    seed: int = 0,
) -> CrossValResult:
    """Deterministic k-fold CV: seeded shuffle, then round-robin assignment.

    `trainer(x, y) -> model` and `metric(y_true, y_pred) -> float` are
    computed per fold on the held-out samples; out-of-fold predictions are
    also pooled for metrics that are unstable on tiny folds.
    """
    x = np.asarray(samples, dtype=np.float64)
    y = np.asarray(targets)
    if folds < 2:
        raise ModelError("folds must be >= 2")
    if x.shape[0] < folds:
        raise ModelError("need at least one sample per fold")
    rng = np.random.default_rng(seed)
    order = rng.permutation(x.shape[0])
    fold_of = np.empty(x.shape[0], dtype=np.int64)
    fold_of[order] = np.arange(x.shape[0]) % folds

    preds = None
    fold_scores = []
    for k in range(folds):
        hold = fold_of == k
        model = trainer(x[~hold], y[~hold])
        yp = predict(model, x[hold])
        if preds is None:
            preds = np.empty(x.shape[0], dtype=yp.dtype)
        preds[hold] = yp
        fold_scores.append(float(metric(y[hold], yp)))
    return CrossValResult(
        mean_score=float(np.mean(fold_scores)),
        fold_scores=fold_scores,
        predictions=preds,
        fold_of=fold_of,
    )


@dataclass(frozen=True)
class SearchResult:
    indices: tuple[int, ...]
    c: float
    score: float
    table: tuple[tuple[tuple[int, ...], float, float], ...]


def feature_search(
    features,
    targets,
    candidate_sets,
    c_grid,
    metric,
    task: str = "classifier",
    folds: int = 10,
    seed: int = 0,
    epsilon: float = DEFAULT_EPSILON,
) -> SearchResult:
    """Exhaustive (subset, C) search scored by pooled out-of-fold metric.

    Ties prefer fewer features, then smaller C, then lexicographic indices.
    """
    feats = np.asarray(features, dtype=np.float64)
    candidates = [tuple(c) for c in candidate_sets]
    c_values = list(c_grid)
    if not candidates or not c_values:
        raise ModelError("need at least one candidate set and one C value")

    rows = []
    best = None
    best_key = None
    for indices in candidates:
        sub = feats[:, list(indices)]
        gamma = 1.0 / len(indices)
        for c in c_values:
            if task == "classifier":
                trainer = lambda a, b, c=c, g=gamma: train_svc(a, b, c=c, gamma=g)
            else:
                trainer = lambda a, b, c=c, g=gamma: train_svr(a, b, c=c, gamma=g, epsilon=epsilon)
            cv = cross_validate(sub, targets, trainer, metric, folds=folds, seed=seed)
            score = float(metric(np.asarray(targets), cv.predictions))
            rows.append((indices, float(c), score))
            key = (-score, len(indices), c, indices)
            if best_key is None or key < best_key:
                best_key = key
                best = (indices, float(c), score)
    return SearchResult(indices=best[0], c=best[1], score=best[2], table=tuple(rows))


MODEL_FORMAT_VERSION = 1


def model_to_json_dict(model: SvmModel) -> dict:
    doc = {
        "version": MODEL_FORMAT_VERSION,
        "kind": model.kind,
        "gamma": model.gamma,
        "C": model.c,
        "epsilon": model.epsilon,
        "feature_indices": list(model.feature_indices) if model.feature_indices else None,
        "standardization": {
            "mean": [float(v) for v in model.mean],
            "std": [float(v) for v in model.std],
        },
    }
    if model.kind == "classifier":
        doc["classes"] = list(model.classes)
        doc["machines"] = [
            {
                "class_pos": m.class_pos,
                "class_neg": m.class_neg,
                "support_vectors": [[float(v) for v in row] for row in m.support_vectors],
                "coefficients": [float(v) for v in m.coefficients],
                "bias": m.bias,
            }
            for m in model.machines
        ]
    else:
        doc["support_vectors"] = [[float(v) for v in row] for row in model.support_vectors]
        doc["coefficients"] = [float(v) for v in model.coefficients]
        doc["bias"] = model.bias
    return doc


def model_from_json_dict(doc: dict) -> SvmModel:
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ModelError(f"unsupported model version {doc.get('version')}")
    mean = np.array(doc["standardization"]["mean"], dtype=np.float64)
    std = np.array(doc["standardization"]["std"], dtype=np.float64)
    fi = doc.get("feature_indices")
    common = dict(
        gamma=float(doc["gamma"]),
        c=float(doc["C"]),
        epsilon=doc.get("epsilon"),
        feature_indices=tuple(fi) if fi else None,
        mean=mean,
        std=std,
    )
    if doc["kind"] == "classifier":
        machines = [
            BinaryMachine(
                class_pos=int(m["class_pos"]),
                class_neg=int(m["class_neg"]),
                support_vectors=np.array(m["support_vectors"], dtype=np.float64).reshape(
                    len(m["coefficients"]), mean.shape[0]
                ),
                coefficients=np.array(m["coefficients"], dtype=np.float64),
                bias=float(m["bias"]),
                gamma=float(doc["gamma"]),
                c=float(doc["C"]),
            )
            for m in doc["machines"]
        ]
        return SvmModel(kind="classifier", classes=tuple(doc["classes"]),
                        machines=machines, **common)
    if doc["kind"] == "regressor":
        return SvmModel(
            kind="regressor",
            support_vectors=np.array(doc["support_vectors"], dtype=np.float64).reshape(
                len(doc["coefficients"]), mean.shape[0]
            ),
            coefficients=np.array(doc["coefficients"], dtype=np.float64),
            bias=float(doc["bias"]),
            **common,
        )
    raise ModelError(f"unknown model kind {doc['kind']!r}")


def save_model(model: SvmModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_json_dict(model), sort_keys=True) + "\n")


def load_model(path) -> SvmModel:
    return model_from_json_dict(json.loads(Path(path).read_text()))
