"""Kernel support-vector machines trained by SMO, with one-vs-all composition.

The solver works on the standard dual

    min_a  1/2 a^T Q a - sum(a)    s.t.  0 <= a_i <= C,  sum(a_i y_i) = 0,

with ``Q_ij = y_i y_j K(x_i, x_j)``, picking the maximal-violating pair at each
step.  Non-PSD kernels (sigmoid) get the usual small positive curvature floor
so the two-variable step stays bounded.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .binfmt import read_container, write_container
from .errors import ConvergenceError, DataError, DimensionError, FormatError, ParameterError

KERNELS = ("linear", "rbf", "polynomial", "sigmoid")
_TAU = 1e-12
MAGIC = b"GSVM"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "linear"
    gamma: float | None = None  # None: resolved to 1/n_features at fit time
    degree: int | None = None
    coef0: float | None = None

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ParameterError(f"unknown kernel {self.kind!r}; choose from {KERNELS}")
        uses_gamma = self.kind != "linear"
        uses_coef0 = self.kind in ("polynomial", "sigmoid")
        if not uses_gamma and self.gamma is not None:
            raise ParameterError("gamma does not apply to the linear kernel")
        if not uses_coef0 and self.coef0 is not None:
            raise ParameterError(f"coef0 does not apply to the {self.kind} kernel")
        if self.kind != "polynomial" and self.degree is not None:
            raise ParameterError(f"degree does not apply to the {self.kind} kernel")
        if self.gamma is not None and not self.gamma > 0:
            raise ParameterError(f"gamma must be positive, got {self.gamma}")
        if self.kind == "polynomial":
            if self.degree is None:
                object.__setattr__(self, "degree", 3)
            if int(self.degree) != self.degree or self.degree < 1:
                raise ParameterError(f"degree must be a positive integer, got {self.degree}")
            object.__setattr__(self, "degree", int(self.degree))
        if uses_coef0 and self.coef0 is None:
            object.__setattr__(self, "coef0", 0.0)

    def resolved(self, n_features: int) -> "KernelSpec":
        if self.kind == "linear" or self.gamma is not None:
            return self
        return replace(self, gamma=1.0 / n_features)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for name in ("gamma", "degree", "coef0"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(d["kind"], d.get("gamma"), d.get("degree"), d.get("coef0"))

    def label(self) -> str:
        params = {k: v for k, v in self.to_dict().items() if k != "kind"}
        return self.kind + ("" if not params else " " + json.dumps(params, sort_keys=True))


def gram(spec: KernelSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kernel matrix ``K[i, j] = N(a_i, b_j)``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    spec = spec.resolved(a.shape[1])
    dot = a @ b.T
    if spec.kind == "linear":
        return dot
    if spec.kind == "rbf":
        sq = np.einsum("ij,ij->i", a, a)[:, None] + np.einsum("ij,ij->i", b, b)[None, :] - 2.0 * dot
        return np.exp(-spec.gamma * np.maximum(sq, 0.0))
    if spec.kind == "polynomial":
        return (spec.gamma * dot + spec.coef0) ** spec.degree
    return np.tanh(spec.gamma * dot + spec.coef0)


def kernel_eval(spec: KernelSpec, x, y) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise DimensionError(f"kernel arguments differ in length: {x.size} vs {y.size}")
    if spec.kind == "rbf":
        # direct difference keeps N(x, x) exactly 1
        d = x - y
        return float(np.exp(-spec.resolved(x.size).gamma * (d @ d)))
    return float(gram(spec, x[None], y[None])[0, 0])


@dataclass(frozen=True, eq=False)
class SvmModel:
    support_vectors: np.ndarray  # (v, D)
    labels: np.ndarray  # (v,) in {-1, +1}
    alphas: np.ndarray  # (v,) in (0, C]
    bias: float
    kernel: KernelSpec
    C: float
    support_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    iterations: int = 0
    violation: float = 0.0

    @property
    def n_support(self) -> int:
        return len(self.alphas)

    @property
    def dim(self) -> int:
        return self.support_vectors.shape[1]

    def decision(self, X) -> np.ndarray:
        """Margins for each row of ``X`` (a single row gives a 1-element array)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise DimensionError(f"model expects {self.dim} features, got {X.shape[1]}")
        if self.n_support == 0:
            return np.full(len(X), self.bias)
        return gram(self.kernel, X, self.support_vectors) @ (self.alphas * self.labels) + self.bias

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision(X) >= 0, 1, -1)

    def negated(self) -> "SvmModel":
        """The machine for the mirrored labelling (same dual solution, opposite sign)."""
        return replace(self, labels=-self.labels, bias=-self.bias)


def decision(model: SvmModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"decision takes one feature row, got shape {x.shape}")
    return float(model.decision(x[None])[0])


def predict(model: SvmModel, x) -> int:
    """Sign of the decision value; an exact zero counts as +1."""
    return 1 if decision(model, x) >= 0 else -1


@numba.njit(cache=True, nogil=True)
def _smo_loop(K, y, C, tol, max_iter, alpha, G):
    n = len(y)
    it = 0
    gap = np.inf
    while it < max_iter:
        gmax, gmin = -np.inf, np.inf
        i, j = -1, -1
        for t in range(n):
            v = -y[t] * G[t]
            if (y[t] > 0 and alpha[t] < C) or (y[t] < 0 and alpha[t] > 0):
                if v > gmax:
                    gmax, i = v, t
            if (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C):
                if v < gmin:
                    gmin, j = v, t
        gap = gmax - gmin
        if i < 0 or j < 0 or gap < tol:
            break
        it += 1
        ai, aj = alpha[i], alpha[j]
        kii, kjj, kij = K[i, i], K[j, j], K[i, j]
        quad = kii + kjj - 2.0 * kij
        if quad <= 0:
            quad = _TAU
        if y[i] != y[j]:
            delta = (-G[i] - G[j]) / quad
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            else:
                if ni < 0:
                    ni, nj = 0.0, -diff
            if diff > 0:
                if ni > C:
                    ni, nj = C, C - diff
            else:
                if nj > C:
                    nj, ni = C, C + diff
        else:
            delta = (G[i] - G[j]) / quad
            total = ai + aj
            ni, nj = ai - delta, aj + delta
            if total > C:
                if ni > C:
                    ni, nj = C, total - C
                if nj > C:
                    nj, ni = C, total - C
            else:
                if nj < 0:
                    nj, ni = 0.0, total
                if ni < 0:
                    ni, nj = 0.0, total
        di, dj = ni - ai, nj - aj
        alpha[i], alpha[j] = ni, nj
        yi, yj = y[i], y[j]
        for t in range(n):
            G[t] += y[t] * (yi * K[t, i] * di + yj * K[t, j] * dj)
    return it, gap


def _bias(y, alpha, G, C) -> float:
    score = -y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        return float(score[free].mean())
    up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
    low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
    hi = score[up].max() if up.any() else 0.0
    lo = score[low].min() if low.any() else 0.0
    return float((hi + lo) / 2.0)


def dual_objective(K: np.ndarray, y: np.ndarray, alpha: np.ndarray) -> float:
    ay = alpha * y
    return float(0.5 * ay @ K @ ay - alpha.sum())


def smo_fit(
    X,
    y,
    kernel: KernelSpec = KernelSpec(),
    C: float = 1.0,
    tol: float = 1e-3,
    max_passes: int | None = None,
    gram_matrix: np.ndarray | None = None,
) -> SvmModel:
    """Fit a binary machine on ``y`` in {-1, +1}.

    ``max_passes`` counts sweeps of ``n`` pair updates (default ``10 * n``).
    ``gram_matrix`` may supply a precomputed ``K(X, X)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y).reshape(-1)
    n = len(y)
    if X.shape[0] != n:
        raise DimensionError(f"{X.shape[0]} rows but {n} labels")
    if not np.all(np.isin(y, (-1, 1))):
        raise DataError("binary labels must be -1 or +1")
    if not (np.any(y == 1) and np.any(y == -1)):
        raise DataError("smo_fit needs at least one sample of each sign")
    if not C > 0:
        raise ParameterError(f"C must be positive, got {C}")
    kernel = kernel.resolved(X.shape[1])
    K = gram(kernel, X, X) if gram_matrix is None else np.asarray(gram_matrix, dtype=np.float64)
    if K.shape != (n, n):
        raise DimensionError(f"Gram matrix shape {K.shape} does not match {n} samples")
    yf = y.astype(np.float64)
    alpha = np.zeros(n)
    G = -np.ones(n)
    passes = 10 * n if max_passes is None else max_passes
    iters, gap = _smo_loop(K, yf, float(C), float(tol), int(passes) * n, alpha, G)
    keep = np.flatnonzero(alpha > 0)
    model = SvmModel(
        support_vectors=X[keep].copy(),
        labels=y[keep].astype(np.int64),
        alphas=alpha[keep].copy(),
        bias=_bias(yf, alpha, G, C),
        kernel=kernel,
        C=float(C),
        support_indices=keep,
        iterations=int(iters),
        violation=float(max(gap, 0.0)),
    )
    if gap >= tol:
        raise ConvergenceError(
            f"SMO stopped after {iters} updates with KKT violation {gap:.3g} >= tol {tol}", violation=gap, model=model
        )
    return model


@dataclass(frozen=True, eq=False)
class OvaModel:
    classes: tuple  # class labels in vocabulary order
    machines: tuple  # one SvmModel per class
    class_names: tuple = ()

    def __post_init__(self):
        if len(self.classes) != len(self.machines):
            raise DataError("one machine per class is required")
        if len({m.dim for m in self.machines}) > 1:
            raise DimensionError("machines disagree on feature dimensionality")

    @property
    def kernel(self) -> KernelSpec:
        return self.machines[0].kernel

    @property
    def C(self) -> float:
        return self.machines[0].C

    def decision_matrix(self, X) -> np.ndarray:
        return np.stack([m.decision(X) for m in self.machines], axis=1)

    def predict(self, X) -> np.ndarray:
        """Arg-max over machines; ``np.argmax`` resolves ties to the lowest index."""
        return np.asarray(self.classes)[np.argmax(self.decision_matrix(X), axis=1)]


def ova_fit(
    X,
    labels,
    kernel: KernelSpec = KernelSpec(),
    C: float = 1.0,
    tol: float = 1e-3,
    max_passes: int | None = None,
    classes=None,
    gram_matrix: np.ndarray | None = None,
    class_names=(),
    tolerate_nonconvergence: bool = False,
) -> OvaModel:
    """Train one machine per class (that class +1, the rest -1).

    With two classes the second problem is the first with flipped labels, so
    its solution is derived exactly instead of re-solved.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    labels = np.asarray(labels).reshape(-1)
    classes = tuple(sorted(set(labels.tolist()))) if classes is None else tuple(classes)
    if len(classes) < 2:
        raise DataError(f"one-vs-all needs at least two classes, got {len(classes)}")
    missing = [c for c in classes if not np.any(labels == c)]
    if missing:
        raise DataError(f"classes without samples: {missing}")
    kernel = kernel.resolved(X.shape[1])
    K = gram(kernel, X, X) if gram_matrix is None else gram_matrix

    def fit_one(c):
        y = np.where(labels == c, 1, -1)
        try:
            return smo_fit(X, y, kernel, C, tol, max_passes, gram_matrix=K)
        except ConvergenceError as exc:
            if tolerate_nonconvergence:
                return exc.model
            raise

    if len(classes) == 2:
        second = fit_one(classes[1])
        machines = (second.negated(), second)
    else:
        machines = tuple(fit_one(c) for c in classes)
    return OvaModel(classes, machines, tuple(class_names))


def ova_predict(model: OvaModel, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"ova_predict takes one feature row, got shape {x.shape}")
    return model.predict(x[None])[0]


# serialization ---------------------------------------------------------------


def _pack_machine(m: SvmModel) -> tuple[dict, bytes]:
    arrays = [m.support_vectors, m.labels.astype("<f8"), m.alphas, np.array([m.bias])]
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    meta = {
        "n_support": m.n_support,
        "dim": m.dim,
        "C": m.C,
        "kernel": m.kernel.to_dict(),
        "iterations": m.iterations,
        "violation": m.violation,
        "support_indices": [int(i) for i in m.support_indices],
        "nbytes": len(blob),
    }
    return meta, blob


def _unpack_machine(meta: dict, blob: bytes) -> SvmModel:
    v, d = meta["n_support"], meta["dim"]
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    if flat.size != v * d + 2 * v + 1:
        raise FormatError(f"machine payload holds {flat.size} values, expected {v * d + 2 * v + 1}")
    sv = flat[: v * d].reshape(v, d).copy()
    labels = flat[v * d : v * d + v].astype(np.int64)
    alphas = flat[v * d + v : v * d + 2 * v].copy()
    return SvmModel(
        sv,
        labels,
        alphas,
        float(flat[-1]),
        KernelSpec.from_dict(meta["kernel"]),
        float(meta["C"]),
        np.array(meta["support_indices"], dtype=np.int64),
        int(meta["iterations"]),
        float(meta["violation"]),
    )


def save_svm(model: SvmModel | OvaModel, path) -> None:
    """Write a machine (or a one-vs-all ensemble) as header JSON plus float64 LE arrays."""
    machines = model.machines if isinstance(model, OvaModel) else (model,)
    metas, blobs = zip(*(_pack_machine(m) for m in machines))
    header = {"type": "ova" if isinstance(model, OvaModel) else "binary", "machines": list(metas)}
    if isinstance(model, OvaModel):
        header["classes"] = [c.item() if hasattr(c, "item") else c for c in model.classes]
        header["class_names"] = list(model.class_names)
    payload = b"".join(blobs)
    header["payload_bytes"] = len(payload)
    write_container(path, MAGIC, FORMAT_VERSION, header, payload)


def load_svm(path) -> SvmModel | OvaModel:
    _, header, payload = read_container(path, MAGIC, FORMAT_VERSION)
    try:
        metas = header["machines"]
        machines, offset = [], 0
        for meta in metas:
            machines.append(_unpack_machine(meta, payload[offset : offset + meta["nbytes"]]))
            offset += meta["nbytes"]
        if header["type"] == "binary":
            return machines[0]
        return OvaModel(tuple(header["classes"]), tuple(machines), tuple(header.get("class_names", ())))
    except (KeyError, TypeError, struct.error) as exc:
        raise FormatError(f"{path}: malformed SVM header ({exc})") from exc
