"""Exact t-SNE for small feature sets, with CSV/SVG scatter output."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import CalibrationError, DimensionError, NumericError, ParameterError


@dataclass
class AffinityMatrix:
    P: np.ndarray
    perplexity: float
    sigmas: np.ndarray
    entropies: np.ndarray  # row-conditional entropies in bits
    uniform_rows: np.ndarray  # rows equidistant from all others (bandwidth irrelevant)


@dataclass
class Embedding:
    Y: np.ndarray
    kl: float
    kl_initial: float
    iterations: int
    seed: int
    kl_history: list[float] = field(default_factory=list)


def squared_distances(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    sq = np.einsum("ij,ij->i", X, X)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def _row_distribution(d: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    """Conditional distribution for one row (diagonal removed) and its entropy in bits."""
    shifted = d - d.min()
    e = np.exp(-beta * shifted)
    s = e.sum()
    p = e / s
    h = np.log(s) + beta * (shifted @ p)
    return p, h / np.log(2.0)


def perplexity_calibrate(D2, perplexity: float = 30.0, tol: float = 1e-5, max_steps: int = 200) -> AffinityMatrix:
    """Per-row bandwidth search so each conditional has ``log2(perplexity)`` bits of entropy."""
    D2 = np.asarray(D2, dtype=np.float64)
    n = D2.shape[0]
    if D2.shape != (n, n):
        raise DimensionError(f"distance matrix must be square, got {D2.shape}")
    if n < 4:
        raise ParameterError(f"t-SNE needs at least 4 points, got {n}")
    if not 1.0 <= perplexity < n:
        raise ParameterError(f"perplexity must lie in [1, {n}), got {perplexity}")
    target = np.log2(perplexity)
    cond = np.zeros((n, n))
    betas = np.zeros(n)
    entropies = np.zeros(n)
    uniform = np.zeros(n, dtype=bool)
    for i in range(n):
        d = np.delete(D2[i], i)
        spread = d.max() - d.min()
        if spread <= 1e-12 * max(1.0, d.max()):
            # every bandwidth gives the same uniform row
            p, h = np.full(n - 1, 1.0 / (n - 1)), np.log2(n - 1)
            beta, uniform[i] = np.nan, True
        else:
            beta, lo, hi = 1.0 / spread, 0.0, np.inf
            for _ in range(max_steps):
                p, h = _row_distribution(d, beta)
                if abs(h - target) < tol:
                    break
                if h > target:
                    lo = beta
                    beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
                else:
                    hi = beta
                    beta = (beta + lo) / 2.0
            else:
                raise CalibrationError(f"row {i}: entropy {h:.6f} bits after {max_steps} steps, target {target:.6f}")
        cond[i, np.arange(n) != i] = p
        betas[i], entropies[i] = beta, h
    P = (cond + cond.T) / (2.0 * n)
    with np.errstate(divide="ignore", invalid="ignore"):
        sigmas = np.sqrt(1.0 / (2.0 * betas))
    return AffinityMatrix(P, float(perplexity), sigmas, entropies, uniform)


def _student_t(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    return num, num / num.sum()


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    _, Q = _student_t(Y)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))


def kl_gradient(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """d KL(P||Q) / dY = 4 sum_j (p_ij - q_ij)(1 + |y_i - y_j|^2)^-1 (y_i - y_j)."""
    num, Q = _student_t(Y)
    W = (P - Q) * num
    return 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    min_gain: float = 0.01
    init_scale: float = 1e-4
    seed: int = 0


def tsne_optimize(P, config: TsneConfig = TsneConfig(), init: np.ndarray | None = None, dims: int = 2) -> Embedding:
    """Momentum gradient descent with per-coordinate gains and early exaggeration."""
    P = P.P if isinstance(P, AffinityMatrix) else np.asarray(P, dtype=np.float64)
    n = P.shape[0]
    rng = np.random.default_rng(config.seed)
    Y = rng.normal(0.0, 1.0, (n, dims)) * config.init_scale if init is None else np.array(init, dtype=np.float64)
    if Y.shape != (n, dims):
        raise DimensionError(f"initial embedding must be ({n}, {dims}), got {Y.shape}")
    kl0 = kl_divergence(P, Y)
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    history = []
    for it in range(config.iterations):
        scale = config.exaggeration if it < config.exaggeration_iters else 1.0
        mom = config.momentum if it < config.momentum_switch else config.final_momentum
        grad = kl_gradient(P * scale, Y)
        grow = np.sign(grad) != np.sign(update)
        gains = np.where(grow, gains + 0.2, gains * 0.8)
        np.maximum(gains, config.min_gain, out=gains)
        update = mom * update - config.learning_rate * gains * grad
        Y = Y + update
        Y -= Y.mean(axis=0)
        if not np.all(np.isfinite(Y)):
            raise NumericError(f"t-SNE coordinates became non-finite at iteration {it}")
        if (it + 1) % 50 == 0:
            history.append(kl_divergence(P, Y))
    return Embedding(Y, kl_divergence(P, Y), kl0, config.iterations, config.seed, history)


def tsne(X, config: TsneConfig = TsneConfig()) -> tuple[Embedding, AffinityMatrix]:
    aff = perplexity_calibrate(squared_distances(X), config.perplexity)
    return tsne_optimize(aff, config), aff


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def emit_scatter(embedding, labels, destination, ids=None, class_names=None, stem: str = "tsne") -> dict[str, Path]:
    """Write ``<stem>.csv`` (id,x,y,label) and a self-contained ``<stem>.svg``."""
    Y = embedding.Y if isinstance(embedding, Embedding) else np.asarray(embedding)
    labels = np.asarray(labels)
    if len(labels) != len(Y):
        raise DimensionError(f"{len(labels)} labels for {len(Y)} embedded points")
    ids = [str(i) for i in range(len(Y))] if ids is None else list(ids)
    names = class_names if class_names is not None else [str(c) for c in sorted(set(labels.tolist()))]
    lab_name = (lambda v: names[int(v)]) if class_names is not None else str
    out = Path(destination)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = out / f"{stem}.csv", out / f"{stem}.svg"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "label"])
        for sid, (x, y), lab in zip(ids, Y, labels):
            w.writerow([sid, repr(float(x)), repr(float(y)), lab_name(lab)])
    svg_path.write_text(_svg(Y, [lab_name(v) for v in labels], names), encoding="utf-8")
    return {"csv": csv_path, "svg": svg_path}


def _svg(Y: np.ndarray, labels: list[str], names: list[str], size: int = 480, pad: int = 24) -> str:
    lo, hi = Y.min(axis=0), Y.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pts = pad + (Y - lo) / span * (size - 2 * pad)
    colour = {name: PALETTE[i % len(PALETTE)] for i, name in enumerate(names)}
    legend_w = 140
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + legend_w}" height="{size}" '
        f'viewBox="0 0 {size + legend_w} {size}">',
        f'<rect width="{size + legend_w}" height="{size}" fill="white"/>',
    ]
    for (x, y), lab in zip(pts, labels):
        parts.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="3" fill="{colour[lab]}" fill-opacity="0.8"/>')
    for i, name in enumerate(names):
        y = pad + 18 * i
        parts.append(f'<rect x="{size + 8}" y="{y - 9}" width="10" height="10" fill="{colour[name]}"/>')
        parts.append(f'<text x="{size + 24}" y="{y}" font-family="sans-serif" font-size="12">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cluster_purity(Y: np.ndarray, labels) -> float:
    """Fraction of points whose nearest class centroid (in embedding space) is their own class."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    cents = np.stack([Y[labels == c].mean(axis=0) for c in classes])
    nearest = classes[np.argmin(((Y[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)]
    return float(np.mean(nearest == labels))
