"""Synthetic glomerulus-like images: a stand-in corpus at desk scale.

Each image is a tissue-toned field with a paler round tuft in the middle and
dark elliptical nuclei drawn on top.  Classes differ in how many nuclei there
are and how they are arranged:

* ``normal``    few nuclei scattered over the tuft
* ``endo``      one dense aggregate filling the tuft centre
* ``mesangial`` several small clusters of four or more nuclei around the tuft
* ``endoMes``   a central aggregate plus peripheral clusters
* ``lesion``    (binary corpora) endo-, mesangial- or endoMes-like at random
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledImageSet, save_images
from .errors import ParameterError

BINARY_CLASSES = ("lesion", "normal")
FOUR_CLASSES = ("endo", "endoMes", "mesangial", "normal")

# ground-truth nucleus count ranges (inclusive) per layout
DEFAULT_COUNTS = {
    "normal": (4, 9),
    "endo": (16, 22),
    "mesangial": (16, 22),
    "endoMes": (26, 34),
}
LESION_THRESHOLD = 12


@dataclass(frozen=True)
class SynthSpec:
    size: int = 64
    classes: tuple[str, ...] = BINARY_CLASSES
    per_class: int = 100
    seed: int = 0
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    lesion_threshold: int = LESION_THRESHOLD
    background: tuple[float, float, float] = (0.93, 0.80, 0.86)
    tuft: tuple[float, float, float] = (0.84, 0.62, 0.74)
    nucleus: tuple[float, float, float] = (0.32, 0.20, 0.50)
    noise: float = 0.03

    def __post_init__(self):
        if self.per_class < 1 or self.size < 16:
            raise ParameterError("need per_class >= 1 and size >= 16")
        for name in self.classes:
            if name != "lesion" and name not in self.counts:
                raise ParameterError(f"no nucleus-count range for class {name!r}")
        lo, hi = self.counts["normal"]
        lesion_lo = min(self.counts[c][0] for c in ("endo", "mesangial", "endoMes"))
        if hi >= self.lesion_threshold or lesion_lo < self.lesion_threshold:
            warnings.warn(
                "normal and lesion nucleus counts overlap the lesion threshold; classes may not be learnable",
                RuntimeWarning,
                stacklevel=2,
            )

    @classmethod
    def four_class(cls, **kw) -> "SynthSpec":
        return cls(classes=FOUR_CLASSES, **kw)


@dataclass
class SynthResult:
    data: LabeledImageSet
    nucleus_counts: list[int]
    seeds: list[int]


def _draw_nuclei(canvas: np.ndarray, centres: np.ndarray, rng: np.random.Generator, spec: SynthSpec) -> None:
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    colour = np.asarray(spec.nucleus)
    for cy, cx in centres:
        ry = size * rng.uniform(0.028, 0.042)
        rx = ry * rng.uniform(0.75, 1.3)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        inside = (u / ry) ** 2 + (v / rx) ** 2 <= 1.0
        shade = colour * rng.uniform(0.85, 1.15)
        canvas[inside] = shade


def _scatter(rng, n, centre, radius):
    r = radius * np.sqrt(rng.random(n))
    phi = rng.uniform(0, 2 * np.pi, n)
    return np.stack([centre[0] + r * np.sin(phi), centre[1] + r * np.cos(phi)], axis=1)


def _layout(kind: str, count: int, rng: np.random.Generator, size: int) -> np.ndarray:
    c = np.array([size / 2.0, size / 2.0]) + rng.uniform(-0.04, 0.04, 2) * size
    tuft_r = 0.36 * size
    if kind == "normal":
        return _scatter(rng, count, c, tuft_r * 0.9)
    if kind == "endo":
        return _scatter(rng, count, c, 0.15 * size)
    if kind == "mesangial":
        n_clusters = max(1, count // 5)
        return _clusters(rng, count, n_clusters, c, tuft_r)
    if kind == "endoMes":
        central = count // 2
        core = _scatter(rng, central, c, 0.12 * size)
        rest = count - central
        return np.concatenate([core, _clusters(rng, rest, max(1, rest // 5), c, tuft_r)])
    raise ParameterError(f"unknown layout {kind!r}")


def _clusters(rng, count, n_clusters, centre, tuft_r):
    angles = rng.uniform(0, 2 * np.pi) + np.arange(n_clusters) * 2 * np.pi / n_clusters
    angles += rng.uniform(-0.3, 0.3, n_clusters)
    ring = tuft_r * rng.uniform(0.6, 0.8, n_clusters)
    heads = np.stack([centre[0] + ring * np.sin(angles), centre[1] + ring * np.cos(angles)], axis=1)
    sizes = np.full(n_clusters, count // n_clusters)
    sizes[: count % n_clusters] += 1
    pts = [_scatter(rng, s, heads[i], 0.07 * tuft_r / 0.36) for i, s in enumerate(sizes)]
    return np.concatenate(pts)


def render(kind: str, count: int, rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    """One ``(H, W, 3)`` float image in [0, 1]."""
    size = spec.size
    canvas = np.empty((size, size, 3))
    canvas[:] = spec.background
    yy, xx = np.mgrid[0:size, 0:size]
    c = size / 2.0 + rng.uniform(-0.03, 0.03, 2) * size
    r = 0.40 * size * rng.uniform(0.92, 1.05)
    tuft = (yy - c[0]) ** 2 + (xx - c[1]) ** 2 <= r * r
    canvas[tuft] = spec.tuft
    _draw_nuclei(canvas, _layout(kind, count, rng, size), rng, spec)
    canvas += rng.normal(0.0, spec.noise, canvas.shape)
    return np.clip(canvas, 0.0, 1.0)


def synth_generate(spec: SynthSpec, out_dir=None) -> SynthResult:
    """Generate ``per_class`` images per class, optionally writing a dataset directory.

    Class labels follow the sorted class-name order so the written directory
    reloads with identical labels.  Per-image seeds derive from
    ``(spec.seed, class index, image index)``.
    """
    names = sorted(spec.classes)
    images, labels, ids, counts, seeds = [], [], [], [], []
    for label, name in enumerate(names):
        for i in range(spec.per_class):
            img_seed = int(np.random.SeedSequence([spec.seed, label, i]).generate_state(1)[0])
            rng = np.random.default_rng(img_seed)
            kind = name
            if name == "lesion":
                kind = ("endo", "mesangial", "endoMes")[rng.integers(3)]
            lo, hi = spec.counts[kind]
            count = int(rng.integers(lo, hi + 1))
            pix = render(kind, count, rng, spec)
            images.append(np.round(pix * 255).astype(np.uint8))
            labels.append(label)
            ids.append(f"{name}_{i:04d}")
            counts.append(count)
            seeds.append(img_seed)
    # quantize through uint8 so in-memory data equals what a reload sees
    arr = np.stack(images).astype(np.float64).transpose(0, 3, 1, 2) / 255.0
    data = LabeledImageSet(np.ascontiguousarray(arr), np.array(labels), ids, names)
    result = SynthResult(data, counts, seeds)
    if out_dir is not None:
        write_synth(result, out_dir)
    return result


def write_synth(result: SynthResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = result.data
    renamed = LabeledImageSet(data.images, data.labels, [f"{i}.png" for i in data.ids], data.class_names)
    save_images(renamed, out)
    with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "class", "nucleus_count", "seed"])
        for sid, label, count, seed in zip(data.ids, data.labels, result.nucleus_counts, result.seeds):
            writer.writerow([sid, data.class_names[label], count, seed])
    return out


def read_manifest(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["nucleus_count"] = int(row["nucleus_count"])
        row["seed"] = int(row["seed"])
    return rows
