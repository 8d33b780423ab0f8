"""Image ingestion, preprocessing, augmentation and K-fold planning."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, FormatError, ParameterError, PlanError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
INPUT_SIZE = 224


@dataclass
class LabeledImageSet:
    """Images ``(N, 3, H, W)`` in [0, 1] with labels and provenance.

    ``origins`` names the original sample each row derives from (itself for
    originals); ``augmented`` flags transformed copies.
    """

    images: np.ndarray
    labels: np.ndarray
    ids: list[str]
    class_names: list[str]
    origins: list[str] = field(default_factory=list)
    augmented: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = list(self.ids)
        if not self.origins:
            self.origins = list(self.ids)
        if self.augmented is None:
            self.augmented = np.zeros(len(self.ids), dtype=bool)
        n = len(self.ids)
        if not (len(self.images) == len(self.labels) == len(self.origins) == len(self.augmented) == n):
            raise DataError("images, labels, ids and provenance must have equal length")
        if len(set(self.ids)) != n:
            raise DataError("sample ids must be unique")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError(f"labels must lie in [0, {len(self.class_names)})")

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, indices) -> "LabeledImageSet":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(
            self.images[idx],
            self.labels[idx],
            [self.ids[i] for i in idx],
            list(self.class_names),
            [self.origins[i] for i in idx],
            self.augmented[idx],
        )

    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=len(self.class_names))
        return {name: int(c) for name, c in zip(self.class_names, counts)}


# -- preprocessing -----------------------------------------------------------
def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of ``(H, W, C)``; identity at equal size."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis_weights(h, out_h)
    c0, c1, fc = axis_weights(w, out_w)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bottom = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr


def preprocess(image, size: int = INPUT_SIZE, standardize: bool = False) -> np.ndarray:
    """Decoded pixels -> float ``(3, size, size)`` in [0, 1].

    Accepts ``(H, W)`` grayscale, ``(H, W, 1|3)`` uint8/float pixels, or an
    already conforming ``(3, size, size)`` float tensor, which is returned
    unchanged.
    """
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape == (3, size, size) and arr.dtype.kind == "f":
        out = arr.astype(np.float64, copy=True)
        return _standardize(out) if standardize else out
    if arr.size == 0:
        raise FormatError("image has no pixels")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise FormatError(f"cannot interpret pixel array of shape {arr.shape}")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    elif arr.shape[2] != 3:
        raise FormatError(f"expected RGB or grayscale pixels, got {arr.shape[2]} channels")
    if arr.dtype.kind in "ui":
        pix = arr.astype(np.float64) / 255.0
    else:
        pix = arr.astype(np.float64)
    out = np.clip(resize_bilinear(pix, size, size), 0.0, 1.0).transpose(2, 0, 1)
    out = np.ascontiguousarray(out)
    return _standardize(out) if standardize else out


def _standardize(t: np.ndarray) -> np.ndarray:
    mu = t.mean(axis=(1, 2), keepdims=True)
    sd = t.std(axis=(1, 2), keepdims=True)
    return (t - mu) / np.where(sd > 0, sd, 1.0)


def _decode(path: Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "I;16", "I", "F"):
                arr = np.asarray(im.convert("L"))
            elif im.mode == "RGB":
                arr = np.asarray(im)
            elif im.mode == "P":
                arr = np.asarray(im.convert("RGB"))
            else:
                raise FormatError(f"{path}: unsupported image mode {im.mode}")
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr


def load_dataset(root, size: int = INPUT_SIZE) -> LabeledImageSet:
    """Read ``root/<class_name>/*.png|*.jpg``; classes and files in sorted order."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"{root} contains no class directories")
    images, labels, ids = [], [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"class directory {cdir} holds no images")
        for path in files:
            images.append(preprocess(_decode(path), size))
            labels.append(label)
            ids.append(f"{cdir.name}/{path.name}")
    return LabeledImageSet(np.stack(images), np.array(labels), ids, [p.name for p in class_dirs])


# -- augmentation ------------------------------------------------------------
@dataclass(frozen=True)
class AugmentSpec:
    rotation: float = 20.0  # degrees, uniform in [-rotation, rotation]
    flip_prob: float = 0.5
    zoom: tuple[float, float] = (0.9, 1.1)
    shift: float = 0.1  # fraction of height/width
    seed: int = 0

    def __post_init__(self):
        if self.rotation < 0 or self.shift < 0:
            raise ParameterError("rotation and shift ranges must be non-negative")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ParameterError("flip probability must lie in [0, 1]")
        lo, hi = self.zoom
        if lo <= 0 or hi < lo:
            raise ParameterError(f"zoom range must satisfy 0 < lo <= hi, got {self.zoom}")


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def random_transform(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """One random rotation/flip/zoom/shift of a ``(C, H, W)`` image."""
    angle = rng.uniform(-spec.rotation, spec.rotation) if spec.rotation else 0.0
    flip = rng.random() < spec.flip_prob
    zoom = rng.uniform(*spec.zoom) if spec.zoom[0] != spec.zoom[1] else spec.zoom[0]
    _, h, w = image.shape
    dy = rng.uniform(-spec.shift, spec.shift) * h if spec.shift else 0.0
    dx = rng.uniform(-spec.shift, spec.shift) * w if spec.shift else 0.0
    out = hflip(image) if flip else image.copy()
    if angle == 0.0 and zoom == 1.0 and dx == 0.0 and dy == 0.0:
        return out
    theta = np.deg2rad(angle)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    matrix = rot / zoom  # output coords -> input coords
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - matrix @ (centre + np.array([dy, dx]))
    for ch in range(out.shape[0]):
        out[ch] = ndimage.affine_transform(out[ch], matrix, offset=offset, order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def augment(data: LabeledImageSet, spec: AugmentSpec) -> LabeledImageSet:
    """Originals followed by exactly one transformed copy of each (|out| = 2|in|)."""
    rng = np.random.default_rng(spec.seed)
    copies = np.stack([random_transform(img, spec, rng) for img in data.images]) if len(data) else data.images
    return LabeledImageSet(
        np.concatenate([data.images, copies]).astype(data.images.dtype, copy=False),
        np.concatenate([data.labels, data.labels]),
        data.ids + [f"{i}#aug" for i in data.ids],
        list(data.class_names),
        data.origins + list(data.origins),
        np.concatenate([data.augmented, np.ones(len(data), dtype=bool)]),
    )


# -- fold planning ---------------------------------------------------------------
@dataclass
class FoldPlan:
    n: int
    k: int
    seed: int
    folds: list[list[int]]

    def __post_init__(self):
        flat = sorted(i for fold in self.folds for i in fold)
        if len(self.folds) != self.k or flat != list(range(self.n)):
            raise PlanError(f"folds do not partition range({self.n}) into {self.k} parts")

    def validation(self, fold: int) -> np.ndarray:
        return np.asarray(self.folds[fold], dtype=np.int64)

    def training(self, fold: int) -> np.ndarray:
        return np.asarray(sorted(i for j, f in enumerate(self.folds) if j != fold for i in f), dtype=np.int64)

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "K": self.k, "seed": self.seed, "folds": self.folds})

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        return cls(d["n"], d["K"], d["seed"], [list(map(int, f)) for f in d["folds"]])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def kfold_split(n: int, k: int, seed: int = 0, labels=None) -> FoldPlan:
    """Shuffle ``range(n)`` and deal it into ``k`` folds.

    With ``labels`` the shuffled indices are grouped class by class before
    dealing, so every fold holds within one sample of each class's
    proportional share and fold sizes differ by at most one.
    """
    if k < 2:
        raise ParameterError(f"K must be at least 2, got {k}")
    if n < k:
        raise ParameterError(f"cannot split {n} samples into {k} folds")
    rng = np.random.default_rng(seed)
    if labels is None:
        order = rng.permutation(n)
    else:
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ParameterError(f"expected {n} labels, got shape {labels.shape}")
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)])
    folds = [sorted(int(i) for i in order[j::k]) for j in range(k)]
    return FoldPlan(n, k, seed, folds)


SPLIT_TO_K = {"90/10": 10, "80/20": 5, "67/33": 3, "50/50": 2}
K_TO_SPLIT = {v: s for s, v in SPLIT_TO_K.items()}


def split_to_k(split) -> int:
    """Map a train/validation split label (``"90/10"``) or fold count to K."""
    if isinstance(split, int) or str(split).isdigit():
        return int(split)
    try:
        return SPLIT_TO_K[str(split)]
    except KeyError:
        raise ParameterError(f"unknown split {split!r}; choose one of {sorted(SPLIT_TO_K)}") from None


def save_images(data: LabeledImageSet, root) -> None:
    """Write ``data`` as PNGs under ``root/<class>/``; ids provide filenames."""
    from PIL import Image

    root = Path(root)
    for img, label, sid in zip(data.images, data.labels, data.ids):
        cdir = root / data.class_names[label]
        cdir.mkdir(parents=True, exist_ok=True)
        name = os.path.basename(sid)
        if not name.lower().endswith(IMAGE_SUFFIXES):
            name += ".png"
        pix = np.round(np.clip(img.transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)
        Image.fromarray(pix).save(cdir / name)
