"""Dataset ingestion, synthetic multi-instance scenes and distance transforms."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

IMAGE_SUFFIXES = (".png", ".pgm")


class DataError(IOError):
    """A dataset folder is malformed."""


@dataclass
class Sample:
    """Grayscale image in [0, 1] with its binary mask.

    ``pad`` holds ``((top, bottom), (left, right))`` so that outputs can be
    cropped back to the original size.
    """

    X: np.ndarray
    Ygt: np.ndarray
    id: str
    instances: np.ndarray | None = None
    pad: tuple = ((0, 0), (0, 0))

    def __post_init__(self):
        if self.X.shape != self.Ygt.shape:
            raise DataError(f"sample {self.id}: image {self.X.shape} and mask {self.Ygt.shape} differ")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for synthetic multi-instance scenes.

    Instances are disks, axis-aligned rectangles or unions of one of each
    (``shapes`` picks the families).  Their pairwise city-block distance
    exceeds ``min_gap`` pixels, so they never merge under 8-connectivity.
    ``gradient`` adds a linear illumination ramp in a random direction; its
    peak-to-peak amplitude is ``2 * gradient_strength`` along an image axis
    and up to ``2 * sqrt(2) * gradient_strength`` along a diagonal.
    """

    size: int = 64
    count: tuple[int, int] = (1, 4)
    shapes: tuple[str, ...] = ("disk", "rect")
    fg: tuple[float, float] = (0.55, 0.85)
    bg: tuple[float, float] = (0.15, 0.4)
    noise: float = 0.05
    gradient: bool = True
    gradient_strength: float = 0.25
    disk_radius: tuple[int, int] = (5, 11)
    rect_side: tuple[int, int] = (8, 20)
    min_gap: int = 3
    seed: int = 0


# -- padding ------------------------------------------------------------------

def pad_to_multiple(x: np.ndarray, multiple: int, mode: str = "reflect"):
    """Pad the last two axes up to a multiple; returns ``(padded, pad)``."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    pad = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
    if not (ph or pw):
        return x, pad
    width = [(0, 0)] * (x.ndim - 2) + list(pad)
    if mode == "reflect" and (ph >= h or pw >= w):
        mode = "symmetric"
    return np.pad(x, width, mode=mode), pad


def unpad(x: np.ndarray, pad) -> np.ndarray:
    (t, b), (l, r) = pad
    h, w = x.shape[-2:]
    return x[..., t:h - b, l:w - r]


def pad_sample(s: Sample, multiple: int) -> Sample:
    X, pad = pad_to_multiple(s.X, multiple)
    Y, _ = pad_to_multiple(s.Ygt, multiple)
    inst = None if s.instances is None else pad_to_multiple(s.instances, multiple, mode="constant")[0]
    return Sample(X, Y, s.id, inst, pad)


# -- folder I/O ---------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """8-bit grayscale or RGB raster -> float64 in [0, 1] (Rec. 601 luminance)."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint16:
        arr = arr / 65535.0
    else:
        arr = arr.astype(np.float64) / 255.0
    if arr.ndim == 3:
        arr = arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114
    return arr


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def write_image(path, x: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.round(x * 255), 0, 255).astype(np.uint8)).save(path)


def write_mask(path, m: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(m) > 0).astype(np.uint8) * 255).save(path)


def _list_rasters(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_folder(root) -> list[Sample]:
    """Load ``root/images`` + ``root/masks`` pairs (matching stems), sorted by name."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    for d in (img_dir, mask_dir):
        if not d.is_dir():
            raise DataError(f"missing directory {d}")
    images, masks = _list_rasters(img_dir), _list_rasters(mask_dir)
    orphans = sorted(set(images) ^ set(masks))
    if orphans:
        raise DataError(f"images and masks do not pair up; orphans: {', '.join(orphans)}")
    out = []
    for stem in sorted(images):
        X = read_image(images[stem])
        Y = read_mask(masks[stem])
        if X.shape != Y.shape:
            raise DataError(f"{images[stem].name}: image {X.shape} and mask {Y.shape} differ in size")
        out.append(Sample(X, Y, stem))
    return out


def write_folder(samples, root, split: dict | None = None):
    root = Path(root)
    for s in samples:
        write_image(root / "images" / f"{s.id}.png", s.X)
        write_mask(root / "masks" / f"{s.id}.png", s.Ygt)
    if split is not None:
        (root / "split.json").write_text(json.dumps(split, indent=1))


def read_split_file(root) -> dict | None:
    path = Path(root) / "split.json"
    if not path.exists():
        return None
    return json.loads(path.read_text())


# -- synthetic scenes ---------------------------------------------------------

def _shape_mask(kind: str, size: int, rng, spec: SynthSpec) -> np.ndarray:
    yy, xx = np.indices((size, size))
    if kind == "disk":
        r = rng.integers(spec.disk_radius[0], spec.disk_radius[1] + 1)
        cy, cx = rng.uniform(r, size - 1 - r, size=2)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "rect":
        h, w = rng.integers(spec.rect_side[0], spec.rect_side[1] + 1, size=2)
        y0 = rng.integers(0, size - h + 1)
        x0 = rng.integers(0, size - w + 1)
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    if kind == "union":
        # a disk and a rectangle sharing a centre: non-convex when the rectangle is elongated
        r = rng.integers(spec.disk_radius[0], spec.disk_radius[1] + 1)
        h, w = rng.integers(spec.rect_side[0], spec.rect_side[1] + 1, size=2)
        my, mx = max(r, h // 2), max(r, w // 2)
        if 2 * max(my, mx) >= size - 1:
            raise ValueError(f"union shapes do not fit a {size}x{size} canvas")
        cy = rng.uniform(my, size - 1 - my)
        cx = rng.uniform(mx, size - 1 - mx)
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        box = (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)
        return disk | box
    raise ValueError(f"unknown shape family {kind!r}")


def synth_scene(spec: SynthSpec, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One image, its mask and an instance label map (0 = background)."""
    size = spec.size
    want = int(rng.integers(spec.count[0], spec.count[1] + 1))
    inst = np.zeros((size, size), dtype=np.int32)
    grown = np.zeros((size, size), dtype=bool)
    placed, attempts = 0, 0
    while placed < want:
        attempts += 1
        if attempts > 2000:
            raise ValueError("could not place the requested instances; shrink shapes or count")
        kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
        m = _shape_mask(kind, size, rng, spec)
        if (m & grown).any():
            continue
        placed += 1
        inst[m] = placed
        grown |= ndimage.binary_dilation(m, iterations=spec.min_gap)
    mask = (inst > 0).astype(np.uint8)
    fg = rng.uniform(*spec.fg)
    bg = rng.uniform(*spec.bg)
    img = np.where(mask > 0, fg, bg)
    if spec.gradient:
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.indices((size, size)) / (size - 1) - 0.5
        ramp = np.cos(theta) * xx + np.sin(theta) * yy
        img = img + spec.gradient_strength * ramp * 2
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0), mask, inst


def synth_generate(spec: SynthSpec, n: int, prefix: str = "synth") -> list[Sample]:
    rng = np.random.default_rng(spec.seed)
    out = []
    for i in range(n):
        X, Y, inst = synth_scene(spec, rng)
        out.append(Sample(X, Y, f"{prefix}_{i:04d}", inst))
    return out


# -- splits -------------------------------------------------------------------

def split(samples, fractions=(0.8, 0.2), seed: int = 0, split_spec: dict | None = None):
    """Deterministic train/test partition.

    An explicit ``split_spec`` (``{"train": [ids], "test": [ids]}``) takes
    precedence over ``fractions``.
    """
    if split_spec is not None:
        by_id = {s.id: s for s in samples}
        missing = [i for i in split_spec["train"] + split_spec["test"] if i not in by_id]
        if missing:
            raise DataError(f"split file lists unknown ids: {', '.join(missing)}")
        return [by_id[i] for i in split_spec["train"]], [by_id[i] for i in split_spec["test"]]
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be two numbers summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(fractions[0] * len(samples)))
    train = [samples[i] for i in sorted(order[:n_train])]
    test = [samples[i] for i in sorted(order[n_train:])]
    return train, test


# -- distance transforms ------------------------------------------------------

def exact_signed_distance(mask: np.ndarray) -> np.ndarray:
    """Euclidean signed distance, positive inside.

    Interior pixels get the distance to the nearest background pixel, where
    everything outside the grid counts as background.  Exterior pixels get
    minus the distance to the nearest foreground pixel.  An empty mask has
    no foreground; it maps to ``-hypot(H, W)`` everywhere.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {m.shape}")
    inside = ndimage.distance_transform_edt(np.pad(m, 1))[1:-1, 1:-1]
    if m.any():
        outside = ndimage.distance_transform_edt(~m)
    else:
        outside = np.full(m.shape, np.hypot(*m.shape))
    return np.where(m, inside, -outside)

