"""HELEN-format ingestion, preprocessing, augmentation and synthetic faces."""
from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .labels import HELEN_CATEGORIES, HELEN_TO_CLASS, NUM_CLASSES, PARTS
from .stn import theta_from_center

log = logging.getLogger(__name__)

__all__ = [
    "DataError",
    "Sample",
    "PreprocessedSample",
    "load_helen",
    "write_helen",
    "preprocess",
    "resize_bilinear",
    "resize_nearest",
    "augment",
    "SynthSpec",
    "random_synth_spec",
    "synth_face",
    "synth_dataset",
    "write_sidecar",
    "read_sidecar",
    "SPLIT_FILES",
    "sample_seed",
    "onehot",
]

SPLIT_FILES = {"train": "exemplars.txt", "val": "tuning.txt", "test": "testing.txt"}
STANDARD_SPLIT_SIZES = {"train": 2000, "val": 230, "test": 100}
SIDECAR = "synth.json"
N_CATEGORIES = len(HELEN_CATEGORIES)


class DataError(RuntimeError):
    """Missing, unreadable or inconsistent dataset files."""


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    masks: np.ndarray  # (11, H, W) uint8 one-hot over HELEN categories
    split: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]

    def category_map(self) -> np.ndarray:
        return self.masks.argmax(axis=0)

    def class_map(self) -> np.ndarray:
        """Working 9-class index map (skin and hair folded into background)."""
        return np.asarray(HELEN_TO_CLASS, dtype=np.int64)[self.category_map()]


def onehot(labels: np.ndarray, n: int = NUM_CLASSES, dtype=np.float32) -> np.ndarray:
    """Index map (..., H, W) -> one-hot (..., n, H, W)."""
    labels = np.asarray(labels)
    out = (labels[..., None, :, :] == np.arange(n).reshape((n, 1, 1))).astype(dtype)
    return out


def masks_from_categories(cat: np.ndarray) -> np.ndarray:
    return onehot(cat, N_CATEGORIES, np.uint8)


# -- disk layout ---------------------------------------------------------------------

def _read_split(path: Path) -> list[str]:
    ids = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            ids.append(line.split(",")[-1].strip())
    return ids


def _image_path(root: Path, sid: str) -> Path:
    for ext in (".jpg", ".png"):
        p = root / "images" / f"{sid}{ext}"
        if p.exists():
            return p
    raise DataError(f"image for id {sid!r} not found under {root / 'images'}")


def _load_sample(root: Path, sid: str, split: str) -> Sample:
    try:
        img = np.asarray(Image.open(_image_path(root, sid)).convert("RGB"), dtype=np.float32)
    except DataError:
        raise
    except Exception as exc:  # undecodable image
        raise DataError(f"cannot decode image for id {sid!r}: {exc}") from exc
    image = np.ascontiguousarray(img.transpose(2, 0, 1) / 255.0)
    raw = []
    for k in range(N_CATEGORIES):
        p = root / "labels" / sid / f"{sid}_lbl{k:02d}.png"
        if not p.exists():
            raise DataError(f"missing label file {p.name} for id {sid!r}")
        try:
            lab = np.asarray(Image.open(p).convert("L"), dtype=np.uint8)
        except Exception as exc:
            raise DataError(f"cannot decode label {p.name} for id {sid!r}: {exc}") from exc
        if lab.shape != image.shape[1:]:
            raise DataError(f"label {p.name} size {lab.shape} differs from image {image.shape[1:]}")
        raw.append(lab)
    raw = np.stack(raw)
    # Binarise at 128; overlapping or partial annotations resolve to the
    # channel with the largest raw value, pixels with none to background.
    cat = raw.argmax(axis=0)
    cat[raw.max(axis=0) < 128] = 0
    return Sample(sid, image, masks_from_categories(cat), split)


def load_helen(root, split: str = "train", validate_sizes: bool | None = None) -> list[Sample]:
    """Load one split of a HELEN-layout dataset.

    ``split`` is ``train``/``val``/``test`` or a split-file name.  Standard
    split sizes (2000/230/100) are enforced for real HELEN roots; roots
    carrying a synthetic sidecar skip that check unless asked.
    """
    root = Path(root)
    fname = SPLIT_FILES.get(split, split)
    path = root / fname
    if not path.exists():
        raise DataError(f"split file {path} not found")
    ids = _read_split(path)
    if validate_sizes is None:
        validate_sizes = not (root / SIDECAR).exists()
    if validate_sizes and all((root / f).exists() for f in SPLIT_FILES.values()):
        for name, f in SPLIT_FILES.items():
            n = len(_read_split(root / f))
            if n != STANDARD_SPLIT_SIZES[name]:
                raise DataError(f"{f} lists {n} ids, expected {STANDARD_SPLIT_SIZES[name]}")
    tag = {v: k for k, v in SPLIT_FILES.items()}.get(fname, split)
    return [_load_sample(root, sid, tag) for sid in ids]


def write_helen(root, samples: list[Sample], splits: dict[str, list[str]]) -> None:
    """Write samples in HELEN layout; images as lossless PNG."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = np.clip(np.rint(s.image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img, "RGB").save(root / "images" / f"{s.id}.png")
        d = root / "labels" / s.id
        d.mkdir(parents=True, exist_ok=True)
        for k in range(N_CATEGORIES):
            Image.fromarray(s.masks[k] * np.uint8(255), "L").save(d / f"{s.id}_lbl{k:02d}.png")
    for name, fname in SPLIT_FILES.items():
        ids = splits.get(name, [])
        (root / fname).write_text("".join(f"{i}\n" for i in ids))


# -- resizing and padding -----------------------------------------------------------

def _src_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # pixel-centre convention, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, (src - i0).astype(np.float32)


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of (C, H, W) to (C, *size)."""
    c, h, w = img.shape
    oh, ow = size
    if (oh, ow) == (h, w):
        return img.copy()
    y0, y1, fy = _src_coords(oh, h)
    x0, x1, fx = _src_coords(ow, w)
    rows = img[:, y0] * (1 - fy)[None, :, None] + img[:, y1] * fy[None, :, None]
    return (rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx).astype(img.dtype)


def resize_nearest(labels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of an index map (H, W) or stack (..., H, W)."""
    h, w = labels.shape[-2:]
    oh, ow = size
    yi = np.minimum(np.floor((np.arange(oh) + 0.5) * h / oh).astype(np.int64), h - 1)
    xi = np.minimum(np.floor((np.arange(ow) + 0.5) * w / ow).astype(np.int64), w - 1)
    return labels[..., yi[:, None], xi[None, :]]


@dataclass
class PreprocessedSample:
    id: str
    image_resized: np.ndarray  # (3, R, R)
    image_padded: np.ndarray  # (3, S, S)
    labels_resized: np.ndarray  # (R, R) working class indices
    labels_padded: np.ndarray  # (S, S) working class indices
    offsets: tuple[int, int]  # (top, left) of the original inside the padded square
    orig_size: tuple[int, int]

    @property
    def resized_onehot(self) -> np.ndarray:
        return onehot(self.labels_resized)

    @property
    def padded_onehot(self) -> np.ndarray:
        return onehot(self.labels_padded)

    @property
    def padded_size(self) -> int:
        return self.image_padded.shape[1]

    def unpad(self, arr: np.ndarray) -> np.ndarray:
        top, left = self.offsets
        h, w = self.orig_size
        return arr[..., top:top + h, left:left + w]


def pad_square(arr: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = arr.shape[-2:]
    s = max(h, w)
    top, left = (s - h) // 2, (s - w) // 2
    pad = [(0, 0)] * (arr.ndim - 2) + [(top, s - h - top), (left, s - w - left)]
    return np.pad(arr, pad), (top, left)


def preprocess(sample: Sample, size: int = 128) -> PreprocessedSample:
    """Resize (for the coarse net) and zero-pad to a square (for cropping)."""
    h, w = sample.size
    if h < 16 or w < 16:
        raise DataError(f"sample {sample.id!r} is too small ({h}x{w})")
    labels = sample.class_map()
    image_padded, offsets = pad_square(sample.image)
    labels_padded, _ = pad_square(labels)
    return PreprocessedSample(
        id=sample.id,
        image_resized=resize_bilinear(sample.image, (size, size)),
        image_padded=image_padded,
        labels_resized=resize_nearest(labels, (size, size)),
        labels_padded=labels_padded,
        offsets=offsets,
        orig_size=(h, w),
    )


# -- augmentation -------------------------------------------------------------------

AUG_OPS = ("rotate", "shift", "scale", "noise")
NOISE_SIGMA = 0.02


def _warp(sample: Sample, matrix: np.ndarray) -> Sample:
    """Apply an output->input affine map (2x3, pixel coords) to image and masks."""
    c, h, w = sample.image.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = matrix[0, 0] * xs + matrix[0, 1] * ys + matrix[0, 2]
    sy = matrix[1, 0] * xs + matrix[1, 1] * ys + matrix[1, 2]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0).astype(np.float32)
    fy = (sy - y0).astype(np.float32)
    out = np.zeros_like(sample.image)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xx, yy = x0 + dx, y0 + dy
            ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            vals = sample.image[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += vals * (wx * wy * ok)[None]
    nx = np.floor(sx + 0.5).astype(np.int64)
    ny = np.floor(sy + 0.5).astype(np.int64)
    ok = (nx >= 0) & (nx < w) & (ny >= 0) & (ny < h)
    cat = sample.category_map()[np.clip(ny, 0, h - 1), np.clip(nx, 0, w - 1)]
    cat = np.where(ok, cat, 0)
    return Sample(sample.id, np.clip(out, 0.0, 1.0), masks_from_categories(cat), sample.split,
                  dict(sample.meta))


def augment(sample: Sample, seed: int) -> list[Sample]:
    """Five variants; variant i applies i distinct operations chosen at random.

    Operations: rotation in [-15, 15] degrees, shift within 20% of each
    dimension, scale in [0.2, 1.2] (all about the image centre) and additive
    Gaussian noise on the image only.
    """
    rng = np.random.default_rng(seed)
    h, w = sample.size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    outs = []
    for i in range(5):
        ops = sorted(rng.choice(4, size=i, replace=False).tolist())
        names = [AUG_OPS[k] for k in ops]
        params: dict = {}
        if "rotate" in names:
            params["angle"] = float(rng.uniform(-15.0, 15.0))
        if "shift" in names:
            params["shift"] = (float(rng.uniform(-0.2 * w, 0.2 * w)),
                               float(rng.uniform(-0.2 * h, 0.2 * h)))
        if "scale" in names:
            params["scale"] = float(rng.uniform(0.2, 1.2))
        out = Sample(f"{sample.id}_aug{i}", sample.image.copy(), sample.masks.copy(),
                     sample.split, dict(sample.meta))
        if any(n in names for n in ("rotate", "shift", "scale")):
            a = np.deg2rad(params.get("angle", 0.0))
            s = params.get("scale", 1.0)
            dx, dy = params.get("shift", (0.0, 0.0))
            # forward: p' = s R (p - c) + c + d ; we need the inverse for sampling
            rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
            inv = rot.T / s
            ctr = np.array([cx, cy])
            off = ctr - inv @ (ctr + np.array([dx, dy]))
            out = _warp(out, np.hstack([inv, off[:, None]]))
            out.id = f"{sample.id}_aug{i}"
        if "noise" in names:
            noise = rng.normal(0.0, NOISE_SIGMA, out.image.shape).astype(np.float32)
            out.image = np.clip(out.image + noise, 0.0, 1.0).astype(np.float32)
        out.meta["aug_ops"] = names
        out.meta["aug_params"] = params
        outs.append(out)
    return outs


def sample_seed(*keys) -> int:
    """Stable per-sample seed from a global seed and identifying keys."""
    words = []
    for k in keys:
        if isinstance(k, str):
            words.append(zlib.crc32(k.encode()))
        else:
            words.append(int(k))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# -- synthetic faces ----------------------------------------------------------------

# canonical layout at face scale 1 for a 128-pixel canvas: offsets from the
# face centre and ellipse semi-axes, both in pixels
_CANON = {
    "l_brow": ((-18, -21), (9, 3)),
    "r_brow": ((18, -21), (9, 3)),
    "l_eye": ((-18, -10), (8, 4)),
    "r_eye": ((18, -10), (8, 4)),
    "nose": ((0, 6), (5, 8)),
    "mouth": ((0, 27), (14, 7)),
}
_COLORS = {
    "background": (0.15, 0.18, 0.22),
    "skin": (0.86, 0.68, 0.55),
    "hair": (0.25, 0.15, 0.08),
    "l_brow": (0.35, 0.22, 0.12),
    "r_brow": (0.35, 0.22, 0.12),
    "l_eye": (0.95, 0.95, 0.97),
    "r_eye": (0.95, 0.95, 0.97),
    "nose": (0.70, 0.45, 0.36),
    "u_lip": (0.82, 0.28, 0.32),
    "i_mouth": (0.30, 0.05, 0.08),
    "l_lip": (0.68, 0.18, 0.22),
}


@dataclass
class SynthSpec:
    seed: int
    size: tuple[int, int]
    face_center: tuple[int, int]
    face_axes: tuple[int, int]
    parts: dict  # part name -> ((cx, cy), (a, b)) integer pixels
    colors: dict
    noise: float = 0.02

    def centroids(self) -> dict:
        return {name: center for name, (center, _) in self.parts.items()}


def _ellipse(shape, center, axes) -> np.ndarray:
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    cx, cy = center
    a, b = axes
    return ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0


def _part_masks(spec: SynthSpec) -> dict:
    masks = {}
    for name, (center, axes) in spec.parts.items():
        m = _ellipse(spec.size, center, axes)
        if name == "mouth":
            ys = np.arange(spec.size[0])[:, None]
            band = axes[1] // 3
            cy = center[1]
            masks["u_lip"] = m & (ys < cy - band)
            masks["i_mouth"] = m & (np.abs(ys - cy) <= band)
            masks["l_lip"] = m & (ys > cy + band)
        else:
            masks[name] = m
    return masks


def _disjoint(spec: SynthSpec) -> bool:
    total = np.zeros(spec.size, dtype=np.int32)
    for name, (center, axes) in spec.parts.items():
        # one pixel of clearance so distinct parts never touch
        total += _ellipse(spec.size, center, (axes[0] + 1, axes[1] + 1))
    return total.max() <= 1


def random_synth_spec(seed: int, size: tuple[int, int] = (128, 128)) -> SynthSpec:
    """Random face layout: global shift and scale plus small per-part jitter."""
    rng = np.random.default_rng(seed)
    h, w = size
    unit = min(h, w) / 128.0
    for _ in range(100):
        f = rng.uniform(0.9, 1.1) * unit
        fc = (int(round(w / 2 + rng.uniform(-6, 6) * unit)),
              int(round(h / 2 + 2 * unit + rng.uniform(-6, 6) * unit)))
        parts = {}
        for name, ((dx, dy), (a, b)) in _CANON.items():
            jx, jy = rng.integers(-2, 3, size=2)
            cx = int(round(fc[0] + dx * f)) + int(jx)
            cy = int(round(fc[1] + dy * f)) + int(jy)
            ax = max(2, int(round(a * f * rng.uniform(0.9, 1.1))))
            by = max(2, int(round(b * f * rng.uniform(0.9, 1.1))))
            parts[name] = ((cx, cy), (ax, by))
        colors = {k: tuple(float(np.clip(c + rng.uniform(-0.04, 0.04), 0, 1)) for c in v)
                  for k, v in _COLORS.items()}
        spec = SynthSpec(seed, (h, w), fc, (int(round(44 * f)), int(round(54 * f))), parts, colors)
        if _disjoint(spec):
            return spec
    raise DataError(f"could not draw a disjoint layout for seed {seed}")


def synth_face(spec: SynthSpec, window: int = 81, sample_id: str | None = None):
    """Render a synthetic face.

    Returns ``(sample, theta_hat, centroids)``: theta_hat (6, 2, 3) is the
    exact crop theta for each part on the padded canvas, centroids maps part
    name to its (x, y) centre in original image pixels.
    """
    if not _disjoint(spec):
        raise DataError("synthetic spec has overlapping parts")
    h, w = spec.size
    rng = np.random.default_rng(spec.seed + 7919)
    cat = np.zeros((h, w), dtype=np.int64)
    ys = np.arange(h)[:, None]
    face = _ellipse(spec.size, spec.face_center, spec.face_axes)
    head = _ellipse(spec.size, spec.face_center, (spec.face_axes[0] + 6, spec.face_axes[1] + 6))
    cy = spec.face_center[1]
    hair = (head & ~face & (ys < cy)) | (face & (ys < cy - int(0.75 * spec.face_axes[1])))
    cat[face] = HELEN_CATEGORIES.index("skin")
    cat[hair] = HELEN_CATEGORIES.index("hair")
    for name, m in _part_masks(spec).items():
        cat[m] = HELEN_CATEGORIES.index(name)

    palette = np.array([spec.colors[c] for c in HELEN_CATEGORIES], dtype=np.float32)
    image = palette[cat].transpose(2, 0, 1)
    image = image + rng.normal(0.0, spec.noise, image.shape).astype(np.float32)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    sid = sample_id or f"synth{spec.seed}"
    sample = Sample(sid, np.ascontiguousarray(image), masks_from_categories(cat))

    s = max(h, w)
    top, left = (s - h) // 2, (s - w) // 2
    cents = spec.centroids()
    theta = np.stack([
        theta_from_center((cents[p.name][0] + left, cents[p.name][1] + top), (s, s), (window, window))
        for p in PARTS])
    return sample, theta, cents


def synth_dataset(count: int, seed: int, size=(128, 128), window: int = 81):
    """``count`` synthetic samples with per-sample seeds derived from ``seed``."""
    out = []
    for i in range(count):
        spec = random_synth_spec(sample_seed(seed, i), size)
        out.append(synth_face(spec, window, sample_id=f"synth_{seed}_{i:05d}"))
    return out


def write_sidecar(root, entries: dict, meta: dict) -> None:
    Path(root).mkdir(parents=True, exist_ok=True)
    payload = {"meta": meta, "samples": entries}
    (Path(root) / SIDECAR).write_text(json.dumps(payload, indent=1, sort_keys=True))


def read_sidecar(root) -> dict | None:
    p = Path(root) / SIDECAR
    if not p.exists():
        return None
    return json.loads(p.read_text())
