"""Differentiable part localisation and cropping.

Theta rows follow the crop-only affine pattern ``[[s_x, 0, t_x], [0, s_y, t_y]]``
acting on corner-aligned normalised coordinates: a target (patch) point
``u`` in [-1, 1] samples the source at ``s * u + t``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .labels import NUM_CLASSES, NUM_PARTS, PARTS
from .module import ConvBNReLU, Module
from .ops import avgpool2d, grid_sample_bilinear, linear, softmax_channels
from .tensor import Tensor, stack, tensor_op

__all__ = [
    "LocNetConfig",
    "LocNet",
    "locnet_forward",
    "constrain_theta",
    "NoCentroidError",
    "SingularThetaError",
    "part_centroid",
    "theta_ground_truth",
    "theta_ground_truth_batch",
    "theta_centers",
    "affine_grid",
    "crop_parts",
    "inverse_theta",
    "remap_parts",
    "BaselineCrop",
    "baseline_crop",
    "extract_window",
]


class NoCentroidError(ValueError):
    """The mask has no foreground pixel for the requested part."""


class SingularThetaError(ValueError):
    """A theta row with zero scale cannot be inverted."""


# -- localisation network ----------------------------------------------------

@dataclass(frozen=True)
class LocNetConfig:
    in_channels: int = NUM_CLASSES
    input_size: int = 128
    widths: tuple[int, ...] = (16, 16, 32, 32, 64, 64, 96, 96)
    n_parts: int = NUM_PARTS
    input_mode: str = "sigmoid"  # how coarse scores are presented: sigmoid | softmax | scores

    def __post_init__(self):
        if len(self.widths) != 8:
            raise ValueError("the localisation net has exactly 8 conv layers")
        if self.input_mode not in ("sigmoid", "softmax", "scores"):
            raise ValueError(f"unknown input mode {self.input_mode!r}")

    @property
    def feature_size(self) -> int:
        s = self.input_size
        for _ in range(4):
            s = (s + 1) // 2
        return s * s * self.widths[-1]


class LocNet(Module):
    def __init__(self, config: LocNetConfig = LocNetConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        cin = config.in_channels
        self.convs = []
        for i, w in enumerate(config.widths):
            self.convs.append(ConvBNReLU(self, f"conv{i}", cin, w, rng))
            cin = w
        # Zero dense weights: every part starts at s = ln 2, t = 0.
        self.fc_w = self.add_param("fc.weight", np.zeros((config.n_parts * 4, config.feature_size)))
        self.fc_b = self.add_param("fc.bias", np.zeros(config.n_parts * 4))

    def __call__(self, rough: Tensor, train: bool = True) -> Tensor:
        return locnet_forward(self, rough, train)


def locnet_input(rough: Tensor, mode: str) -> Tensor:
    if mode == "sigmoid":
        return rough.sigmoid()
    if mode == "softmax":
        return softmax_channels(rough)
    return rough


def locnet_raw(model: LocNet, x: Tensor, train: bool = True) -> Tensor:
    """Raw dense outputs (B, N, 4) for an already-presented rough mask."""
    cfg = model.config
    if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise ValueError(f"locnet: expected (B, {cfg.in_channels}, {cfg.input_size}, "
                         f"{cfg.input_size}), got {x.shape}")
    for i, conv in enumerate(model.convs):
        x = conv(x, train)
        if i % 2 == 1:
            x = avgpool2d(x)
    raw = linear(x.reshape(x.shape[0], -1), model.fc_w, model.fc_b)
    return raw.reshape(raw.shape[0], cfg.n_parts, 4)


def locnet_forward(model: LocNet, rough: Tensor, train: bool = True) -> Tensor:
    """Theta (B, N, 2, 3) from coarse label scores (B, 9, 128, 128)."""
    x = locnet_input(rough, model.config.input_mode)
    return constrain_theta(locnet_raw(model, x, train))


def constrain_theta(raw: Tensor) -> Tensor:
    """Map raw (B, N, 4) = (s_x, t_x, s_y, t_y) to crop-only theta (B, N, 2, 3).

    Scales go through softplus (strictly positive), translations through tanh.
    Off-diagonal entries are structural zeros.
    """
    if raw.ndim != 3 or raw.shape[-1] != 4:
        raise ValueError(f"constrain_theta: expected (B, N, 4), got {raw.shape}")
    sx = raw[..., 0].softplus()
    tx = raw[..., 1].tanh()
    sy = raw[..., 2].softplus()
    ty = raw[..., 3].tanh()
    zero = Tensor(np.zeros(sx.shape, dtype=raw.dtype))
    theta = stack([sx, zero, tx, zero, sy, ty], axis=-1)
    return theta.reshape(raw.shape[0], raw.shape[1], 2, 3)


# -- ground truth --------------------------------------------------------------

def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def part_centroid(mask: np.ndarray) -> tuple[int, int]:
    """Integer (x, y) centroid of a binary mask, halves rounded up."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise NoCentroidError("empty part mask")
    return _round_half_up(xs.mean()), _round_half_up(ys.mean())


def theta_ground_truth(mask: np.ndarray, window: tuple[int, int] | int,
                       convention: str = "corner") -> np.ndarray:
    """Crop theta (2, 3) centring a fixed window on the mask's integer centroid.

    ``convention="corner"`` gives ``s = (win - 1) / (size - 1)`` and
    ``t = 2c / (size - 1) - 1``, under which an odd window lands exactly on
    integer pixels.  ``convention="ratio"`` gives the plain size-ratio form
    ``s = win / size``, ``t = 2c / size - 1``.
    """
    h, w = mask.shape
    wh, ww = (window, window) if np.isscalar(window) else window
    cx, cy = part_centroid(mask)
    return theta_from_center((cx, cy), (h, w), (wh, ww), convention)


def theta_from_center(center, size, window, convention: str = "corner") -> np.ndarray:
    cx, cy = center
    h, w = size
    wh, ww = window
    if convention == "corner":
        sx, sy = (ww - 1) / (w - 1), (wh - 1) / (h - 1)
        tx, ty = 2.0 * cx / (w - 1) - 1.0, 2.0 * cy / (h - 1) - 1.0
    elif convention == "ratio":
        sx, sy = ww / w, wh / h
        tx, ty = -1.0 + 2.0 * cx / w, -1.0 + 2.0 * cy / h
    else:
        raise ValueError(f"unknown theta convention {convention!r}")
    return np.array([[sx, 0.0, tx], [0.0, sy, ty]])


def theta_ground_truth_batch(labels: np.ndarray, window: int,
                             convention: str = "corner") -> np.ndarray:
    """Theta (N, 2, 3) for every part from a class-index map (H, W)."""
    rows = []
    for part in PARTS:
        rows.append(theta_ground_truth(np.isin(labels, part.classes), window, convention))
    return np.stack(rows)


def theta_centers(theta: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Window centres (…, 2) in pixel (x, y) coordinates of a canvas (H, W)."""
    h, w = size
    t = np.asarray(theta)
    return np.stack([(t[..., 0, 2] + 1.0) * 0.5 * (w - 1), (t[..., 1, 2] + 1.0) * 0.5 * (h - 1)],
                    axis=-1)


# -- grid transformer ---------------------------------------------------------

def _lin(n: int, dtype) -> np.ndarray:
    if n == 1:
        return np.zeros(1, dtype=dtype)
    return np.linspace(-1.0, 1.0, n).astype(dtype)


def affine_grid(theta: Tensor, out_size: tuple[int, int]) -> Tensor:
    """Sampling grid (..., h, w, 2) of source coordinates for theta (..., 2, 3)."""
    h, w = out_size
    if h < 1 or w < 1:
        raise ValueError("grid size must be positive")
    th = theta.data
    xt = _lin(w, th.dtype)[None, :]
    yt = _lin(h, th.dtype)[:, None]
    lead = th.shape[:-2]
    t = th.reshape(-1, 2, 3)
    gx = t[:, 0, 0, None, None] * xt + t[:, 0, 1, None, None] * yt + t[:, 0, 2, None, None]
    gy = t[:, 1, 0, None, None] * xt + t[:, 1, 1, None, None] * yt + t[:, 1, 2, None, None]
    out = np.stack([gx, gy], axis=-1).reshape(lead + (h, w, 2))

    def bw(g):
        g = g.reshape(-1, h, w, 2)
        gt = np.empty((g.shape[0], 2, 3), dtype=th.dtype)
        for r in range(2):
            gr = g[..., r]
            gt[:, r, 0] = (gr * xt).sum(axis=(1, 2))
            gt[:, r, 1] = (gr * yt).sum(axis=(1, 2))
            gt[:, r, 2] = gr.sum(axis=(1, 2))
        return (gt.reshape(th.shape),)

    return tensor_op(out, (theta,), bw, "affine_grid")


def crop_parts(image: Tensor, theta: Tensor, window: int | tuple[int, int] = 81) -> Tensor:
    """Crop N windows per image: (B, C, H, W) x (B, N, 2, 3) -> (B, N, C, h, w)."""
    wh, ww = (window, window) if np.isscalar(window) else window
    b, c = image.shape[:2]
    n = theta.shape[1]
    if theta.shape[0] != b or theta.shape[2:] != (2, 3):
        raise ValueError(f"crop_parts: theta shape {theta.shape} incompatible with batch {b}")
    grid = affine_grid(theta, (wh, ww)).reshape(b, n * wh, ww, 2)
    patches = grid_sample_bilinear(image, grid)  # B, C, N*h, w
    return patches.reshape(b, c, n, wh, ww).transpose(0, 2, 1, 3, 4)


def inverse_theta(theta):
    """Invert crop-only thetas: per axis s' = 1/s, t' = -t/s.

    Accepts a Tensor (differentiable) or an array.
    """
    arr = theta.data if isinstance(theta, Tensor) else np.asarray(theta)
    s = np.stack([arr[..., 0, 0], arr[..., 1, 1]], axis=-1)
    if np.any(s == 0):
        raise SingularThetaError("theta has a zero scale")
    if not isinstance(theta, Tensor):
        out = np.zeros_like(arr, dtype=np.result_type(arr.dtype, np.float32))
        out[..., 0, 0] = 1.0 / arr[..., 0, 0]
        out[..., 1, 1] = 1.0 / arr[..., 1, 1]
        out[..., 0, 2] = -arr[..., 0, 2] / arr[..., 0, 0]
        out[..., 1, 2] = -arr[..., 1, 2] / arr[..., 1, 1]
        return out
    sx, tx = theta[..., 0, 0], theta[..., 0, 2]
    sy, ty = theta[..., 1, 1], theta[..., 1, 2]
    zero = Tensor(np.zeros(sx.shape, dtype=theta.dtype))
    out = stack([1.0 / sx, zero, -tx / sx, zero, 1.0 / sy, -ty / sy], axis=-1)
    return out.reshape(theta.shape)


def remap_parts(patches: Tensor, theta, canvas: tuple[int, int]) -> Tensor:
    """Place patches (B, N, C, h, w) back on a (H, W) canvas -> (B, N, C, H, W).

    Pixels outside each part window read zero.
    """
    if not isinstance(patches, Tensor):
        patches = Tensor(np.asarray(patches))
    if not isinstance(theta, Tensor):
        theta = Tensor(np.asarray(theta, dtype=patches.dtype))
    b, n, c, h, w = patches.shape
    H, W = canvas
    inv = inverse_theta(theta)
    grid = affine_grid(inv, (H, W)).reshape(b * n, H, W, 2)
    out = grid_sample_bilinear(patches.reshape(b * n, c, h, w), grid)
    return out.reshape(b, n, c, H, W)


# -- baseline cropper ------------------------------------------------------------

@dataclass
class BaselineCrop:
    patches: np.ndarray  # (N, C, h, w); zeros for missing parts
    centers: list  # (x, y) integer centre in image pixels, or None when missing

    @property
    def missing(self) -> list[bool]:
        return [c is None for c in self.centers]


def extract_window(image: np.ndarray, center: tuple[int, int], window: int) -> np.ndarray:
    """Integer window around ``center`` with zero fill; even windows start at c - w/2."""
    c, h, w = image.shape
    cx, cy = center
    half = window // 2
    y0, x0 = cy - half, cx - half
    out = np.zeros((c, window, window), dtype=image.dtype)
    ys, ye = max(y0, 0), min(y0 + window, h)
    xs, xe = max(x0, 0), min(x0 + window, w)
    if ys < ye and xs < xe:
        out[:, ys - y0:ye - y0, xs - x0:xe - x0] = image[:, ys:ye, xs:xe]
    return out


def baseline_crop(rough: np.ndarray, image: np.ndarray, window: int = 81) -> BaselineCrop:
    """Non-differentiable centroid cropper.

    ``rough`` is either a class-index map or class scores (9, h, w); in the
    latter case the per-pixel argmax is used.  If its resolution differs from
    the image, centroids are mapped with pixel-centre scaling before rounding.
    Parts with no pixel are reported missing instead of raising.
    """
    rough = np.asarray(rough)
    labels = rough.argmax(axis=0) if rough.ndim == 3 else rough
    image = np.asarray(image)
    _, H, W = image.shape
    h, w = labels.shape
    patches = np.zeros((len(PARTS), image.shape[0], window, window), dtype=image.dtype)
    centers: list = []
    for i, part in enumerate(PARTS):
        ys, xs = np.nonzero(np.isin(labels, part.classes))
        if ys.size == 0:
            centers.append(None)
            continue
        mx, my = xs.mean(), ys.mean()
        if (h, w) != (H, W):
            mx = (mx + 0.5) * W / w - 0.5
            my = (my + 0.5) * H / h - 0.5
        center = (_round_half_up(mx), _round_half_up(my))
        centers.append(center)
        patches[i] = extract_window(image, center, window)
    return BaselineCrop(patches, centers)
