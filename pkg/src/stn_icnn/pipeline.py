"""The full parsing pipeline: coarse labels -> theta -> crops -> fine labels -> remap.

Also holds the batched dataset view used by training and evaluation, and the
model bundle that checkpoints serialise.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, apply_state
from .data import DataError, Sample, augment, onehot, preprocess, pad_square, sample_seed
from .icnn import ICNN, ICNNConfig, coarse_config, fine_config, icnn_forward
from .labels import NUM_PARTS, PART_KINDS, PARTS, fine_channels
from .metrics import F1Accumulator, F1Report, assemble_final
from .stn import (LocNet, LocNetConfig, NoCentroidError, constrain_theta, crop_parts,
                  locnet_input, locnet_raw, remap_parts, theta_centers, theta_ground_truth)
from .tensor import Tensor, no_grad, where_const

__all__ = ["PreparedSet", "prepare", "ModelSet", "coarse_scores", "localize",
           "fine_scores", "Prediction", "predict", "evaluate", "coarse_f1", "center_errors",
           "EvalResult"]


@dataclass
class PreparedSet:
    ids: list
    resized: np.ndarray  # (N, 3, R, R) float32
    labels_resized: np.ndarray  # (N, R, R) int8
    padded: np.ndarray  # (N, 3, S, S) float32
    labels_padded: np.ndarray  # (N, S, S) int8
    offsets: list  # (top, left) per sample
    orig_sizes: list
    originals: list  # (H, W) class maps, for evaluation
    window: int = 81
    _theta_hat: np.ndarray | None = None
    _theta_valid: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def canvas(self) -> int:
        return self.padded.shape[-1]

    def _compute_theta(self):
        n = len(self)
        th = np.zeros((n, NUM_PARTS, 2, 3))
        valid = np.zeros((n, NUM_PARTS), bool)
        for i in range(n):
            for j, part in enumerate(PARTS):
                try:
                    th[i, j] = theta_ground_truth(np.isin(self.labels_padded[i], part.classes),
                                                  self.window)
                    valid[i, j] = True
                except NoCentroidError:
                    th[i, j] = [[1.0, 0, 0], [0, 1.0, 0]]
        self._theta_hat, self._theta_valid = th, valid

    @property
    def theta_hat(self) -> np.ndarray:
        if self._theta_hat is None:
            self._compute_theta()
        return self._theta_hat

    @property
    def theta_valid(self) -> np.ndarray:
        if self._theta_valid is None:
            self._compute_theta()
        return self._theta_valid

    def padded_onehot(self, idx) -> np.ndarray:
        return onehot(self.labels_padded[idx])

    def resized_onehot(self, idx) -> np.ndarray:
        return onehot(self.labels_resized[idx])


def prepare(samples: list[Sample], size: int = 128, canvas: int = 0, window: int = 81,
            augment_seed: int | None = None) -> PreparedSet:
    """Preprocess samples into stacked arrays, optionally expanding each into 5 augmentations."""
    if augment_seed is not None:
        expanded = []
        for s in samples:
            expanded.extend(augment(s, sample_seed(augment_seed, s.id)))
        samples = expanded
    if not samples:
        raise DataError("no samples to prepare")
    need = max(max(s.size) for s in samples)
    canvas = canvas or need
    if need > canvas:
        raise DataError(f"sample side {need} exceeds canvas {canvas}; raise the canvas size")
    pre = [preprocess(s, size) for s in samples]
    padded, labels_padded, offsets = [], [], []
    for s, p in zip(samples, pre):
        img, lab = p.image_padded, p.labels_padded
        extra = canvas - img.shape[-1]
        if extra:
            # recentre inside the common canvas
            img = np.pad(img, ((0, 0), (extra // 2, extra - extra // 2), (extra // 2, extra - extra // 2)))
            lab = np.pad(lab, ((extra // 2, extra - extra // 2), (extra // 2, extra - extra // 2)))
        padded.append(img)
        labels_padded.append(lab)
        offsets.append((p.offsets[0] + extra // 2, p.offsets[1] + extra // 2))
    return PreparedSet(
        ids=[s.id for s in samples],
        resized=np.stack([p.image_resized for p in pre]).astype(np.float32),
        labels_resized=np.stack([p.labels_resized for p in pre]).astype(np.int8),
        padded=np.stack(padded).astype(np.float32),
        labels_padded=np.stack(labels_padded).astype(np.int8),
        offsets=offsets,
        orig_sizes=[p.orig_size for p in pre],
        originals=[s.class_map().astype(np.int8) for s in samples],
        window=window,
    )


@dataclass
class ModelSet:
    coarse: ICNN | None = None
    locnet: LocNet | None = None
    fine: dict = field(default_factory=dict)  # part kind -> ICNN
    canvas: int = 0
    window: int = 81

    def modules(self):
        if self.coarse is not None:
            yield "coarse", self.coarse
        if self.locnet is not None:
            yield "locnet", self.locnet
        for kind in PART_KINDS:
            if kind in self.fine:
                yield f"fine.{kind}", self.fine[kind]

    def entries(self) -> dict:
        out = {}
        for prefix, m in self.modules():
            for k, v in m.state_dict().items():
                out[f"{prefix}.{k}"] = v
        return out

    def meta(self) -> dict:
        meta: dict = {"canvas": self.canvas, "window": self.window, "models": {}}
        for prefix, m in self.modules():
            meta["models"][prefix] = dataclasses.asdict(m.config)
        return meta

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ModelSet":
        ms = cls(canvas=int(ckpt.meta.get("canvas", 0)), window=int(ckpt.meta.get("window", 81)))
        for prefix, cfg in ckpt.meta.get("models", {}).items():
            if prefix == "locnet":
                cfg = dict(cfg, widths=tuple(cfg["widths"]))
                m = LocNet(LocNetConfig(**cfg))
            else:
                cfg = dict(cfg, widths=tuple(cfg["widths"]))
                m = ICNN(ICNNConfig(**cfg))
            apply_state(m, ckpt.module_state(prefix))
            if prefix == "coarse":
                ms.coarse = m
            elif prefix == "locnet":
                ms.locnet = m
            else:
                ms.fine[prefix.split(".", 1)[1]] = m
        return ms

    def merge(self, other: "ModelSet") -> "ModelSet":
        out = ModelSet(self.coarse, self.locnet, dict(self.fine), self.canvas, self.window)
        if other.coarse is not None:
            out.coarse = other.coarse
        if other.locnet is not None:
            out.locnet = other.locnet
        out.fine.update(other.fine)
        out.canvas = other.canvas or out.canvas
        out.window = other.window or out.window
        return out

    def require(self, *names: str) -> None:
        missing = [n for n in names if (n == "fine" and set(self.fine) != set(PART_KINDS))
                   or (n != "fine" and getattr(self, n) is None)]
        if missing:
            raise CheckpointError(f"incomplete checkpoint set: missing {', '.join(missing)}")


def new_fine_models(widths, rounds: int, window: int, seed: int, fuse_width: int = 0) -> dict:
    return {kind: ICNN(fine_config(fine_channels(kind), widths, rounds, input_size=window,
                                   fuse_width=fuse_width),
                       seed=sample_seed(seed, kind))
            for kind in PART_KINDS}


# -- forward pieces ---------------------------------------------------------------

def coarse_scores(models: ModelSet, resized: Tensor, train: bool = False) -> Tensor:
    return icnn_forward(models.coarse, resized, train)


def localize(models: ModelSet, z: Tensor, train: bool = False,
             occlude: np.ndarray | None = None) -> Tensor:
    """Theta from coarse scores.  ``occlude`` (B, 9) zeroes presented channels."""
    x = locnet_input(z, models.locnet.config.input_mode)
    if occlude is not None:
        keep = ~np.asarray(occlude, bool)[:, :, None, None]
        x = where_const(keep, x, 0.0)
    return constrain_theta(locnet_raw(models.locnet, x, train))


def fine_scores(models: ModelSet, patches: Tensor, train: bool = False) -> list:
    """Per-part fine scores (B, C_i, h, w) for patches (B, N, 3, h, w)."""
    b, n, c, h, w = patches.shape
    out = [None] * n
    for kind in PART_KINDS:
        idx = [i for i, p in enumerate(PARTS) if p.kind == kind]
        x = patches[:, idx] if len(idx) > 1 else patches[:, idx[0]:idx[0] + 1]
        y = icnn_forward(models.fine[kind], x.reshape(b * len(idx), c, h, w), train)
        y = y.reshape(b, len(idx), y.shape[1], h, w)
        for j, i in enumerate(idx):
            out[i] = y[:, j]
    return out


@dataclass
class Prediction:
    z: np.ndarray  # (B, 9, R, R)
    theta: np.ndarray  # (B, N, 2, 3)
    labels: list  # per-sample class map on the padded canvas (S, S)


def predict(models: ModelSet, resized: np.ndarray, padded: np.ndarray,
            theta: np.ndarray | None = None, occlude: np.ndarray | None = None) -> Prediction:
    """Run the whole pipeline in eval mode on a batch."""
    models.require("coarse", "locnet", "fine")
    s = padded.shape[-1]
    with no_grad():
        z = coarse_scores(models, Tensor(resized), train=False)
        th = localize(models, z, occlude=occlude).data if theta is None else np.asarray(theta)
        th_t = Tensor(th.astype(padded.dtype))
        patches = crop_parts(Tensor(padded), th_t, models.window)
        scores = fine_scores(models, patches, train=False)
        b = padded.shape[0]
        ones = Tensor(np.ones((b, 1, 1, models.window, models.window), padded.dtype))
        maps = []
        for i in range(NUM_PARTS):
            th_i = Tensor(th_t.data[:, i:i + 1])
            sc = remap_parts(scores[i].reshape(b, 1, *scores[i].shape[1:]), th_i, (s, s)).data
            cov = remap_parts(ones, th_i, (s, s)).data
            maps.append((sc[:, 0], cov[:, 0, 0]))
    labels = [assemble_final(((i, maps[i][0][k], maps[i][1][k]) for i in range(NUM_PARTS)), (s, s))
              for k in range(b)]
    return Prediction(z.data, th, labels)


@dataclass
class EvalResult:
    report: F1Report
    coarse: F1Report
    center_error: float
    labels: list = field(default_factory=list)


def _batches(n: int, bs: int):
    for i in range(0, n, bs):
        yield np.arange(i, min(i + bs, n))


def evaluate(models: ModelSet, data: PreparedSet, batch_size: int = 8,
             keep_labels: bool = False, oracle: bool = False) -> EvalResult:
    """F1 on full-size remapped predictions, coarse F1 and window-centre error.

    ``oracle`` skips the networks and scores the ground truth against itself.
    """
    acc, cacc = F1Accumulator(), F1Accumulator()
    errs, kept = [], []
    for idx in _batches(len(data), batch_size):
        if oracle:
            preds = [data.labels_padded[i].astype(np.int64) for i in idx]
            zlab = [data.labels_resized[i] for i in idx]
            th = data.theta_hat[idx]
        else:
            pr = predict(models, data.resized[idx], data.padded[idx])
            preds, th = pr.labels, pr.theta
            zlab = list(pr.z.argmax(axis=1))
        for k, i in enumerate(idx):
            top, left = data.offsets[i]
            h, w = data.orig_sizes[i]
            lab = preds[k][top:top + h, left:left + w]
            acc.add(lab, data.originals[i])
            cacc.add(zlab[k], data.labels_resized[i])
            if keep_labels:
                kept.append(lab)
        errs.append(center_errors(th, data.theta_hat[idx], data.canvas, data.theta_valid[idx]))
    err = np.concatenate(errs)
    return EvalResult(acc.report(), cacc.report(), float(err[np.isfinite(err)].mean()), kept)


def center_errors(theta: np.ndarray, theta_hat: np.ndarray, canvas: int,
                  valid: np.ndarray | None = None) -> np.ndarray:
    """Euclidean window-centre distance in canvas pixels, (B, N); NaN where invalid."""
    c1 = theta_centers(theta, (canvas, canvas))
    c2 = theta_centers(theta_hat, (canvas, canvas))
    d = np.sqrt(((c1 - c2) ** 2).sum(axis=-1))
    if valid is not None:
        d = np.where(valid, d, np.nan)
    return d


def coarse_f1(models: ModelSet, data: PreparedSet, batch_size: int = 8) -> F1Report:
    acc = F1Accumulator()
    with no_grad():
        for idx in _batches(len(data), batch_size):
            z = coarse_scores(models, Tensor(data.resized[idx]), train=False).data
            for k, i in enumerate(idx):
                acc.add(z[k].argmax(axis=0), data.labels_resized[i])
    return acc.report()
