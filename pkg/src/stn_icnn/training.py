"""SGD and the three training phases: coarse pre-training, locnet pre-training, end to end."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import onehot, sample_seed
from .icnn import ICNN, coarse_config
from .labels import NUM_CLASSES, NUM_PARTS, PARTS
from .losses import coarse_loss, crop_part_targets, smooth_l1, system_loss
from .module import Module
from .pipeline import (ModelSet, PreparedSet, center_errors, coarse_f1, coarse_scores,
                       evaluate, fine_scores, localize, new_fine_models)
from .stn import LocNet, LocNetConfig, crop_parts
from .tensor import Parameter, Tensor, no_grad

__all__ = ["MissingGradientError", "SGD", "TrainResult", "pretrain_coarse", "pretrain_locnet",
           "train_end_to_end", "load_models", "save_training_checkpoint", "occlusion_masks"]

VELOCITY_PREFIX = "velocity."


class MissingGradientError(RuntimeError):
    pass


class SGD:
    """Momentum SGD: ``v <- mu v + g``, ``w <- w - lr(group) v``.

    ``params`` maps unique names to parameters; the names key the velocity
    buffers so they can be checkpointed.
    """

    def __init__(self, params: dict, lr: dict | float, momentum: float = 0.9,
                 max_grad_norm: float = 0.0):
        self.params = dict(params)
        self.lr = {"new": lr, "pretrained": lr} if np.isscalar(lr) else dict(lr)
        self.momentum = momentum
        self.max_grad_norm = max_grad_norm
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.requires_grad and p.grad is not None:
                total += float(np.sum(p.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def step(self) -> None:
        scale = 1.0
        if self.max_grad_norm > 0:
            norm = self.grad_norm()
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / norm
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            if p.grad is None:
                raise MissingGradientError(f"parameter {name!r} has no gradient")
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad * scale if scale != 1.0 else p.grad
            p.data -= np.asarray(self.lr[p.group], dtype=p.dtype) * v

    def state(self) -> dict:
        return {VELOCITY_PREFIX + k: v for k, v in self.velocity.items()}

    def load_state(self, entries: dict) -> None:
        for name in self.velocity:
            key = VELOCITY_PREFIX + name
            if key in entries:
                arr = np.asarray(entries[key])
                if arr.shape != self.velocity[name].shape:
                    raise CheckpointError(f"velocity shape mismatch for {name!r}")
                self.velocity[name] = arr.astype(self.velocity[name].dtype).copy()


def _named(prefixed: list[tuple[str, Module]]) -> dict:
    out = {}
    for prefix, m in prefixed:
        for name, p in m.named_parameters().items():
            out[f"{prefix}.{name}"] = p
    return out


@dataclass
class TrainResult:
    models: ModelSet
    epoch_losses: list = field(default_factory=list)
    batch_losses: list = field(default_factory=list)
    log: list = field(default_factory=list)
    optimizer: SGD | None = None
    rng: np.random.Generator | None = None
    extra: dict = field(default_factory=dict)


def save_training_checkpoint(path, result: TrainResult, cfg: TrainConfig, epoch: int) -> None:
    entries = result.models.entries()
    if result.optimizer is not None:
        entries.update(result.optimizer.state())
    meta = result.models.meta()
    meta.update({"phase": cfg.phase, "epoch": epoch, "config": cfg.to_dict(),
                 "rng": result.rng.bit_generator.state if result.rng is not None else None})
    save_checkpoint(path, entries, meta)


def load_models(*paths) -> ModelSet:
    """Merge the model sets stored in several checkpoint files (later ones win)."""
    ms = ModelSet()
    for p in paths:
        if p:
            ms = ms.merge(ModelSet.from_checkpoint(load_checkpoint(p)))
    return ms


class _Run:
    """Bookkeeping shared by the phases: epochs, logging, resume, checkpoints."""

    def __init__(self, cfg: TrainConfig, models: ModelSet, scope: list, log: Callable | None,
                 ckpt_path: str | None, resume: Checkpoint | None):
        self.cfg = cfg
        self.ckpt_path = ckpt_path
        lr = {"new": cfg.lr_new, "pretrained": cfg.lr_pretrained}
        self.opt = SGD(_named(scope), lr, cfg.momentum, cfg.max_grad_norm)
        self.rng = np.random.default_rng(sample_seed(cfg.seed, cfg.phase, "run"))
        self.start = 1
        if resume is not None:
            if resume.meta.get("phase") != cfg.phase:
                raise CheckpointError(f"resume checkpoint is from phase "
                                      f"{resume.meta.get('phase')!r}, not {cfg.phase!r}")
            self.opt.load_state(resume.entries)
            if resume.meta.get("rng"):
                self.rng.bit_generator.state = resume.meta["rng"]
            self.start = int(resume.meta.get("epoch", 0)) + 1
        self.result = TrainResult(models, optimizer=self.opt, rng=self.rng)
        self._log = log

    def epochs(self):
        return range(self.start, self.cfg.epochs + 1)

    def batches(self, n: int):
        order = self.rng.permutation(n)
        bs = self.cfg.batch_size
        for i in range(0, n, bs):
            yield np.sort(order[i:i + bs])

    def step(self, loss: Tensor) -> float:
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        v = float(loss.item())
        self.result.batch_losses.append(v)
        return v

    def end_epoch(self, epoch: int, losses: list, f1: float | None = None) -> None:
        mean = float(np.mean(losses))
        self.result.epoch_losses.append(mean)
        line = f"epoch {epoch} phase {self.cfg.phase} loss {mean:.8g}"
        if f1 is not None:
            line += f" f1 {f1:.6f}"
        self.result.log.append(line)
        if self._log is not None:
            self._log(line)
        if self.ckpt_path:
            save_training_checkpoint(self.ckpt_path, self.result, self.cfg, epoch)

    def f1_due(self, epoch: int) -> bool:
        return bool(self.cfg.f1_every) and epoch % self.cfg.f1_every == 0


def _resume_models(resume: Checkpoint | None, models: ModelSet) -> ModelSet:
    if resume is None:
        return models
    return models.merge(ModelSet.from_checkpoint(resume))


# -- phase 1 -------------------------------------------------------------------

def pretrain_coarse(cfg: TrainConfig, train: PreparedSet, test: PreparedSet | None = None,
                    log: Callable | None = None, ckpt_path: str | None = None,
                    resume: Checkpoint | None = None) -> TrainResult:
    """Fit the coarse net to the resized one-hot labels with sigmoid BCE."""
    coarse = ICNN(coarse_config(cfg.coarse_widths, cfg.coarse_rounds, input_size=cfg.input_size,
                                fuse_width=cfg.coarse_fuse),
                  seed=sample_seed(cfg.seed, "coarse"))
    models = _resume_models(resume, ModelSet(coarse=coarse, canvas=train.canvas, window=cfg.window))
    run = _Run(cfg, models, [("coarse", models.coarse)], log, ckpt_path, resume)
    for epoch in run.epochs():
        losses = []
        for idx in run.batches(len(train)):
            z = coarse_scores(models, Tensor(train.resized[idx]), train=True)
            loss = coarse_loss(z, train.resized_onehot(idx))
            if not run.result.batch_losses:
                run.result.extra["initial_loss"] = float(loss.item())
            losses.append(run.step(loss))
        f1 = None
        if test is not None and run.f1_due(epoch):
            f1 = coarse_f1(models, test).overall[2]
        run.end_epoch(epoch, losses, f1)
    return run.result


# -- phase 2 -------------------------------------------------------------------

def occlusion_masks(rng: np.random.Generator, batch: int, prob: float) -> np.ndarray | None:
    """(B, 9) channel masks: with probability ``prob`` a random part is hidden."""
    if prob <= 0:
        return None
    mask = np.zeros((batch, NUM_CLASSES), bool)
    hide = rng.random(batch) < prob
    which = rng.integers(0, NUM_PARTS, batch)
    for b in range(batch):
        if hide[b]:
            mask[b, list(PARTS[which[b]].classes)] = True
    return mask


def _rough_cache(models: ModelSet, data: PreparedSet, bs: int = 16) -> np.ndarray:
    out = np.empty((len(data), NUM_CLASSES) + data.resized.shape[2:], data.resized.dtype)
    with no_grad():
        for i in range(0, len(data), bs):
            out[i:i + bs] = coarse_scores(models, Tensor(data.resized[i:i + bs])).data
    return out


def locnet_center_error(models: ModelSet, data: PreparedSet, rough: np.ndarray | None = None,
                        occlude: np.ndarray | None = None, bs: int = 16) -> np.ndarray:
    """Per-part window-centre error (N, parts) in canvas pixels, NaN for absent parts."""
    rough = _rough_cache(models, data) if rough is None else rough
    out = []
    with no_grad():
        for i in range(0, len(data), bs):
            occ = None if occlude is None else occlude[i:i + bs]
            th = localize(models, Tensor(rough[i:i + bs]), occlude=occ).data
            out.append(center_errors(th, data.theta_hat[i:i + bs], data.canvas,
                                     data.theta_valid[i:i + bs]))
    return np.concatenate(out)


def pretrain_locnet(cfg: TrainConfig, train: PreparedSet, models: ModelSet,
                    test: PreparedSet | None = None, log: Callable | None = None,
                    ckpt_path: str | None = None, resume: Checkpoint | None = None) -> TrainResult:
    """Regress theta-hat from the frozen coarse net's scores with Smooth L1."""
    if models.coarse is None:
        raise CheckpointError("coarse checkpoint required")
    loc = LocNet(LocNetConfig(input_size=cfg.input_size, widths=cfg.loc_widths,
                              input_mode=cfg.loc_input), seed=sample_seed(cfg.seed, "locnet"))
    models = _resume_models(resume, ModelSet(coarse=models.coarse, locnet=loc,
                                             canvas=train.canvas, window=cfg.window))
    models.coarse.requires_grad_(False)
    run = _Run(cfg, models, [("locnet", models.locnet)], log, ckpt_path, resume)
    rough = _rough_cache(models, train)
    test_rough = _rough_cache(models, test) if test is not None else None
    target = train.theta_hat.astype(rough.dtype)
    weight = train.theta_valid[:, :, None, None].astype(rough.dtype)
    for epoch in run.epochs():
        losses = []
        for idx in run.batches(len(train)):
            occ = occlusion_masks(run.rng, len(idx), cfg.occlusion_prob)
            theta = localize(models, Tensor(rough[idx]), train=True, occlude=occ)
            losses.append(run.step(smooth_l1(theta, target[idx], weight[idx])))
        f1 = None
        if test is not None and run.f1_due(epoch):
            err = locnet_center_error(models, test, test_rough)
            run.result.extra.setdefault("center_error", []).append(float(np.nanmean(err)))
        run.end_epoch(epoch, losses, f1)
    models.coarse.requires_grad_(True)
    return run.result


# -- phase 3 -------------------------------------------------------------------

def _theta_cache(models: ModelSet, data: PreparedSet, bs: int = 16) -> np.ndarray:
    rough = _rough_cache(models, data, bs)
    out = []
    with no_grad():
        for i in range(0, len(data), bs):
            out.append(localize(models, Tensor(rough[i:i + bs])).data)
    return np.concatenate(out)


def train_end_to_end(cfg: TrainConfig, train: PreparedSet, models: ModelSet,
                     test: PreparedSet | None = None, log: Callable | None = None,
                     ckpt_path: str | None = None, resume: Checkpoint | None = None) -> TrainResult:
    """Fine nets on STN crops; unless ``cfg.freeze_stn`` the loss also reaches theta,
    the localisation net and the coarse net (at the lower learning rate).

    Batch-norm statistics of the pre-trained nets stay frozen (eval mode) so
    the starting point matches the frozen variant exactly.  Fine targets are
    cropped from the padded labels with the current theta, as constants.
    """
    if models.coarse is None or models.locnet is None:
        raise CheckpointError("coarse and locnet checkpoints required")
    fine = models.fine if set(models.fine) == {"brow", "eye", "nose", "mouth"} else \
        new_fine_models(cfg.fine_widths, cfg.fine_rounds, cfg.window, cfg.seed,
                        cfg.fine_fuse)
    models = ModelSet(models.coarse, models.locnet, dict(fine), train.canvas, cfg.window)
    models = _resume_models(resume, models)
    models.coarse.set_group("pretrained")
    models.locnet.set_group("pretrained")
    for m in models.fine.values():
        m.set_group("new")
    scope = [(f"fine.{k}", m) for k, m in models.fine.items()]
    frozen_theta = None
    if cfg.freeze_stn:
        models.coarse.requires_grad_(False)
        models.locnet.requires_grad_(False)
        frozen_theta = _theta_cache(models, train)
    else:
        models.coarse.requires_grad_(True)
        models.locnet.requires_grad_(True)
        scope = [("coarse", models.coarse), ("locnet", models.locnet)] + scope
    run = _Run(cfg, models, scope, log, ckpt_path, resume)
    grad_norms = run.result.extra.setdefault("coarse_grad_norm", [])
    for epoch in run.epochs():
        losses = []
        for idx in run.batches(len(train)):
            if frozen_theta is not None:
                theta = Tensor(frozen_theta[idx])
            else:
                z = coarse_scores(models, Tensor(train.resized[idx]), train=False)
                theta = localize(models, z, train=False)
            patches = crop_parts(Tensor(train.padded[idx]), theta, cfg.window)
            targets = crop_part_targets(onehot(train.labels_padded[idx]), theta, cfg.window)
            preds = fine_scores(models, patches, train=True)
            losses.append(run.step(system_loss(preds, targets)))
            if frozen_theta is None:
                grad_norms.append(float(np.sqrt(sum(
                    float(np.sum(p.grad.astype(np.float64) ** 2))
                    for p in models.coarse.parameters()))))
        f1 = None
        if test is not None and run.f1_due(epoch):
            f1 = evaluate(models, test).report.overall[2]
        run.end_epoch(epoch, losses, f1)
    models.coarse.requires_grad_(True)
    models.locnet.requires_grad_(True)
    return run.result
