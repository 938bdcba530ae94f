"""Interlinked CNN: four fully convolutional branches at scales 1, 1/2, 1/4, 1/8.

After every round each branch is concatenated with its neighbours' features
(nearest-upsampled from the coarser branch, max-pooled from the finer one).
The final branch outputs are upsampled to full resolution, concatenated and
mapped to raw label scores by two convolutions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .module import ConvBNReLU, Module
from .ops import concat_channels, conv2d, maxpool2d, upsample_nearest
from .tensor import Tensor

__all__ = ["ICNNConfig", "ICNN", "icnn_init", "icnn_forward", "coarse_config", "fine_config",
           "expected_parameter_count"]


@dataclass(frozen=True)
class ICNNConfig:
    in_channels: int = 3
    out_channels: int = 9
    widths: tuple[int, int, int, int] = (24, 32, 40, 48)
    rounds: int = 3
    input_size: int = 128
    fuse_width: int = 0  # 0 -> widths[0]
    interlink: bool = True

    def __post_init__(self):
        if len(self.widths) != 4:
            raise ValueError("ICNNConfig needs exactly 4 branch widths")
        if any(w < 1 for w in self.widths):
            raise ValueError("branch widths must be positive")
        if self.rounds < 1:
            raise ValueError("interlink rounds must be >= 1")
        if self.out_channels < 2:
            raise ValueError("out_channels must be >= 2")
        if self.in_channels < 1 or self.input_size < 8:
            raise ValueError("invalid input channels or size")

    @property
    def hidden(self) -> int:
        return self.fuse_width or self.widths[0]

    def branch_inputs(self, rnd: int) -> list[int]:
        """Input channel count of every branch at interlink round ``rnd``."""
        w = self.widths
        if rnd == 0:
            return [self.in_channels] * 4
        if not self.interlink:
            return list(w)
        return [w[b] + (w[b + 1] if b < 3 else 0) + (w[b - 1] if b > 0 else 0) for b in range(4)]


def coarse_config(widths=(24, 32, 40, 48), rounds: int = 3, input_size: int = 128,
                  **kw) -> ICNNConfig:
    return ICNNConfig(in_channels=3, out_channels=9, widths=tuple(widths), rounds=rounds,
                      input_size=input_size, **kw)


def fine_config(out_channels: int, widths=(24, 32, 40, 48), rounds: int = 3,
                input_size: int = 81, **kw) -> ICNNConfig:
    return ICNNConfig(in_channels=3, out_channels=out_channels, widths=tuple(widths),
                      rounds=rounds, input_size=input_size, **kw)


def expected_parameter_count(cfg: ICNNConfig) -> int:
    """Closed-form parameter count (conv weights, BN affine, output bias)."""
    total = 0
    for r in range(cfg.rounds + 1):  # rounds + the per-branch output conv
        for cin, cout in zip(cfg.branch_inputs(r), cfg.widths):
            total += cout * cin * 9 + 2 * cout
    total += cfg.hidden * sum(cfg.widths) * 9 + 2 * cfg.hidden
    total += cfg.out_channels * cfg.hidden * 9 + cfg.out_channels
    return total


class ICNN(Module):
    def __init__(self, config: ICNNConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        cfg = config
        self.rounds: list[list[ConvBNReLU]] = []
        for r in range(cfg.rounds + 1):
            cins = cfg.branch_inputs(r)
            self.rounds.append([ConvBNReLU(self, f"b{b}.r{r}", cins[b], cfg.widths[b], rng)
                                for b in range(4)])
        self.fuse = ConvBNReLU(self, "fuse", sum(cfg.widths), cfg.hidden, rng)
        # small output init so scores start near 0 (BCE near ln 2)
        std = 0.1 * np.sqrt(2.0 / (cfg.hidden * 9))
        self.out_w = self.add_param("out.conv.weight",
                                    rng.normal(0.0, std, (cfg.out_channels, cfg.hidden, 3, 3)))
        self.out_b = self.add_param("out.conv.bias", np.zeros(cfg.out_channels))

    def __call__(self, image: Tensor, train: bool = True) -> Tensor:
        return icnn_forward(self, image, train)


def icnn_init(config: ICNNConfig, seed: int) -> ICNN:
    return ICNN(config, seed)


def _fit(x: Tensor, size: tuple[int, int]) -> Tensor:
    if x.shape[2:] == size:
        return x
    return x[:, :, :size[0], :size[1]]


def icnn_forward(model: ICNN, image: Tensor, train: bool = True) -> Tensor:
    """Raw label scores (B, L, S, S) for an image batch (B, C, S, S)."""
    cfg = model.config
    if image.ndim != 4 or image.shape[1] != cfg.in_channels:
        raise ValueError(f"icnn: expected (B, {cfg.in_channels}, S, S), got {image.shape}")
    if image.shape[2] != cfg.input_size or image.shape[3] != cfg.input_size:
        raise ValueError(f"icnn: expected spatial size {cfg.input_size}, got {image.shape[2:]}")

    inputs = [image]
    for _ in range(3):
        inputs.append(maxpool2d(inputs[-1], ceil_mode=True))
    sizes = [x.shape[2:] for x in inputs]

    feats = inputs
    for r in range(cfg.rounds):
        h = [model.rounds[r][b](feats[b], train) for b in range(4)]
        if not cfg.interlink:
            feats = h
            continue
        feats = []
        for b in range(4):
            parts = [h[b]]
            if b < 3:
                parts.append(_fit(upsample_nearest(h[b + 1], 2), sizes[b]))
            if b > 0:
                parts.append(maxpool2d(h[b - 1], ceil_mode=True))
            feats.append(concat_channels(parts))

    last = [model.rounds[cfg.rounds][b](feats[b], train) for b in range(4)]
    full = [last[0]] + [_fit(upsample_nearest(last[b], 2 ** b), sizes[0]) for b in range(1, 4)]
    x = model.fuse(concat_channels(full), train)
    return conv2d(x, model.out_w, model.out_b)
