"""Central finite-difference gradient checks and the per-op check suites."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .losses import bce_mean, smooth_l1, system_loss
from .ops import BatchNormState
from .stn import LocNet, LocNetConfig, crop_parts, locnet_forward
from .tensor import Tensor, default_dtype

__all__ = ["grad_check", "CheckResult", "SUITES", "run_suites"]


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-6,
               max_elements: int | None = None, seed: int = 0,
               scale_analytic: float = 1.0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` must return a scalar.  Every input with ``requires_grad``
    is checked, element by element (a seeded subset when ``max_elements`` is
    set).  The error per element is ``|a - n| / (|a| + |n| + 1e-12)``.
    ``scale_analytic`` exists only to let tests corrupt the analytic side.
    """
    if not 1e-6 <= step <= 1e-4:
        raise ValueError("step must lie in [1e-6, 1e-4]")
    for x in inputs:
        x.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar objective")
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for x in inputs:
        if not x.requires_grad:
            continue
        analytic = (np.zeros_like(x.data) if x.grad is None else x.grad.copy()) * scale_analytic
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, max_elements, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn(*inputs).data)
            flat[i] = orig - step
            fm = float(fn(*inputs).data)
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - num) / (abs(a) + abs(num) + 1e-12))
    return worst


@dataclass
class CheckResult:
    suite: str
    op: str
    error: float
    bound: float

    @property
    def ok(self) -> bool:
        return self.error <= self.bound

    def line(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return f"{self.suite:7s} {self.op:24s} {self.error:.3e} (bound {self.bound:.0e}) {status}"


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _weighted(rng, shape) -> Callable[[Tensor], Tensor]:
    # random projection so no gradient entry is structurally zero
    r = Tensor(rng.normal(size=shape))
    return lambda y: (y * r).sum()


def _tensor_cases(rng):
    x = _t(rng, 3, 5)
    w = _t(rng, 4, 5)
    b = _t(rng, 4)
    proj = _weighted(rng, (3, 4))
    yield "linear", 1e-8, lambda x, w, b: proj(ops.linear(x, w, b)), [x, w, b]

    x = _t(rng, 2, 3, 8, 8)
    w = _t(rng, 4, 3, 3, 3)
    b = _t(rng, 4)
    proj = _weighted(rng, (2, 4, 8, 8))
    yield "conv2d", 1e-6, lambda x, w, b: proj(ops.conv2d(x, w, b)), [x, w, b]

    x = _t(rng, 2, 3, 6, 6)
    w = _t(rng, 2, 3, 3, 3)
    yield "conv2d_relu_sum", 1e-6, lambda x, w: ops.relu(ops.conv2d(x, w)).sum(), [x, w]

    x = _t(rng, 2, 2, 6, 6)
    proj = _weighted(rng, (2, 2, 3, 3))
    yield "maxpool2d", 1e-6, lambda x: proj(ops.maxpool2d(x)), [x]

    x = _t(rng, 2, 2, 7, 6)
    proj = _weighted(rng, (2, 2, 4, 3))
    yield "avgpool2d", 1e-6, lambda x: proj(ops.avgpool2d(x)), [x]

    x = _t(rng, 1, 2, 3, 3)
    proj = _weighted(rng, (1, 2, 6, 6))
    yield "upsample_nearest", 1e-6, lambda x: proj(ops.upsample_nearest(x, 2)), [x]

    x = _t(rng, 3, 2, 4, 4)
    g = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
    be = _t(rng, 2)
    proj = _weighted(rng, (3, 2, 4, 4))

    def bn(x, g, be):
        return proj(ops.batchnorm2d(x, g, be, BatchNormState(2), train=True))

    yield "batchnorm2d", 1e-5, bn, [x, g, be]

    x = _t(rng, 2, 4, 3, 3)
    proj = _weighted(rng, (2, 4, 3, 3))
    yield "softmax_channels", 1e-6, lambda x: proj(ops.softmax_channels(x)), [x]
    yield "sigmoid", 1e-6, lambda x: proj(ops.sigmoid(x)), [x]

    a, c = _t(rng, 1, 2, 3, 3), _t(rng, 1, 3, 3, 3)
    proj = _weighted(rng, (1, 5, 3, 3))
    yield "concat_channels", 1e-6, lambda a, c: proj(ops.concat_channels([a, c])), [a, c]

    # sample points at half-integer pixel positions, away from bilinear kinks
    img = _t(rng, 2, 2, 7, 9)
    px = rng.integers(0, 8, (2, 4, 5)) + 0.5
    py = rng.integers(0, 6, (2, 4, 5)) + 0.5
    grid = Tensor(np.stack([2 * px / 8 - 1, 2 * py / 6 - 1], axis=-1), requires_grad=True)
    proj = _weighted(rng, (2, 2, 4, 5))
    yield "grid_sample", 1e-5, lambda i, g: proj(ops.grid_sample_bilinear(i, g)), [img, grid]


def _stn_cases(rng):
    img = _t(rng, 2, 3, 12, 12)
    theta = np.zeros((2, 6, 2, 3))
    theta[..., 0, 0] = rng.uniform(0.2, 0.5, (2, 6))
    theta[..., 1, 1] = rng.uniform(0.2, 0.5, (2, 6))
    theta[..., :, 2] = rng.uniform(-0.4, 0.4, (2, 6, 2))
    th = Tensor(theta, requires_grad=True)
    proj = _weighted(rng, (2, 6, 3, 5, 5))
    yield "crop_parts", 1e-5, lambda i, t: proj(crop_parts(i, t, 5)), [img, th]

    cfg = LocNetConfig(input_size=16, widths=(2, 2, 3, 3, 3, 3, 4, 4))
    net = LocNet(cfg, seed=1)
    net.fc_w.data = rng.normal(0.0, 0.3, net.fc_w.shape)
    image = Tensor(rng.uniform(0, 1, (2, 3, 12, 12)))
    rough = _t(rng, 2, 9, 16, 16)
    proj = _weighted(rng, (2, 6, 3, 5, 5))

    def composite(rough, *params):
        return proj(crop_parts(image, locnet_forward(net, rough, train=True), 5))

    yield "locnet_crop", 1e-4, composite, [rough] + net.parameters()


def _loss_cases(rng):
    x = _t(rng, 2, 3, 4, 4)
    t = (rng.random((2, 3, 4, 4)) > 0.5).astype(np.float64)
    yield "bce_mean", 1e-6, lambda x: bce_mean(x, t), [x]

    d = rng.uniform(0.1, 0.8, (2, 6, 2, 3)) * rng.choice([-1, 1], (2, 6, 2, 3))
    d[0, 0] *= 3.0  # some elements on the linear branch
    th = Tensor(d, requires_grad=True)
    yield "smooth_l1", 1e-6, lambda th: smooth_l1(th, np.zeros((2, 6, 2, 3))), [th]

    preds = [_t(rng, 2, 3, 3, 3), _t(rng, 2, 2, 3, 3)]
    targs = [(rng.random((2, 3, 3, 3)) > 0.5).astype(float),
             (rng.random((2, 2, 3, 3)) > 0.5).astype(float)]
    yield "system_loss", 1e-6, lambda a, b: system_loss([a, b], targs), preds


SUITES = {"tensor": _tensor_cases, "stn": _stn_cases, "losses": _loss_cases}


def run_suites(names: Sequence[str] = ("tensor", "stn", "losses"), seed: int = 0,
               corrupt: str | None = None, log: Callable | None = None) -> list[CheckResult]:
    """Run the named suites in 64-bit mode; ``corrupt`` names an op whose analytic
    gradient is deliberately scaled (harness self-test)."""
    results = []
    with default_dtype(np.float64):
        for suite in names:
            rng = np.random.default_rng(seed)
            for op, bound, fn, inputs in SUITES[suite](rng):
                err = grad_check(fn, inputs, step=1e-5,
                                 max_elements=60 if op == "locnet_crop" else None,
                                 scale_analytic=1.5 if op == corrupt else 1.0)
                res = CheckResult(suite, op, err, bound)
                results.append(res)
                if log is not None:
                    log(res.line())
    return results
