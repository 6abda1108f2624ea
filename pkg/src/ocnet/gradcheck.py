"""Double-precision central finite-difference checks.

Each check builds a small instance, projects the output onto a fixed random
direction to get a scalar, and compares backprop gradients against central
differences for every input and parameter group. The reported error for a
group is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .context import AspOC, BaseOC, ChannelPlan, GlobalPoolHead, PlainHead, PyramidOC
from .nn import Module
from .ocp import ObjectContextPooling, ocp_forward
from .tensor import Tensor, concat_channels, log_softmax, matmul, no_grad, softmax_rows
from .training import class_balanced_ce

DEFAULT_STEP = 1e-4
# composite heads contain ReLU; a smaller step keeps differences off the kinks
MODULE_STEP = 1e-6


@dataclass
class GradReport:
    selector: str
    errors: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def lines(self) -> list[str]:
        out = [f"{self.selector}/{group}\t{err:.3e}\t{'ok' if err < self.tolerance else 'FAIL'}" for group, err in self.errors.items()]
        out.append(f"{self.selector}\tmax {self.max_error:.3e}\ttol {self.tolerance:.0e}\t{'PASS' if self.passed else 'FAIL'}")
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(
    forward: Callable[[], Tensor],
    groups: dict[str, Tensor],
    rng: np.random.Generator,
    step: float = DEFAULT_STEP,
) -> dict[str, float]:
    """Compare backprop against central differences for each named tensor."""
    for t in groups.values():
        t.requires_grad = True
        t.grad = None
    out = forward()
    direction = rng.standard_normal(out.shape)

    def scalar() -> float:
        with no_grad():
            return float(np.sum(forward().data * direction))

    loss = (out * Tensor(direction)).sum()
    loss.backward()
    errors = {}
    for name, t in groups.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = scalar()
            flat[i] = orig - step
            down = scalar()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
        errors[name] = relative_error(analytic, numeric)
    return errors


def module_groups(module: Module, max_groups: int = 0) -> dict[str, Tensor]:
    params = dict(module.named_parameters())
    if max_groups:
        params = dict(list(params.items())[:max_groups])
    return params


def _x(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, dtype=np.float64)


# -- individual checks ------------------------------------------------------


def _matmul(rng):
    a, b = _x(rng, 4, 3), _x(rng, 3, 5)
    return check_gradients(lambda: matmul(a, b), {"a": a, "b": b}, rng), 1e-6


def _softmax(rng):
    m = _x(rng, 5, 7)
    return check_gradients(lambda: softmax_rows(m), {"input": m}, rng), 1e-6


def _log_softmax(rng):
    m = _x(rng, 2, 4, 3, 3)
    return check_gradients(lambda: log_softmax(m, axis=1), {"input": m}, rng), 1e-6


def _concat(rng):
    a, b = _x(rng, 2, 3, 4, 4), _x(rng, 2, 5, 4, 4)
    return check_gradients(lambda: concat_channels([a, b]), {"a": a, "b": b}, rng), 1e-6


def _conv(rng, kernel, dilation, size, stride=1):
    x = _x(rng, 2, 3, size, size)
    w = _x(rng, 4, 3, kernel, kernel, scale=0.3)
    b = _x(rng, 4)
    pad = dilation * (kernel // 2)
    fwd = lambda: nn.conv2d(x, w, b, stride=stride, padding=pad, dilation=dilation)  # noqa: E731
    return check_gradients(fwd, {"input": x, "weight": w, "bias": b}, rng), 1e-6


def _conv2d(rng):
    errors = {}
    for kernel, dil, size, stride in [(1, 1, 5, 1), (3, 1, 6, 1), (3, 1, 7, 2), (3, 2, 7, 1), (3, 4, 9, 1)]:
        errs, _ = _conv(rng, kernel, dil, size, stride)
        errors.update({f"k{kernel}d{dil}s{stride}/{k}": v for k, v in errs.items()})
    return errors, 1e-6


def _conv2d_atrous(rng):
    errors = {}
    for dil in (12, 24, 36):
        x = _x(rng, 1, 2, 2 * dil + 3, 2 * dil + 3)
        w = _x(rng, 2, 2, 3, 3, scale=0.3)
        fwd = lambda d=dil: nn.conv2d(x, w, None, padding=d, dilation=d)  # noqa: E731
        errs = check_gradients(fwd, {"weight": w}, rng)
        errors.update({f"d{dil}/{k}": v for k, v in errs.items()})
    return errors, 1e-6


def _batchnorm(rng):
    x = _x(rng, 3, 4, 3, 3)
    scale, shift = _x(rng, 4), _x(rng, 4)
    rm, rv = np.zeros(4), np.ones(4)
    fwd = lambda: nn.batchnorm(x, scale, shift, rm.copy(), rv.copy(), training=True)  # noqa: E731
    errors = check_gradients(fwd, {"input": x, "scale": scale, "shift": shift}, rng)
    fwd_eval = lambda: nn.batchnorm(x, scale, shift, rm + 0.1, rv + 0.5, training=False)  # noqa: E731
    errors.update({f"eval/{k}": v for k, v in check_gradients(fwd_eval, {"input": x}, rng).items()})
    return errors, 1e-4


def _upsample(rng):
    x = _x(rng, 2, 2, 3, 4)
    errors = check_gradients(lambda: nn.bilinear_upsample(x, 3), {"input": x}, rng)
    errors.update({f"resize/{k}": v for k, v in check_gradients(lambda: nn.resize_bilinear(x, 5, 7), {"input": x}, rng).items()})
    return errors, 1e-6


def _avgpool(rng):
    x = _x(rng, 2, 3, 4, 5)
    return check_gradients(lambda: nn.global_avg_pool(x), {"input": x}, rng), 1e-6


def _relu(rng):
    x = _x(rng, 4, 6)
    x.data[np.abs(x.data) < 0.05] += 0.1  # keep samples off the kink
    return check_gradients(lambda: x.relu(), {"input": x}, rng), 1e-6


def _ce(rng):
    logits = _x(rng, 2, 3, 4, 4)
    labels = rng.integers(0, 3, size=(2, 4, 4))
    labels[0, 0, 0] = 255
    weights = [1.5, 0.7, 1.1]
    fwd = lambda: class_balanced_ce(logits, labels, weights).reshape(1)  # noqa: E731
    return check_gradients(fwd, {"logits": logits}, rng), 1e-6


def _ocp(rng):
    m = ObjectContextPooling(4, 3, 5, rng, tied_init=False).to(np.float64)
    for _, p in m.named_parameters():
        p.data *= 0.5
    x = _x(rng, 2, 4, 3, 4)
    groups = {"input": x, **module_groups(m)}
    return check_gradients(lambda: ocp_forward(x, m)[0], groups, rng), 1e-4


def _module_check(module: Module, x: Tensor, rng):
    module.to(np.float64).train()
    groups = {"input": x, **module_groups(module)}
    return check_gradients(lambda: module(x), groups, rng, step=MODULE_STEP), 1e-4


def _base_oc(rng):
    return _module_check(BaseOC(ChannelPlan(6, 4, 4), rng), _x(rng, 2, 6, 5, 5), rng)


def _pyramid_oc(rng):
    return _module_check(PyramidOC(ChannelPlan(6, 3, 4), rng, scales=(1, 2, 3)), _x(rng, 2, 6, 6, 6), rng)


def _asp_oc(rng):
    return _module_check(AspOC(ChannelPlan(5, 3, 4), rng, rates=(1, 2, 3)), _x(rng, 2, 5, 6, 6), rng)


def _baseline(rng):
    return _module_check(PlainHead(ChannelPlan(4, 3, 3), rng), _x(rng, 2, 4, 4, 4), rng)


def _gp(rng):
    return _module_check(GlobalPoolHead(ChannelPlan(4, 3, 3), rng), _x(rng, 2, 4, 4, 4), rng)


CHECKS: dict[str, Callable] = {
    "matmul": _matmul,
    "softmax": _softmax,
    "log-softmax": _log_softmax,
    "concat": _concat,
    "relu": _relu,
    "conv2d": _conv2d,
    "conv2d-atrous": _conv2d_atrous,
    "batchnorm": _batchnorm,
    "upsample": _upsample,
    "avgpool": _avgpool,
    "ce": _ce,
    "ocp": _ocp,
    "base-oc": _base_oc,
    "pyramid-oc": _pyramid_oc,
    "asp-oc": _asp_oc,
    "baseline": _baseline,
    "gp": _gp,
}


def run_check(selector: str, seed: int = 0) -> GradReport:
    if selector not in CHECKS:
        raise KeyError(selector)
    errors, tol = CHECKS[selector](np.random.default_rng(seed))
    return GradReport(selector, errors, tol)
