"""Tensor contract, numeric oracles and gradient checking.

Every trainable block in the package is a ``torch.nn.Module``; autograd is
delegated to torch.  This module adds the pieces torch does not give us in
the shape we need: a scalar bilinear sampler with the pixel-center
convention used throughout, a vectorised differentiable counterpart, a
central-difference gradient oracle, and a finite-value guard.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F


class InvalidInputError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def check_finite(t: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {name}")
    return t


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def bilinear_sample(feature_map, x: float, y: float) -> np.ndarray:
    """Sample a C×H×W map at continuous ``(x, y)``.

    Pixel ``(row i, col j)`` has its center at ``(x=j, y=i)``.  Coordinates
    outside ``[0, W-1] × [0, H-1]`` are clamped to the border.
    """
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim == 2:
        fm = fm[None]
    if fm.ndim != 3 or fm.size == 0:
        raise InvalidInputError("feature map must be a non-empty C×H×W array")
    _, h, w = fm.shape
    x = min(max(float(x), 0.0), w - 1.0)
    y = min(max(float(y), 0.0), h - 1.0)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    lx, ly = x - x0, y - y0
    return ((1 - ly) * ((1 - lx) * fm[:, y0, x0] + lx * fm[:, y0, x1])
            + ly * ((1 - lx) * fm[:, y1, x0] + lx * fm[:, y1, x1]))


def sample_points(feature_map: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """Differentiable batched version of :func:`bilinear_sample`.

    ``feature_map`` is C×H×W, ``xs``/``ys`` share any shape S; returns C×S.
    Gradients flow to ``feature_map`` only.
    """
    if feature_map.numel() == 0:
        raise InvalidInputError("empty feature map")
    c, h, w = feature_map.shape
    shape = xs.shape
    x = xs.reshape(-1).clamp(0, w - 1)
    y = ys.reshape(-1).clamp(0, h - 1)
    x0 = x.floor().long()
    y0 = y.floor().long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    lx = (x - x0.to(x.dtype)).to(feature_map.dtype)
    ly = (y - y0.to(y.dtype)).to(feature_map.dtype)
    flat = feature_map.reshape(c, h * w)
    v00 = flat[:, y0 * w + x0]
    v01 = flat[:, y0 * w + x1]
    v10 = flat[:, y1 * w + x0]
    v11 = flat[:, y1 * w + x1]
    out = (1 - ly) * ((1 - lx) * v00 + lx * v01) + ly * ((1 - lx) * v10 + lx * v11)
    return out.reshape(c, *shape)


def resize_bilinear(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Half-pixel bilinear resize (N×C×H×W or C×H×W) with border clamping."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
    if tuple(x.shape[-2:]) == tuple(size):
        out = x
    else:
        out = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return out[0] if squeeze else out


def resize_nearest(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
    out = F.interpolate(x, size=size, mode="nearest")
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    parameter_name: str
    max_relative_error: float
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return bool(self.max_relative_error < self.tolerance)

    def __str__(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] {self.parameter_name}: max rel err {self.max_relative_error:.3e}"


def finite_difference_grad(fn: Callable[[torch.Tensor], torch.Tensor], input: torch.Tensor,
                           epsilon: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of a scalar-valued ``fn`` at ``input``."""
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")
    x = input.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + epsilon
            fp = _scalar(fn(x))
            flat[i] = orig - epsilon
            fm = _scalar(fn(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * epsilon)
    return grad


def _scalar(v) -> float:
    if isinstance(v, torch.Tensor):
        if v.numel() != 1:
            raise InvalidInputError(f"fn must return a scalar, got shape {tuple(v.shape)}")
        return float(v.item())
    return float(v)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> float:
    a = analytic.detach().double()
    n = numeric.detach().double()
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
    return float(((a - n).abs() / denom).max()) if a.numel() else 0.0


def gradcheck_module(name: str, module: torch.nn.Module, inputs: Iterable[torch.Tensor],
                     forward: Callable | None = None, epsilon: float = 1e-6,
                     tolerance: float = 1e-4, seed: int = 0,
                     check_inputs: bool = True, floor: float = 1e-6) -> list[GradCheckReport]:
    """Compare autograd against central differences for inputs and parameters.

    The module output is reduced to a scalar by a fixed random projection so
    every output element contributes.  Runs in float64.
    """
    module = module.double()
    inputs = [t.detach().double() for t in inputs]
    forward = forward or (lambda m, *xs: m(*xs))
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        probe = forward(module, *inputs)
    weights = _projection_like(probe, gen)

    def scalar_out(*xs):
        return _project(forward(module, *xs), weights)

    reports = []
    if check_inputs:
        for k, x in enumerate(inputs):
            if not x.is_floating_point():
                continue
            xr = x.clone().requires_grad_(True)
            args = list(inputs)
            args[k] = xr
            (g,) = torch.autograd.grad(scalar_out(*args), xr, allow_unused=True)
            g = torch.zeros_like(x) if g is None else g

            def f(v, k=k):
                a = list(inputs)
                a[k] = v
                return scalar_out(*a)

            num = finite_difference_grad(f, x, epsilon)
            reports.append(GradCheckReport(f"{name}:input{k}", relative_error(g, num, floor), tolerance))
    for pname, p in module.named_parameters():
        if not p.requires_grad:
            continue
        module.zero_grad()
        out = scalar_out(*inputs)
        (g,) = torch.autograd.grad(out, p, allow_unused=True)
        g = torch.zeros_like(p) if g is None else g

        def f(v, p=p):
            with torch.no_grad():
                saved = p.detach().clone()
                p.copy_(v)
                try:
                    return scalar_out(*inputs)
                finally:
                    p.copy_(saved)

        num = finite_difference_grad(f, p.detach(), epsilon)
        reports.append(GradCheckReport(f"{name}:{pname}", relative_error(g, num, floor), tolerance))
    return reports


def _projection_like(out, gen):
    if isinstance(out, torch.Tensor):
        return torch.randn(out.shape, generator=gen, dtype=torch.float64)
    return [_projection_like(o, gen) for o in out]


def _project(out, weights):
    if isinstance(out, torch.Tensor):
        return (out * weights).sum()
    return sum(_project(o, w) for o, w in zip(out, weights))


# ---------------------------------------------------------------------------
# primitive suite
# ---------------------------------------------------------------------------

def _layer_norm(x):
    return F.layer_norm(x, x.shape[-1:])


def _batch_norm(x):
    return F.batch_norm(x, None, None, training=True, momentum=0.1, eps=1e-5)


PRIMITIVES: dict[str, Callable] = {
    "conv2d": lambda x, w, stride=1, padding=0: F.conv2d(x, w, stride=stride, padding=padding),
    "batch_norm": _batch_norm,
    "relu": F.relu,
    "sigmoid": torch.sigmoid,
    "softmax": lambda x, dim=-1: torch.softmax(x, dim=dim),
    "global_avg_pool": lambda x: x.mean(dim=(-2, -1), keepdim=True),
    "global_max_pool": lambda x: x.amax(dim=(-2, -1), keepdim=True),
    "max_pool": lambda x, k=3, stride=1, padding=1: F.max_pool2d(x, k, stride, padding),
    "resize_nearest": lambda x, size: resize_nearest(x, size),
    "resize_bilinear": lambda x, size: resize_bilinear(x, size),
    "matmul": torch.matmul,
    "layer_norm": _layer_norm,
    "add": torch.add,
    "mul": torch.mul,
}


def primitive_suite() -> set[str]:
    """Names of the differentiable primitives every block is built from."""
    return set(PRIMITIVES)
