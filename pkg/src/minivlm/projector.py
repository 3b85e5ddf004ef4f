"""Cross-modal connectors mapping visual features into LM embedding space.

Five variants are provided:

* ``linear`` -- one affine map, token count preserved.
* ``mlp``    -- affine, GELU, affine; token count preserved.
* ``ldp``    -- pointwise MLP followed by two depthwise-conv blocks; the
  second uses stride 2 and keeps a quarter of the tokens.
* ``ldpv2``  -- pointwise MLP, average pooling to the target grid, then a
  residual depthwise-conv refinement.
* ``xdp``    -- concatenate every pool_h x pool_w window of the feature grid
  into one vector, then affine, Mish, affine.
"""

from __future__ import annotations

import math
from typing import List, Tuple

import numpy as np

from . import nn
from . import tensor as T
from .config import ProjectorConfig
from .tensor import Tensor
from .vision import VisualFeatures


class UnsupportedTokenCount(ValueError):
    pass


def _divisors(n: int) -> List[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def valid_token_counts(grid_side: int) -> List[int]:
    """All token counts reachable by tiling a square grid with a rectangular window."""
    ds = _divisors(grid_side)
    return sorted({(grid_side // a) * (grid_side // b) for a in ds for b in ds})


def merge_plan(grid_side: int, target_tokens: int) -> Tuple[int, int]:
    """Pooling window (pool_h, pool_w) that turns a grid_side^2 grid into target_tokens.

    Among all windows whose sides divide ``grid_side``, the least elongated one
    wins; ties go to the taller window.
    """
    best = None
    for ph in _divisors(grid_side):
        for pw in _divisors(grid_side):
            if (grid_side // ph) * (grid_side // pw) != target_tokens:
                continue
            key = (max(ph, pw) / min(ph, pw), -ph)
            if best is None or key < best[0]:
                best = (key, (ph, pw))
    if best is None:
        raise UnsupportedTokenCount(
            f"cannot reach {target_tokens} tokens from a {grid_side}x{grid_side} grid; "
            f"valid counts: {valid_token_counts(grid_side)}"
        )
    return best[1]


def merge_windows(x: Tensor, grid_side: int, pool_h: int, pool_w: int) -> Tensor:
    """[B, G, C] -> [B, T, pool_h*pool_w*C], concatenating each window row-major."""
    b, g, c = x.shape
    gh, gw = grid_side // pool_h, grid_side // pool_w
    y = T.reshape(x, (b, gh, pool_h, gw, pool_w, c))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (b, gh * gw, pool_h * pool_w * c))


def _grid(x: Tensor, side_h: int, side_w: int) -> Tensor:
    return T.reshape(x, (x.shape[0], side_h, side_w, x.shape[-1]))


def _flat(x: Tensor) -> Tensor:
    b, h, w, c = x.shape
    return T.reshape(x, (b, h * w, c))


class _MLP(nn.Module):
    def __init__(self, rng, d_in, d_hidden, d_out, act):
        self.fc1 = nn.Linear(rng, d_in, d_hidden)
        self.fc2 = nn.Linear(rng, d_hidden, d_out)
        self._act = act

    def forward(self, x):
        return self.fc2(self._act(self.fc1(x)))


class _DepthwiseConv(nn.Module):
    def __init__(self, rng, channels, kernel=3):
        self.weight = nn.param(rng, kernel, kernel, channels)
        self.bias = nn.zeros(channels)

    def forward(self, x, stride=1):
        return T.depthwise_conv2d(x, self.weight, self.bias, stride=stride, padding=self.weight.shape[0] // 2)


class _ConvBlock(nn.Module):
    """Depthwise conv, GELU, pointwise conv."""

    def __init__(self, rng, channels):
        self.dw = _DepthwiseConv(rng, channels)
        self.pw = nn.Linear(rng, channels, channels)

    def forward(self, x, stride=1):
        return T.pointwise_conv2d(T.gelu(self.dw(x, stride)), self.pw.weight, self.pw.bias)


class Projector(nn.Module):
    """Maps [B, G, in_dim] visual features to [B, target_tokens, out_dim]."""

    def __init__(self, cfg: ProjectorConfig, grid_side: int, rng: np.random.Generator):
        check_projector(cfg, grid_side)
        self._cfg = cfg
        self._side = grid_side
        c_in, c_out = cfg.in_dim, cfg.out_dim
        kind = cfg.kind
        if kind == "linear":
            self.fc = nn.Linear(rng, c_in, c_out)
        elif kind == "mlp":
            self.mlp = _MLP(rng, c_in, c_out, c_out, T.gelu)
        elif kind == "ldp":
            self.mlp = _MLP(rng, c_in, c_out, c_out, T.gelu)
            self.block1 = _ConvBlock(rng, c_out)
            self.block2 = _ConvBlock(rng, c_out)
        elif kind == "ldpv2":
            self.mlp = _MLP(rng, c_in, c_out, c_out, T.gelu)
            self.peg = _DepthwiseConv(rng, c_out)
        else:
            ph, pw = merge_plan(grid_side, cfg.target_tokens)
            self.mlp = _MLP(rng, c_in * ph * pw, c_out, c_out, T.mish)

    @property
    def config(self) -> ProjectorConfig:
        return self._cfg

    def forward(self, features) -> Tensor:
        x = features.tokens if isinstance(features, VisualFeatures) else features
        single = x.ndim == 2
        if single:
            x = T.reshape(x, (1,) + x.shape)
        if x.shape[1] != self._side**2 or x.shape[2] != self._cfg.in_dim:
            raise T.ShapeError(
                f"projector expects [B, {self._side ** 2}, {self._cfg.in_dim}] features, got {x.shape}"
            )
        side, kind = self._side, self._cfg.kind
        if kind == "linear":
            y = self.fc(x)
        elif kind == "mlp":
            y = self.mlp(x)
        elif kind == "ldp":
            g = _grid(self.mlp(x), side, side)
            g = g + self.block1(g, stride=1)
            y = _flat(self.block2(g, stride=2))
        elif kind == "ldpv2":
            ph, pw = merge_plan(side, self._cfg.target_tokens)
            g = T.average_pool2d(_grid(self.mlp(x), side, side), ph, pw)
            y = _flat(g + self.peg(g, stride=1))
        else:
            ph, pw = merge_plan(side, self._cfg.target_tokens)
            y = self.mlp(merge_windows(x, side, ph, pw))
        if single:
            y = T.reshape(y, y.shape[1:])
        return y


def check_projector(cfg: ProjectorConfig, grid_side: int) -> None:
    g = grid_side**2
    if cfg.target_tokens > g:
        raise UnsupportedTokenCount(f"target_tokens {cfg.target_tokens} exceeds the {g} input tokens")
    if cfg.kind in ("linear", "mlp") and cfg.target_tokens != g:
        raise UnsupportedTokenCount(f"{cfg.kind} projector preserves token count: target must be {g}")
    if cfg.kind == "ldp" and (grid_side % 2 or cfg.target_tokens != g // 4):
        raise UnsupportedTokenCount(f"ldp projector needs an even grid and target {g // 4} (stride-2 reduction)")
    if cfg.kind in ("ldpv2", "xdp"):
        merge_plan(grid_side, cfg.target_tokens)


def param_count(cfg: ProjectorConfig, grid_side: int) -> int:
    """Closed-form trainable-parameter count of a projector."""
    check_projector(cfg, grid_side)
    c_in, c_out = cfg.in_dim, cfg.out_dim
    mlp = c_in * c_out + c_out + c_out * c_out + c_out
    dw = 9 * c_out + c_out
    if cfg.kind == "linear":
        return c_in * c_out + c_out
    if cfg.kind == "mlp":
        return mlp
    if cfg.kind == "ldp":
        return mlp + 2 * (dw + c_out * c_out + c_out)
    if cfg.kind == "ldpv2":
        return mlp + dw
    ph, pw = merge_plan(grid_side, cfg.target_tokens)
    return c_in * ph * pw * c_out + c_out + c_out * c_out + c_out


def reduction_ratio(num_patches: int, target_tokens: int) -> float:
    return 1.0 - target_tokens / num_patches


def grid_side_of(num_patches: int) -> int:
    side = math.isqrt(num_patches)
    if side * side != num_patches:
        raise ValueError(f"{num_patches} patches do not form a square grid")
    return side
