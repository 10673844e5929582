"""Transmission-delay embedding and residual fusion of current and aligned history."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensors as T
from .geometry import BEVGrid, check_same_meta
from .params import ParamSet, he_conv, param, xavier, zeros


@dataclass
class DelayEmbeddingParams(ParamSet):
    weight: T.DiffTensor  # (C, C)
    bias: T.DiffTensor  # (C,)

    @classmethod
    def init(cls, rng, channels: int, dtype=np.float64) -> "DelayEmbeddingParams":
        return cls(weight=xavier(rng, channels, channels, dtype), bias=zeros(channels, dtype))

    @property
    def channels(self) -> int:
        return self.weight.shape[0]


def sinusoid_base(delta_t: float, channels: int) -> np.ndarray:
    """sin on even channels, cos on odd, frequency 10000^(-2*floor(k/2)/C)."""
    if delta_t < 0:
        raise ValueError("delay must be non-negative")
    k = np.arange(channels)
    freq = 10000.0 ** (-2.0 * (k // 2) / channels)
    arg = delta_t * freq
    return np.where(k % 2 == 0, np.sin(arg), np.cos(arg))


def delay_embedding(delta_t: float, params: DelayEmbeddingParams) -> T.DiffTensor:
    C = params.channels
    base = T.tensor(sinusoid_base(delta_t, C)[None, :], dtype=params.weight.dtype)
    return T.reshape(T.linear(base, params.weight, params.bias), (C,))


def add_delay_embedding(grid: BEVGrid, delta_t: float, params: DelayEmbeddingParams) -> BEVGrid:
    """Broadcast the projected delay vector onto every cell of ``grid``."""
    if grid.channels != params.channels:
        raise T.ShapeError(f"embedding has {params.channels} channels, grid has {grid.channels}")
    emb = delay_embedding(delta_t, params)
    return grid.with_features(T.add(grid.features, T.reshape(emb, (params.channels, 1, 1))))


@dataclass
class TemporalFusionParams(ParamSet):
    w1: T.DiffTensor  # (C, 2C, 3, 3)
    b1: T.DiffTensor
    w2: T.DiffTensor  # (C, C, 3, 3)
    b2: T.DiffTensor

    @classmethod
    def init(cls, rng, channels: int, dtype=np.float64, out_gain: float = 0.1) -> "TemporalFusionParams":
        return cls(
            w1=he_conv(rng, channels, 2 * channels, 3, dtype),
            b1=zeros(channels, dtype),
            w2=he_conv(rng, channels, channels, 3, dtype, gain=out_gain),
            b2=zeros(channels, dtype),
        )

    @classmethod
    def zeros_like_channels(cls, channels: int, dtype=np.float64) -> "TemporalFusionParams":
        return cls(
            w1=param(np.zeros((channels, 2 * channels, 3, 3)), dtype),
            b1=zeros(channels, dtype),
            w2=param(np.zeros((channels, channels, 3, 3)), dtype),
            b2=zeros(channels, dtype),
        )


def temporal_fuse(current: BEVGrid, history_warped: BEVGrid, params: TemporalFusionParams) -> BEVGrid:
    """``current + conv2(relu(conv1(concat(current, history))))``."""
    check_same_meta(current, history_warped)
    x = T.concat([current.features, history_warped.features], axis=0)
    h = T.relu(T.conv2d(x, params.w1, params.b1, padding=1))
    h = T.conv2d(h, params.w2, params.b2, padding=1)
    return current.with_features(T.add(current.features, h))
