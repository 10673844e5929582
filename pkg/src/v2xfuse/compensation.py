"""Residual depthwise-separable compensation stack and the channel-KL gap metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensors as T
from .geometry import BEVGrid
from .params import ParamSet, he_conv, param, zeros

N_BLOCKS = 3


@dataclass
class SeparableConvParams(ParamSet):
    depthwise: T.DiffTensor  # (C, 1, k, k)
    depthwise_bias: T.DiffTensor
    pointwise: T.DiffTensor  # (C, C, 1, 1)
    pointwise_bias: T.DiffTensor

    @classmethod
    def init(cls, rng, channels: int, k: int = 3, dtype=np.float64, gain: float = 1.0):
        dw = rng.normal(0.0, np.sqrt(2.0 / (k * k)), size=(channels, 1, k, k))
        return cls(
            depthwise=param(dw, dtype),
            depthwise_bias=zeros(channels, dtype),
            pointwise=he_conv(rng, channels, channels, 1, dtype, gain=gain),
            pointwise_bias=zeros(channels, dtype),
        )

    @classmethod
    def zeros(cls, channels: int, k: int = 3, dtype=np.float64):
        return cls(
            depthwise=zeros((channels, 1, k, k), dtype),
            depthwise_bias=zeros(channels, dtype),
            pointwise=zeros((channels, channels, 1, 1), dtype),
            pointwise_bias=zeros(channels, dtype),
        )


def separable(x, p: SeparableConvParams) -> T.DiffTensor:
    return T.depthwise_separable_conv(x, p.depthwise, p.pointwise, p.depthwise_bias, p.pointwise_bias)


@dataclass
class ResBlockParams(ParamSet):
    f1: SeparableConvParams
    f2: SeparableConvParams


@dataclass
class CompensationParams(ParamSet):
    blocks: list
    block_weights: T.DiffTensor  # (3,) -- one scale per residual block
    weight: T.DiffTensor  # () -- scale on the compensation map

    def __post_init__(self):
        if len(self.blocks) != N_BLOCKS or self.block_weights.shape != (N_BLOCKS,):
            raise ValueError(f"compensation uses exactly {N_BLOCKS} residual blocks")

    @classmethod
    def init(cls, rng, channels: int, dtype=np.float64, out_gain: float = 0.1) -> "CompensationParams":
        blocks = [
            ResBlockParams(SeparableConvParams.init(rng, channels, dtype=dtype),
                           SeparableConvParams.init(rng, channels, dtype=dtype, gain=out_gain))
            for _ in range(N_BLOCKS)
        ]
        return cls(blocks, param(np.ones(N_BLOCKS), dtype), param(1.0, dtype))

    @classmethod
    def zeros(cls, channels: int, block_weight: float = 1.0, weight: float = 1.0, dtype=np.float64):
        blocks = [ResBlockParams(SeparableConvParams.zeros(channels, dtype=dtype),
                                 SeparableConvParams.zeros(channels, dtype=dtype))
                  for _ in range(N_BLOCKS)]
        return cls(blocks, param(np.full(N_BLOCKS, block_weight), dtype), param(weight, dtype))


def res_block(x, block: ResBlockParams, weight_i) -> T.DiffTensor:
    """``F2(relu(F1(x))) + weight_i * x``."""
    x = T.as_tensor(x)
    h = separable(T.relu(separable(x, block.f1)), block.f2)
    return T.add(h, T.mul(weight_i, x))


def compensation_map(x, params: CompensationParams) -> T.DiffTensor:
    h = T.as_tensor(x)
    for i, block in enumerate(params.blocks):
        h = res_block(h, block, params.block_weights[i])
    return h


def compensate(grid: BEVGrid, params: CompensationParams) -> BEVGrid:
    """``relu(input + weight * compensation_map(input))`` with the map from three chained blocks."""
    x = grid.features
    comp = compensation_map(x, params)
    y = T.relu(T.add(x, T.mul(params.weight, comp)))
    return grid.with_features(y)


def _features(g):
    return g.features if isinstance(g, BEVGrid) else T.as_tensor(g)


def distribution_gap_kl(a, b) -> T.DiffTensor:
    """Mean over cells of KL(P_a || P_b), P = softmax over channels of (C, H, W) features."""
    fa, fb = _features(a), _features(b)
    if fa.shape != fb.shape:
        raise T.ShapeError(f"KL gap needs equal shapes, got {fa.shape} and {fb.shape}")
    la = T.log_softmax(fa, axis=0)
    lb = T.log_softmax(fb, axis=0)
    pa = T.exp(la)
    kl = T.sum_(T.mul(pa, T.sub(la, lb)), axis=0)
    return T.mean(kl)
