"""Collaborative fusion: type-aware cross-agent attention followed by deformable attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensors as T
from .geometry import BEVGrid, check_same_meta
from .params import ParamSet, param, xavier, zeros

VEHICLE = "vehicle"
INFRA = "infrastructure"
AGENT_TYPES = (VEHICLE, INFRA)
TYPE_PAIRS = tuple((a, b) for a in AGENT_TYPES for b in AGENT_TYPES)


class FusionError(ValueError):
    pass


def _check_type(t: str) -> str:
    if t not in AGENT_TYPES:
        raise FusionError(f"unknown agent type {t!r}; expected one of {AGENT_TYPES}")
    return t


# ---------------------------------------------------------------- heterogeneous attention


@dataclass
class HeteroAttentionParams(ParamSet):
    """Per-type projections (C, C) and per ordered type pair relation matrices (heads, d_k, d_k).

    ``w_att[(query_type, key_type)]`` scores keys; ``w_collab[...]`` mixes the values.
    """

    w_q: dict
    w_k: dict
    w_v: dict
    w_att: dict
    w_collab: dict
    w_out: T.DiffTensor
    heads: int

    def __post_init__(self):
        C = self.w_out.shape[0]
        if C % self.heads:
            raise FusionError(f"{C} channels do not split into {self.heads} heads")
        for pair in TYPE_PAIRS:
            if pair not in self.w_att or pair not in self.w_collab:
                raise FusionError(f"missing relation matrices for {pair}")

    @property
    def channels(self) -> int:
        return self.w_out.shape[0]

    @property
    def d_k(self) -> int:
        return self.channels // self.heads

    def named_parameters(self, prefix: str = ""):
        # heads is a hyper-parameter, not a tensor
        out = []
        for name in ("w_q", "w_k", "w_v", "w_att", "w_collab"):
            for key in sorted(getattr(self, name)):
                tag = "__".join(key) if isinstance(key, tuple) else key
                out.append((f"{prefix}{name}.{tag}", getattr(self, name)[key]))
        out.append((f"{prefix}w_out", self.w_out))
        return out

    @classmethod
    def init(cls, rng, channels: int, heads: int, dtype=np.float64, relation_noise: float = 0.05,
             out_gain: float = 1.0) -> "HeteroAttentionParams":
        d = channels // heads

        def rel():
            return param(np.eye(d)[None].repeat(heads, 0) + relation_noise * rng.normal(size=(heads, d, d)), dtype)

        w_out = xavier(rng, channels, channels, dtype)
        w_out.data *= out_gain
        return cls(
            w_q={t: xavier(rng, channels, channels, dtype) for t in AGENT_TYPES},
            w_k={t: xavier(rng, channels, channels, dtype) for t in AGENT_TYPES},
            w_v={t: xavier(rng, channels, channels, dtype) for t in AGENT_TYPES},
            w_att={p: rel() for p in TYPE_PAIRS},
            w_collab={p: rel() for p in TYPE_PAIRS},
            w_out=w_out,
            heads=heads,
        )

    @classmethod
    def identity(cls, channels: int, heads: int, dtype=np.float64) -> "HeteroAttentionParams":
        d = channels // heads
        eye_c = lambda: param(np.eye(channels), dtype)  # noqa: E731
        eye_h = lambda: param(np.eye(d)[None].repeat(heads, 0), dtype)  # noqa: E731
        return cls(
            w_q={t: eye_c() for t in AGENT_TYPES},
            w_k={t: eye_c() for t in AGENT_TYPES},
            w_v={t: eye_c() for t in AGENT_TYPES},
            w_att={p: eye_h() for p in TYPE_PAIRS},
            w_collab={p: eye_h() for p in TYPE_PAIRS},
            w_out=eye_c(),
            heads=heads,
        )


def _flatten(grid: BEVGrid) -> T.DiffTensor:
    C = grid.channels
    return T.transpose(T.reshape(grid.features, (C, -1)), (1, 0))  # (HW, C)


def project_qkv(grids, agent_types, params: HeteroAttentionParams):
    """Per agent: dict with Q, K, V shaped (heads, H*W, d_k), plus the selected weights."""
    if len(grids) != len(agent_types):
        raise FusionError("one agent type per grid is required")
    check_same_meta(*grids)
    hd, d = params.heads, params.d_k
    out = []
    for g, t in zip(grids, agent_types):
        _check_type(t)
        x = _flatten(g)
        n = x.shape[0]
        entry = {"type": t, "weights": (params.w_q[t], params.w_k[t], params.w_v[t])}
        for name, w in zip("QKV", entry["weights"]):
            proj = T.matmul(x, w)  # (n, C)
            entry[name] = T.transpose(T.reshape(proj, (n, hd, d)), (1, 0, 2))
        out.append(entry)
    return out


def canonical_order(grids, agent_types, ego_index: int = 0):
    """Ego first, remaining agents sorted by (type, feature bytes)."""
    rest = [i for i in range(len(grids)) if i != ego_index]
    rest.sort(key=lambda i: (agent_types[i], grids[i].features.data.tobytes()))
    order = [ego_index] + rest
    return [grids[i] for i in order], [agent_types[i] for i in order]


def hetero_attention(grids, agent_types, params: HeteroAttentionParams, ego_index: int = 0,
                     mode: str = "local", return_attention: bool = False):
    """Fused feature at the ego agent.

    ``mode="local"``: each cell attends to the co-located cell of every agent;
    ``mode="full"``: each cell attends to every cell of every agent.  The
    softmax is joint over all keys of all agents.
    """
    if not grids:
        raise FusionError("at least one agent is required")
    grids, agent_types = canonical_order(list(grids), list(agent_types), ego_index)
    proj = project_qkv(grids, agent_types, params)
    ego = proj[0]
    ti = ego["type"]
    Q = ego["Q"]
    scale = 1.0 / math.sqrt(params.d_k)
    logits, values = [], []
    for pj in proj:
        pair = (ti, pj["type"])
        w_att, w_col = params.w_att[pair], params.w_collab[pair]
        qa = T.matmul(Q, w_att)  # (h, n, d) rows Q_i W_att
        if mode == "local":
            logits.append(T.sum_(T.mul(qa, pj["K"]), axis=-1))  # co-located key only
        elif mode == "full":
            logits.append(T.matmul(qa, T.transpose(pj["K"], (0, 2, 1))))
        else:
            raise FusionError(f"unknown attention mode {mode!r}")
        values.append(T.matmul(pj["V"], T.transpose(w_col, (0, 2, 1))))  # W_collab V_j per key

    if mode == "local":
        att = T.softmax(T.mul(T.stack(logits, axis=-1), scale), axis=-1)  # (h, n, J)
        h_, n_, J = att.shape
        b = T.sum_(T.mul(T.reshape(att, (h_, n_, J, 1)), T.stack(values, axis=2)), axis=2)
    else:
        att = T.softmax(T.mul(T.concat(logits, axis=-1), scale), axis=-1)  # (h, n, J*n)
        b = T.matmul(att, T.concat(values, axis=1))
    hd, n, d = b.shape
    cat = T.reshape(T.transpose(b, (1, 0, 2)), (n, hd * d))
    fused = T.matmul(cat, params.w_out)  # (n, C)
    ref = grids[0]
    H, W = ref.meta.shape
    feats = T.reshape(T.transpose(fused, (1, 0)), (hd * d, H, W))
    out = BEVGrid(feats, ref.meta, ref.timestamp, "fused")
    return (out, att) if return_attention else out


def mean_fuse(grids) -> BEVGrid:
    """Per-cell average over agents (the plain intermediate-fusion baseline)."""
    check_same_meta(*grids)
    acc = grids[0].features
    for g in grids[1:]:
        acc = T.add(acc, g.features)
    ref = grids[0]
    return BEVGrid(T.mul(acc, 1.0 / len(grids)), ref.meta, ref.timestamp, "fused")


# ---------------------------------------------------------------- deformable attention


@dataclass
class DeformAttentionParams(ParamSet):
    offset_w: T.DiffTensor  # (2*M*K, C, 3, 3) -> per head/point (dx, dy)
    offset_b: T.DiffTensor
    attn_w: T.DiffTensor  # (M*K, C, 1, 1)
    attn_b: T.DiffTensor
    value_w: T.DiffTensor  # (C, C, 1, 1); head m reads rows m*d:(m+1)*d
    out_w: T.DiffTensor  # (C, C, 1, 1); head m writes through columns m*d:(m+1)*d
    heads: int
    points: int
    max_radius: float = 3.0  # cells

    def named_parameters(self, prefix: str = ""):
        names = ("offset_w", "offset_b", "attn_w", "attn_b", "value_w", "out_w")
        return [(prefix + n, getattr(self, n)) for n in names]

    @property
    def channels(self) -> int:
        return self.value_w.shape[0]

    @classmethod
    def init(cls, rng, channels: int, heads: int = 2, points: int = 4, max_radius: float = 3.0,
             dtype=np.float64, out_gain: float = 1.0) -> "DeformAttentionParams":
        if channels % heads:
            raise FusionError(f"{channels} channels do not split into {heads} heads")
        M, K = heads, points
        # start points on a one-cell ring, rotated per head
        bias = np.zeros((M, K, 2))
        t = math.atanh(min(1.0 / max_radius, 0.999))
        for m in range(M):
            for k in range(K):
                ang = 2 * math.pi * (k + 0.5 * m / M) / K
                bias[m, k] = (t * math.cos(ang), t * math.sin(ang))
        value_w = xavier(rng, channels, channels, dtype).data.reshape(channels, channels, 1, 1)
        out_w = xavier(rng, channels, channels, dtype).data.reshape(channels, channels, 1, 1) * out_gain
        return cls(
            offset_w=zeros((2 * M * K, channels, 3, 3), dtype),
            offset_b=param(bias.reshape(-1), dtype),
            attn_w=zeros((M * K, channels, 1, 1), dtype),
            attn_b=zeros(M * K, dtype),
            value_w=param(value_w, dtype),
            out_w=param(out_w, dtype),
            heads=M,
            points=K,
            max_radius=max_radius,
        )

    @classmethod
    def degenerate(cls, channels: int, heads: int, points: int, offsets_cells=None,
                   dtype=np.float64, max_radius: float = 3.0) -> "DeformAttentionParams":
        """Identity projections, uniform weights, and fixed offsets (default zero).

        ``offsets_cells`` is (heads, points, 2) in cells, realised through the
        offset bias (the offset convolution is zero).
        """
        M, K = heads, points
        off = np.zeros((M, K, 2)) if offsets_cells is None else np.asarray(offsets_cells, float)
        if np.any(np.abs(off) >= max_radius):
            raise FusionError("offsets must lie inside the max radius")
        eye = np.eye(channels).reshape(channels, channels, 1, 1)
        return cls(
            offset_w=zeros((2 * M * K, channels, 3, 3), dtype),
            offset_b=param(np.arctanh(off / max_radius).reshape(-1), dtype),
            attn_w=zeros((M * K, channels, 1, 1), dtype),
            attn_b=zeros(M * K, dtype),
            value_w=param(eye, dtype),
            out_w=param(eye, dtype),
            heads=M,
            points=K,
            max_radius=max_radius,
        )


def sampling_offsets(x: T.DiffTensor, params: DeformAttentionParams) -> T.DiffTensor:
    """(M, K, 2, H, W) offsets in cells, bounded by ``max_radius``."""
    M, K = params.heads, params.points
    _, H, W = x.shape
    raw = T.conv2d(x, params.offset_w, params.offset_b, padding=1)
    return T.reshape(T.mul(T.tanh(raw), params.max_radius), (M, K, 2, H, W))


def attention_weights(x: T.DiffTensor, params: DeformAttentionParams) -> T.DiffTensor:
    """(M, K, H, W), softmax over the K sampling points."""
    M, K = params.heads, params.points
    _, H, W = x.shape
    logits = T.reshape(T.conv2d(x, params.attn_w, params.attn_b), (M, K, H, W))
    return T.softmax(logits, axis=1)


def deformable_gather(values: T.DiffTensor, offsets: T.DiffTensor, weights: T.DiffTensor) -> T.DiffTensor:
    """Weighted bilinear reads around every reference cell.

    ``values`` (d, H, W); ``offsets`` (K, 2, H, W) in cells; ``weights`` (K, H, W).
    Returns (d, H, W): sum_k weights[k] * values(p + offsets[k]).
    """
    d, H, W = values.shape
    K = offsets.shape[0]
    ref = T.tensor(np.broadcast_to(_reference_points(H, W)[:, :, None, :], (H, W, K, 2)).copy(),
                   dtype=values.dtype)
    per_cell = np.array([1.0 / T.pixel_scale(W) if W > 1 else 0.0,
                         1.0 / T.pixel_scale(H) if H > 1 else 0.0], dtype=values.dtype)
    off = T.transpose(offsets, (2, 3, 0, 1))  # (H, W, K, 2)
    grid = T.add(ref, T.mul(off, per_cell))
    sampled = T.bilinear_sample(values, T.reshape(grid, (H, W * K, 2)))
    sampled = T.reshape(sampled, (d, H, W, K))
    w = T.reshape(T.transpose(weights, (1, 2, 0)), (1, H, W, K))
    return T.sum_(T.mul(sampled, w), axis=-1)


def _reference_points(H: int, W: int) -> np.ndarray:
    xs = np.linspace(-1.0, 1.0, W) if W > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, H) if H > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def deform_attention(grid: BEVGrid, params: DeformAttentionParams, residual: bool = True,
                     return_terms: bool = False):
    """Multi-head deformable self-attention over a uniform grid of reference points."""
    x = grid.features
    C, H, W = x.shape
    if C != params.channels:
        raise T.ShapeError(f"deformable attention expects {params.channels} channels, got {C}")
    M = params.heads
    d = C // M
    offsets = sampling_offsets(x, params)
    weights = attention_weights(x, params)
    values = T.conv2d(x, params.value_w)
    heads = []
    for m in range(M):
        heads.append(deformable_gather(values[m * d:(m + 1) * d], offsets[m], weights[m]))
    out = T.conv2d(T.concat(heads, axis=0), params.out_w)
    if residual:
        out = T.add(out, x)
    res = grid.with_features(out)
    return (res, {"offsets": offsets, "weights": weights}) if return_terms else res


# ---------------------------------------------------------------- composition


@dataclass
class CollabFusionParams(ParamSet):
    hetero: HeteroAttentionParams
    deform: DeformAttentionParams
    ln1_gain: T.DiffTensor
    ln1_bias: T.DiffTensor
    ln2_gain: T.DiffTensor
    ln2_bias: T.DiffTensor

    @classmethod
    def init(cls, rng, channels: int, heads: int = 2, deform_heads: int = 2, points: int = 4,
             max_radius: float = 3.0, dtype=np.float64) -> "CollabFusionParams":
        return cls(
            hetero=HeteroAttentionParams.init(rng, channels, heads, dtype, out_gain=0.5),
            deform=DeformAttentionParams.init(rng, channels, deform_heads, points, max_radius, dtype,
                                              out_gain=0.5),
            ln1_gain=param(np.ones((channels, 1, 1)), dtype),
            ln1_bias=zeros((channels, 1, 1), dtype),
            ln2_gain=param(np.ones((channels, 1, 1)), dtype),
            ln2_bias=zeros((channels, 1, 1), dtype),
        )


def collaborative_fuse(grids, agent_types, params: CollabFusionParams, ego_index: int = 0,
                       mode: str = "local") -> BEVGrid:
    """``LN(ego + hetero)`` then ``LN(deform)``; the deformable block carries its own residual."""
    ego = grids[ego_index]
    h = hetero_attention(grids, agent_types, params.hetero, ego_index, mode)
    x = T.layer_norm(T.add(ego.features, h.features), 0, params.ln1_gain, params.ln1_bias)
    x = deform_attention(h.with_features(x), params.deform)
    f = T.layer_norm(x.features, 0, params.ln2_gain, params.ln2_bias)
    return BEVGrid(f, ego.meta, ego.timestamp, "fused")
