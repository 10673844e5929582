"""Student pipeline with per-module toggles, the frozen teacher, and input preparation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensors as T
from ..compensation import CompensationParams, compensate, distribution_gap_kl
from ..detection import (DetectionHeadParams, RotatedBox, build_targets, decode_boxes, detect_head,
                         detection_loss, nms)
from ..distillation import TeacherParams, distill_loss, teacher_features, to_ego_frame
from ..fusion import INFRA, VEHICLE, CollabFusionParams, collaborative_fuse, mean_fuse
from ..geometry import BEVGrid, GridMeta, NoiseSpec, Pose6DoF, alignment_grid, perturb_pose, warp_bev
from ..params import ParamSet
from ..pillars import EncoderParams, encode_bev, normalize_stats, pillarize
from ..temporal import DelayEmbeddingParams, TemporalFusionParams, add_delay_embedding, temporal_fuse
from .config import ExperimentConfig, ModulesConfig
from .scenario import Scenario

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class StudentParams(ParamSet):
    encoder: EncoderParams
    head: DetectionHeadParams
    delay: DelayEmbeddingParams | None = None
    temporal: TemporalFusionParams | None = None
    compensation: CompensationParams | None = None
    fusion: CollabFusionParams | None = None

    @classmethod
    def init(cls, config: ExperimentConfig) -> "StudentParams":
        m, mods = config.model, config.modules
        dtype = DTYPES[m.dtype]
        C = m.channels
        # every component draws from its own child stream so toggling one leaves the rest unchanged
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence([config.seed, 31]).spawn(6)]
        return cls(
            encoder=EncoderParams.init(streams[0], C, dtype),
            head=DetectionHeadParams.init(streams[1], C, dtype),
            delay=DelayEmbeddingParams.init(streams[2], C, dtype) if mods.temporal_fusion else None,
            temporal=TemporalFusionParams.init(streams[3], C, dtype) if mods.temporal_fusion else None,
            compensation=CompensationParams.init(streams[4], C, dtype) if mods.compensation else None,
            fusion=(CollabFusionParams.init(streams[5], C, m.heads, m.deform_heads, m.points, m.max_radius, dtype)
                    if mods.collaborative_fusion else None),
        )


def init_teacher(config: ExperimentConfig) -> TeacherParams:
    dtype = DTYPES[config.model.dtype]
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 41]))
    return TeacherParams.init(rng, config.model.channels, dtype)


# ---------------------------------------------------------------- inputs


@dataclass
class SampleInputs:
    """Everything the student needs for one scene, as plain arrays."""

    scene_id: str
    ego_curr: np.ndarray  # normalised pillar stats (4, H, W)
    infra_curr: np.ndarray
    ego_prev: np.ndarray | None
    infra_prev: np.ndarray | None
    history_grid: np.ndarray | None  # (H, W, 2) sampling grid aligning ego t-1 onto t
    delay: float
    timestamps: dict
    gt: list
    targets: object


def infra_stats(scenario: Scenario, infra_pose: Pose6DoF, meta: GridMeta, slot: int) -> np.ndarray:
    cloud = to_ego_frame(scenario.clouds[INFRA][slot], infra_pose, scenario.ego_pose)
    return normalize_stats(pillarize(cloud, meta))


def prepare_inputs(scenario: Scenario, meta: GridMeta, infra_pose: Pose6DoF | None = None,
                   history: bool = True) -> SampleInputs:
    """Project the (possibly perturbed) infrastructure clouds into the ego frame and pillarize.

    The ego history stays in its own t-1 frame and is aligned in feature space.
    """
    pose = scenario.infra_pose if infra_pose is None else infra_pose
    ego = scenario.clouds[VEHICLE]
    ts = scenario.timestamps()
    return SampleInputs(
        scene_id=scenario.scene_id,
        ego_curr=normalize_stats(pillarize(ego[1], meta)),
        infra_curr=infra_stats(scenario, pose, meta, 1),
        ego_prev=normalize_stats(pillarize(ego[0], meta)) if history else None,
        infra_prev=infra_stats(scenario, pose, meta, 0) if history else None,
        history_grid=alignment_grid(scenario.ego_poses[0], scenario.ego_poses[1], meta) if history else None,
        delay=scenario.delay,
        timestamps=ts,
        gt=scenario.gt_boxes,
        targets=build_targets(scenario.gt_boxes, meta),
    )


def noisy_inputs(scenario: Scenario, meta: GridMeta, spec: NoiseSpec, history: bool = True) -> SampleInputs:
    pose = perturb_pose(scenario.infra_pose, spec)
    return prepare_inputs(scenario, meta, pose, history)


# ---------------------------------------------------------------- forward


@dataclass
class ForwardResult:
    raw: T.DiffTensor
    fused: BEVGrid
    ego: BEVGrid  # post-temporal, pre-fusion
    infra: BEVGrid  # post-temporal, post-compensation, pre-fusion
    infra_raw: BEVGrid  # post-temporal, pre-compensation


def _encode(stats: np.ndarray, params: StudentParams, meta: GridMeta, ts: float, agent: str) -> BEVGrid:
    return encode_bev(T.tensor(stats, dtype=params.encoder.w1.dtype), params.encoder, meta, ts, agent)


def student_forward(inputs: SampleInputs, params: StudentParams, meta: GridMeta, modules: ModulesConfig,
                    attention: str = "local") -> ForwardResult:
    """pillars -> encoder -> temporal -> compensation -> fusion -> head, modules toggled by ``modules``."""
    ts = inputs.timestamps
    ego = _encode(inputs.ego_curr, params, meta, ts[VEHICLE][1], VEHICLE)
    infra = _encode(inputs.infra_curr, params, meta, ts[INFRA][1], INFRA)
    if modules.temporal_fusion:
        if inputs.ego_prev is None:
            raise ValueError("temporal fusion needs history inputs")
        ego_hist = warp_bev(_encode(inputs.ego_prev, params, meta, ts[VEHICLE][0], VEHICLE), inputs.history_grid)
        infra_hist = _encode(inputs.infra_prev, params, meta, ts[INFRA][0], INFRA)  # already in ego(t) frame
        ego = temporal_fuse(ego, ego_hist, params.temporal)
        infra = temporal_fuse(add_delay_embedding(infra, inputs.delay, params.delay), infra_hist, params.temporal)
    infra_raw = infra
    if modules.compensation:
        infra = compensate(infra, params.compensation)
    if modules.collaborative_fusion:
        fused = collaborative_fuse([ego, infra], [VEHICLE, INFRA], params.fusion, 0, attention)
    else:
        fused = mean_fuse([ego, infra])
    raw = detect_head(fused, params.head)
    return ForwardResult(raw, fused, ego, infra, infra_raw)


@dataclass
class LossTerms:
    total: T.DiffTensor
    detection: float
    cls: float
    reg: float
    distill: float
    kl: float


def student_loss(result: ForwardResult, inputs: SampleInputs, config: ExperimentConfig,
                 teacher_feats: np.ndarray | None) -> LossTerms:
    """Detection + distillation on the post-fusion map + compensation KL toward the vehicle domain."""
    lw, mods = config.loss, config.modules
    det, parts = detection_loss(result.raw, inputs.targets, lw.reg_weight)
    total = T.mul(det, lw.detection)
    dist_val = 0.0
    if mods.distillation:
        if teacher_feats is None:
            raise ValueError("distillation enabled but no teacher features supplied")
        teacher = BEVGrid(T.tensor(teacher_feats, dtype=result.fused.features.dtype), result.fused.meta)
        dl = distill_loss(result.fused, teacher, lw.distill_kind)
        total = T.add(total, T.mul(dl, lw.distill))
        dist_val = dl.item()
    kl_val = 0.0
    if mods.compensation:
        kl = distribution_gap_kl(result.infra.features, result.ego.features.detach())
        if lw.kl > 0:
            total = T.add(total, T.mul(kl, lw.kl))
        kl_val = kl.item()
    return LossTerms(total, det.item(), parts["cls"], parts["reg"], dist_val, kl_val)


# ---------------------------------------------------------------- teacher


def teacher_grid(scenario: Scenario, params: TeacherParams, meta: GridMeta) -> BEVGrid:
    """Early fusion of both current clouds with exact poses."""
    clouds = [scenario.clouds[VEHICLE][1], scenario.clouds[INFRA][1]]
    poses = [scenario.ego_pose, scenario.infra_pose]
    return teacher_features(clouds, poses, scenario.ego_pose, params, meta)


def teacher_loss(scenario: Scenario, params: TeacherParams, meta: GridMeta, targets, reg_weight: float):
    grid = teacher_grid(scenario, params, meta)
    det, parts = detection_loss(detect_head(grid, params.head), targets, reg_weight)
    return det, parts


# ---------------------------------------------------------------- inference


def postprocess(raw: T.DiffTensor, meta: GridMeta, config: ExperimentConfig) -> list:
    e = config.eval
    boxes = decode_boxes(raw, meta, e.score_threshold, e.top_k)
    return nms(boxes, e.nms_iou)[: e.max_detections]


def predict(inputs: SampleInputs, params: StudentParams, config: ExperimentConfig) -> list:
    meta = config.grid.meta()
    with T.no_grad():
        res = student_forward(inputs, params, meta, config.modules, config.model.attention)
    return postprocess(res.raw, meta, config)


def oracle_predictions(scenario: Scenario) -> list:
    """Ground truth echoed back as confident detections."""
    return [RotatedBox(b.cx, b.cy, b.w, b.l, b.yaw, 1.0) for b in scenario.gt_boxes]
