"""Teacher pre-training and student training with the composite loss."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import tensors as T
from ..detection import average_precision
from ..distillation import TeacherParams
from ..geometry import NoiseSpec
from . import model as M
from .config import ExperimentConfig, parse_sections
from .optim import clip_grad_norm, make_optimizer, scheduled_lr
from .scenario import scenario_set

log = logging.getLogger(__name__)

NS_TRAIN_NOISE = 3
NS_SHUFFLE = 5
NS_TEACHER_SHUFFLE = 6


class NumericFailure(RuntimeError):
    """A non-finite loss; ``diagnostics`` says where, ``checkpoint`` points at the last good state."""

    def __init__(self, message: str, diagnostics: dict, checkpoint: Path | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics
        self.checkpoint = checkpoint


@dataclass
class TrainedBundle:
    config: ExperimentConfig
    student: M.StudentParams
    teacher: TeacherParams | None = None
    trace: list = field(default_factory=list)

    def save(self, path) -> Path:
        path = Path(path)
        arrays = {f"student/{k}": v for k, v in self.student.state_dict().items()}
        if self.teacher is not None:
            arrays.update({f"teacher/{k}": v for k, v in self.teacher.state_dict().items()})
        meta = {"config": self.config.to_dict(), "trace": self.trace}
        arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        return path

    @classmethod
    def load(cls, path) -> "TrainedBundle":
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            cfg = config_from_dict(meta["config"])
            student = M.StudentParams.init(cfg)
            student.load_state_dict({k[8:]: z[k] for k in z.files if k.startswith("student/")})
            teacher = None
            tkeys = [k for k in z.files if k.startswith("teacher/")]
            if tkeys:
                teacher = M.init_teacher(cfg)
                teacher.load_state_dict({k[8:]: z[k] for k in tkeys})
                teacher.freeze()
        return cls(cfg, student, teacher, meta["trace"])


def config_from_dict(d: dict) -> ExperimentConfig:
    sections = {"experiment": {"seed": str(d["seed"])}}
    for name, values in d.items():
        if name == "seed":
            continue
        sections[name] = {k: (",".join(map(str, v)) if isinstance(v, list) else str(v)) for k, v in values.items()}
    return parse_sections(sections)


# ---------------------------------------------------------------- data caches

_SCENES: dict = {}


def cached_scenes(config: ExperimentConfig, split: str) -> list:
    key = (config.seed, config.grid, config.data, split)
    if key not in _SCENES:
        _SCENES[key] = scenario_set(config, split)
    return _SCENES[key]


def train_noise(config: ExperimentConfig, epoch: int, index: int) -> NoiseSpec:
    n = config.noise
    seed = int(np.random.SeedSequence([config.seed, NS_TRAIN_NOISE, epoch, index]).generate_state(1)[0])
    return NoiseSpec(n.train_distribution, n.train_trans, math.radians(n.train_rot_deg), seed)


def _finite_or_fail(value: float, what: str, diag: dict, ckpt):
    if not math.isfinite(value):
        diag = dict(diag, term=what, value=repr(value))
        raise NumericFailure(f"non-finite {what} loss at {diag}", diag, ckpt)


# ---------------------------------------------------------------- teacher


def train_teacher(config: ExperimentConfig, scenes=None) -> TeacherParams:
    """Detection-only pre-training on the clean union clouds, then frozen."""
    meta = config.grid.meta()
    o = config.optim
    scenes = cached_scenes(config, "train") if scenes is None else scenes
    teacher = M.init_teacher(config)
    opt = make_optimizer(o.optimizer, teacher.parameters(), o.lr, o.momentum, o.weight_decay)
    targets = [M.build_targets(s.gt_boxes, meta) for s in scenes]
    marks = _scaled_marks(o.decay_epochs, o.epochs, o.teacher_epochs)
    for epoch in range(o.teacher_epochs):
        lr = scheduled_lr(o.lr, epoch, marks, o.decay_factor)
        order = np.random.default_rng(np.random.SeedSequence([config.seed, NS_TEACHER_SHUFFLE, epoch])).permutation(len(scenes))
        for start in range(0, len(order), o.batch_size):
            batch = order[start:start + o.batch_size]
            opt.zero_grad()
            for idx in batch:
                det, _ = M.teacher_loss(scenes[idx], teacher, meta, targets[idx], config.loss.reg_weight)
                _finite_or_fail(det.item(), "teacher", {"epoch": epoch, "scene": int(idx)}, None)
                T.mul(det, 1.0 / len(batch)).backward()
            if o.grad_clip:
                clip_grad_norm(opt.params, o.grad_clip)
            opt.step(lr)
    return teacher.freeze()


def _scaled_marks(marks, epochs: int, other: int):
    if epochs <= 0 or other == epochs:
        return tuple(marks)
    return tuple(max(1, round(m * other / epochs)) for m in marks)


def teacher_cache(teacher: TeacherParams, scenes, config: ExperimentConfig) -> list:
    meta = config.grid.meta()
    with T.no_grad():
        return [M.teacher_grid(s, teacher, meta).features.data.copy() for s in scenes]


# ---------------------------------------------------------------- student


def evaluate_scenes(student: M.StudentParams, config: ExperimentConfig, scenes, noise: NoiseSpec | None = None,
                    noise_seeds=None) -> dict:
    """AP@0.5 / AP@0.7 over ``scenes`` with the infrastructure pose perturbed by ``noise``."""
    meta = config.grid.meta()
    history = config.modules.temporal_fusion
    preds, gts = {}, {}
    for k, sc in enumerate(scenes):
        if noise is None or noise.is_zero:
            inputs = M.prepare_inputs(sc, meta, history=history)
        else:
            spec = noise if noise_seeds is None else NoiseSpec(noise.distribution, noise.trans, noise.rot, noise_seeds[k])
            inputs = M.noisy_inputs(sc, meta, spec, history)
        preds[sc.scene_id] = M.predict(inputs, student, config)
        gts[sc.scene_id] = sc.gt_boxes
    ap50 = average_precision(preds, gts, 0.5)
    ap70 = average_precision(preds, gts, 0.7)
    return {"ap50": ap50, "ap70": ap70, "predictions": preds}


def _kl_gap(student, config, scenes) -> float:
    """Mean channel-KL between (compensated) infrastructure and vehicle features, clean poses."""
    from ..compensation import distribution_gap_kl

    if not scenes:
        return float("nan")
    meta = config.grid.meta()
    vals = []
    with T.no_grad():
        for sc in scenes:
            inp = M.prepare_inputs(sc, meta, history=config.modules.temporal_fusion)
            res = M.student_forward(inp, student, meta, config.modules, config.model.attention)
            vals.append(distribution_gap_kl(res.infra.features, res.ego.features).item())
    return float(np.mean(vals))


def run_training(config: ExperimentConfig, out_dir=None, teacher: TeacherParams | None = None,
                 progress=None) -> TrainedBundle:
    """Train the student described by ``config.modules``; returns the bundle with its per-epoch trace."""
    meta = config.grid.meta()
    o, mods = config.optim, config.modules
    scenes = cached_scenes(config, "train")
    student = M.StudentParams.init(config)
    if o.epochs == 0:
        return TrainedBundle(config, student, teacher, [])
    tfeats = None
    if mods.distillation:
        if teacher is None:
            teacher = train_teacher(config, scenes)
        tfeats = teacher_cache(teacher, scenes, config)
    history = mods.temporal_fusion
    targets = [None] * len(scenes)
    opt = make_optimizer(o.optimizer, student.parameters(), o.lr, o.momentum, o.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    ckpt = None
    trace = []
    ap_scenes = scenes[: config.data.train_ap_scenes]
    for epoch in range(o.epochs):
        lr = scheduled_lr(o.lr, epoch, o.decay_epochs, o.decay_factor)
        order = np.random.default_rng(np.random.SeedSequence([config.seed, NS_SHUFFLE, epoch])).permutation(len(scenes))
        sums = dict.fromkeys(("loss", "detection", "cls", "reg", "distill", "kl"), 0.0)
        grad_norms = []
        for start in range(0, len(order), o.batch_size):
            batch = order[start:start + o.batch_size]
            opt.zero_grad()
            for idx in batch:
                inputs = M.noisy_inputs(scenes[idx], meta, train_noise(config, epoch, int(idx)), history)
                if targets[idx] is None:
                    targets[idx] = inputs.targets
                inputs.targets = targets[idx]
                res = M.student_forward(inputs, student, meta, mods, config.model.attention)
                terms = M.student_loss(res, inputs, config, tfeats[idx] if tfeats is not None else None)
                total = terms.total.item()
                diag = {"epoch": epoch, "scene": int(idx), "detection": terms.detection, "distill": terms.distill,
                        "kl": terms.kl}
                if not math.isfinite(total):
                    if ckpt is None and out is not None:
                        ckpt = _save_checkpoint(TrainedBundle(config, student, teacher, trace), out)
                    _finite_or_fail(total, "total", diag, ckpt)
                T.mul(terms.total, 1.0 / len(batch)).backward()
                sums["loss"] += total
                sums["detection"] += terms.detection
                sums["cls"] += terms.cls
                sums["reg"] += terms.reg
                sums["distill"] += terms.distill
                sums["kl"] += terms.kl
            gn = clip_grad_norm(opt.params, o.grad_clip)
            if not math.isfinite(gn):
                _finite_or_fail(gn, "gradient", {"epoch": epoch, "batch_start": start}, ckpt)
            grad_norms.append(gn)
            opt.step(lr)
        n = max(1, len(scenes))
        entry = {"epoch": epoch, "lr": lr}
        entry.update({k: v / n for k, v in sums.items()})
        entry["grad_norm"] = float(np.mean(grad_norms)) if grad_norms else 0.0
        entry["kl_gap"] = _kl_gap(student, config, ap_scenes)
        if ap_scenes:
            ev = evaluate_scenes(student, config, ap_scenes)
            entry["train_ap50"], entry["train_ap70"] = ev["ap50"], ev["ap70"]
        trace.append(entry)
        log.info("epoch %d %s", epoch, {k: round(v, 4) if isinstance(v, float) else v for k, v in entry.items()})
        if progress is not None:
            progress(entry)
        if out is not None:
            ckpt = _save_checkpoint(TrainedBundle(config, student, teacher, trace), out)
    return TrainedBundle(config, student, teacher, trace)


def _save_checkpoint(bundle: TrainedBundle, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / "checkpoint.tmp.npz"
    bundle.save(tmp)
    final = out / "checkpoint.npz"
    tmp.replace(final)
    return final
