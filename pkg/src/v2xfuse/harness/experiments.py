"""Noise-robustness sweeps and the cumulative module ablation."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from ..geometry import NoiseSpec
from .config import ExperimentConfig
from .training import TrainedBundle, cached_scenes, evaluate_scenes, run_training, train_teacher

NS_EVAL_NOISE = 4

# cumulative rows: each adds one module to the previous
ABLATION_ROWS = (
    ("PP-IF", {"distillation": False, "compensation": False, "collaborative_fusion": False, "temporal_fusion": False}),
    ("+KD", {"distillation": True, "compensation": False, "collaborative_fusion": False, "temporal_fusion": False}),
    ("+KD+FC", {"distillation": True, "compensation": True, "collaborative_fusion": False, "temporal_fusion": False}),
    ("+KD+FC+CF", {"distillation": True, "compensation": True, "collaborative_fusion": True, "temporal_fusion": False}),
    ("+KD+FC+CF+TF", {"distillation": True, "compensation": True, "collaborative_fusion": True, "temporal_fusion": True}),
)


def eval_noise_seeds(config: ExperimentConfig, n: int) -> list:
    """One seed per eval scene, shared by every level and distribution (common random numbers)."""
    return [int(np.random.SeedSequence([config.seed, NS_EVAL_NOISE, i]).generate_state(1)[0]) for i in range(n)]


def noise_sweep(bundle: TrainedBundle, levels=None, distribution: str | None = None, scenes=None) -> list:
    """One row per level: ``{"noise_level", "ap50", "ap70"}``; level ``v`` means ``v`` m and ``v`` deg."""
    cfg = bundle.config
    levels = cfg.noise.eval_levels if levels is None else tuple(levels)
    distribution = cfg.noise.eval_distribution if distribution is None else distribution
    scenes = cached_scenes(cfg, "eval") if scenes is None else scenes
    seeds = eval_noise_seeds(cfg, len(scenes))
    rows = []
    for level in levels:
        spec = NoiseSpec.from_level(level, distribution)
        ev = evaluate_scenes(bundle.student, cfg, scenes, spec, seeds)
        rows.append({"noise_level": float(level), "ap50": ev["ap50"], "ap70": ev["ap70"]})
    return rows


def controlled_digest(config: ExperimentConfig) -> str:
    """Hash of everything except the module toggles: equal across ablation rows by construction."""
    d = config.to_dict()
    d.pop("modules")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class AblationResult:
    rows: list
    bundles: dict = field(default_factory=dict)


def run_ablation(config: ExperimentConfig, rows=ABLATION_ROWS, progress=None) -> AblationResult:
    """Train and evaluate each cumulative configuration on the same data, seeds and teacher."""
    teacher = None
    if any(mods["distillation"] for _, mods in rows):
        teacher = train_teacher(config)
    digest = controlled_digest(config)
    out_rows, bundles = [], {}
    eval_scenes = cached_scenes(config, "eval")
    for name, mods in rows:
        cfg = config.replace(modules=mods)
        if controlled_digest(cfg) != digest:  # pragma: no cover - replace() only touches modules
            raise RuntimeError("ablation rows differ outside the module toggles")
        t0 = time.perf_counter()
        bundle = run_training(cfg, teacher=teacher if mods["distillation"] else None)
        ev = evaluate_scenes(bundle.student, cfg, eval_scenes)
        row = {"configuration": name, "ap50": ev["ap50"], "ap70": ev["ap70"], "config_digest": digest,
               "seconds": round(time.perf_counter() - t0, 2), **mods}
        out_rows.append(row)
        bundles[name] = bundle
        if progress is not None:
            progress(row)
    return AblationResult(out_rows, bundles)


def monotone_violations(values, slack: float) -> list:
    """Indices ``i`` where ``values[i] < values[i-1] - slack``."""
    return [i for i in range(1, len(values)) if values[i] < values[i - 1] - slack]


def inversions(values) -> list:
    """(index, size) of every increase in a sequence that should not increase."""
    return [(i, values[i] - values[i - 1]) for i in range(1, len(values)) if values[i] > values[i - 1]]
