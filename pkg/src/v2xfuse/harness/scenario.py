"""Synthetic two-agent (vehicle + roadside unit) lidar scenes.

The world frame coincides with nothing in particular: the ego pose at time t
is drawn at a random world offset and heading, objects are placed in the ego
frame and mapped out, and each agent renders its own cloud in its sensor
frame. Boxes are sampled on their visible faces with a 1/r^2 density falloff
and culled by a segment-vs-box occlusion test against every other solid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..detection import RotatedBox, boxes_to_array
from ..fusion import INFRA, VEHICLE
from ..geometry import GridMeta, Pose6DoF, invert_rigid, pose_to_world, rotation_matrix, transform_points
from ..pillars import PointCloud
from .config import ExperimentConfig

EGO_HEIGHT = 1.7  # sensor above ground
INFRA_HEIGHT = 6.0
SURFACE_RATE = 450.0  # points per m^2 at 1 m for density 1
EGO_RANGE = 60.0
INFRA_RANGE = 45.0
CAR_HEIGHT = 1.5
GROUND_FULL_RANGE = 12.0

NS_SCENE = 11  # seed namespaces
NS_TRAIN = 1
NS_EVAL = 2


class ScenarioError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneObject:
    box: RotatedBox  # at time t, ego(t) frame
    velocity: tuple = (0.0, 0.0)
    height: float = CAR_HEIGHT

    def at(self, tau: float) -> RotatedBox:
        """The box displaced along its velocity by ``tau`` seconds (negative = past)."""
        b = self.box
        return RotatedBox(b.cx + self.velocity[0] * tau, b.cy + self.velocity[1] * tau, b.w, b.l, b.yaw,
                          b.score, b.class_id)


@dataclass
class Scenario:
    scene_id: str
    ego_poses: tuple  # (t-1, t) world poses
    infra_pose: Pose6DoF
    objects: tuple
    delay: float
    frame_dt: float
    clouds: dict  # agent type -> (prev, curr), each in its own sensor frame
    visible: np.ndarray  # per object: >= 1 point in a current-frame cloud
    clutter: tuple = field(default=())  # static solids (RotatedBox, height) in the ego(t) frame

    @property
    def ego_pose(self) -> Pose6DoF:
        return self.ego_poses[1]

    @property
    def occluded(self) -> np.ndarray:
        return ~self.visible

    @property
    def gt_boxes(self) -> list:
        return [o.box for o, v in zip(self.objects, self.visible) if v]

    def timestamps(self) -> dict:
        return {VEHICLE: (-self.frame_dt, 0.0), INFRA: (-self.delay - self.frame_dt, -self.delay)}

    def infra_boxes(self) -> list:
        """Object boxes at the (delayed) infrastructure capture time, ego(t) frame."""
        return [o.at(-self.delay) for o in self.objects]

    def fingerprint(self) -> bytes:
        parts = [self.scene_id.encode(), np.float64(self.delay).tobytes()]
        parts += [p.as_array().tobytes() for p in (*self.ego_poses, self.infra_pose)]
        for agent in (VEHICLE, INFRA):
            parts += [c.points.tobytes() for c in self.clouds[agent]]
        parts += [boxes_to_array([o.box for o in self.objects]).tobytes(), self.visible.tobytes()]
        return b"|".join(parts)


def _ego_frame_pose(world_of_ego: np.ndarray, x, y, z, yaw) -> Pose6DoF:
    """World pose of a sensor placed at (x, y, z, yaw) in the ego(t) frame."""
    local = np.eye(4)
    local[:3, :3] = rotation_matrix(0.0, yaw, 0.0)
    local[:3, 3] = (x, y, z)
    M = world_of_ego @ local
    wyaw = math.atan2(M[1, 0], M[0, 0])
    return Pose6DoF(M[0, 3], M[1, 3], M[2, 3], 0.0, wyaw, 0.0)


def _place_objects(rng, n, meta: GridMeta, max_speed: float, blockers: list):
    margin_x, margin_y = 2.5, 1.5
    placed: list = []
    tries = 0
    while len(placed) < n:
        tries += 1
        if tries > 200 * max(n, 1):
            raise ScenarioError(f"could not place {n} non-overlapping objects in {meta.shape} grid")
        w = rng.uniform(1.6, 2.0)
        l = rng.uniform(3.8, 4.6)  # noqa: E741
        yaw = rng.uniform(-math.pi / 3, math.pi / 3)
        cx = rng.uniform(meta.x_min + margin_x, meta.x_max - margin_x)
        cy = rng.uniform(meta.y_min + margin_y, meta.y_max - margin_y)
        cand = RotatedBox(cx, cy, w, l, yaw)
        inside = all(meta.x_min <= x <= meta.x_max and meta.y_min <= y <= meta.y_max for x, y in cand.corners())
        if not inside:
            continue
        grown = RotatedBox(cx, cy, w + 0.6, l + 0.6, yaw)
        others = [o.box for o in placed] + blockers
        if others and kernels.rotated_iou_matrix(boxes_to_array([grown]), boxes_to_array(others)).max() > 0:
            continue
        speed = rng.uniform(0.0, max_speed)
        placed.append(SceneObject(cand, (speed * math.cos(yaw), speed * math.sin(yaw))))
    return placed


def _solid_faces(box: RotatedBox, height: float):
    """(centre(3), normal(3), u(3), v(3), area) for the four sides and the top."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    fwd = np.array([c, s, 0.0])
    left = np.array([-s, c, 0.0])
    up = np.array([0.0, 0.0, 1.0])
    ctr = np.array([box.cx, box.cy, 0.5 * height])
    faces = []
    for normal, half, span, span_len in ((fwd, box.l, left, box.w), (-fwd, box.l, left, box.w),
                                         (left, box.w, fwd, box.l), (-left, box.w, fwd, box.l)):
        faces.append((ctr + 0.5 * half * normal, normal, span * span_len, up * height, span_len * height))
    faces.append((ctr + 0.5 * height * up, up, fwd * box.l, left * box.w, box.l * box.w))
    return faces


def _occluded(sensor: np.ndarray, pts: np.ndarray, solids: list, skip: int | None) -> np.ndarray:
    """Segment sensor->point hits another solid below that solid's roof."""
    hit = np.zeros(len(pts), dtype=bool)
    if not len(pts):
        return hit
    for k, (box, height) in enumerate(solids):
        if k == skip:
            continue
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        R = np.array([[c, s], [-s, c]])
        a = R @ (sensor[:2] - (box.cx, box.cy))
        b = (pts[:, :2] - (box.cx, box.cy)) @ R.T
        d = b - a
        t0 = np.zeros(len(pts))
        t1 = np.ones(len(pts))
        ok = np.ones(len(pts), dtype=bool)
        for axis, half in ((0, 0.5 * box.l), (1, 0.5 * box.w)):
            da = d[:, axis]
            flat = np.abs(da) < 1e-12
            ok &= ~(flat & (np.abs(a[axis]) > half))
            with np.errstate(divide="ignore", invalid="ignore"):
                ta = (-half - a[axis]) / da
                tb = (half - a[axis]) / da
            lo = np.where(flat, -np.inf, np.minimum(ta, tb))
            hi = np.where(flat, np.inf, np.maximum(ta, tb))
            t0 = np.maximum(t0, lo)
            t1 = np.minimum(t1, hi)
        ok &= t0 < t1
        ok &= t0 < 1.0 - 1e-6
        dz = pts[:, 2] - sensor[2]
        z_low = sensor[2] + np.minimum(t0 * dz, np.minimum(t1, 1.0) * dz)  # lowest height inside the footprint
        hit |= ok & (z_low < height)
    return hit


@dataclass(frozen=True)
class SensorModel:
    density: float
    z_noise: float
    intensity: tuple  # (object low, high, ground low, high)
    max_range: float
    fov_deg: float = 360.0


def _sensor_models(cfg: ExperimentConfig) -> dict:
    d = cfg.data
    return {
        VEHICLE: SensorModel(d.ego_density, d.ego_z_noise, (0.15, 0.55, 0.02, 0.2), EGO_RANGE),
        INFRA: SensorModel(d.infra_density, d.infra_z_noise, (0.45, 0.95, 0.2, 0.45), INFRA_RANGE,
                           d.infra_fov_deg),
    }


def render_cloud(rng, sensor_in_ego: np.ndarray, sensor_world: Pose6DoF, ground_of_ego: np.ndarray,
                 solids: list, n_objects: int, model: SensorModel, meta: GridMeta, clutter_points: int):
    """Render in the ego(t) ground frame, then express the points in the sensor frame.

    Returns the cloud and a per-object hit count for the first ``n_objects`` solids.
    """
    sensor = sensor_in_ego[:3, 3]
    heading = math.atan2(sensor_in_ego[1, 0], sensor_in_ego[0, 0])
    chunks, labels = [], []
    for k, (box, height) in enumerate(solids):
        for centre, normal, u, v, area in _solid_faces(box, height):
            to_s = sensor - centre
            dist = float(np.linalg.norm(to_s))
            cos = float(normal @ to_s) / max(dist, 1e-9)
            if cos <= 0 or dist > model.max_range:
                continue
            m = rng.poisson(model.density * SURFACE_RATE * area * cos / max(dist * dist, 4.0))
            if not m:
                continue
            ab = rng.uniform(-0.5, 0.5, size=(m, 2))
            pts = centre + ab[:, :1] * u + ab[:, 1:] * v
            pts = pts[~_occluded(sensor, pts, solids, k)]
            if len(pts):
                inten = rng.uniform(model.intensity[0], model.intensity[1], size=len(pts))
                chunks.append(np.column_stack([pts, inten]))
                labels.append(np.full(len(pts), k if k < n_objects else -1))
    # ground returns over the grid footprint, thinning beyond GROUND_FULL_RANGE
    m = rng.poisson(clutter_points * model.density)
    ground = np.column_stack([rng.uniform(meta.x_min - 2, meta.x_max + 2, size=m),
                              rng.uniform(meta.y_min - 2, meta.y_max + 2, size=m), np.zeros(m)])
    r = np.linalg.norm(ground[:, :2] - sensor[:2], axis=1)
    keep = (r <= model.max_range) & (rng.uniform(size=m) < (GROUND_FULL_RANGE / np.maximum(r, 1e-6)) ** 2)
    ground = ground[keep]
    ground = ground[~_occluded(sensor, ground, solids, None)]
    chunks.append(np.column_stack([ground, rng.uniform(model.intensity[2], model.intensity[3], len(ground))]))
    labels.append(np.full(len(ground), -1))
    pts = np.concatenate(chunks)
    lab = np.concatenate(labels)
    if model.fov_deg < 360.0:
        az = np.arctan2(pts[:, 1] - sensor[1], pts[:, 0] - sensor[0]) - heading
        az = (az + math.pi) % (2 * math.pi) - math.pi
        inside = np.abs(az) <= math.radians(model.fov_deg) / 2
        pts, lab = pts[inside], lab[inside]
    hits = np.bincount(lab[lab >= 0], minlength=n_objects)[:n_objects]
    if model.z_noise > 0:
        pts[:, 2] += rng.normal(0.0, model.z_noise, size=len(pts))
    to_sensor = invert_rigid(pose_to_world(sensor_world)) @ ground_of_ego
    pts = np.column_stack([transform_points(to_sensor, pts[:, :3]), pts[:, 3]])
    return PointCloud(pts), hits


def _clutter(rng, n, meta: GridMeta, blockers: list):
    out = []
    tries = 0
    while len(out) < n and tries < 50 * max(n, 1):
        tries += 1
        side = rng.uniform(0.3, 0.8)
        cand = RotatedBox(rng.uniform(meta.x_min, meta.x_max), rng.uniform(meta.y_min, meta.y_max),
                          side, side * rng.uniform(1.0, 1.6), rng.uniform(-math.pi, math.pi))
        grown = RotatedBox(cand.cx, cand.cy, cand.w + 0.6, cand.l + 0.6, cand.yaw)
        others = blockers + [c for c, _ in out]
        if others and kernels.rotated_iou_matrix(boxes_to_array([grown]), boxes_to_array(others)).max() > 0:
            continue
        out.append((cand, float(rng.uniform(0.4, 2.6))))
    return out


def scene_seed(seed: int, namespace: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(namespace), int(index)])


def generate_scenario(seed: int, config: ExperimentConfig, index: int = 0, namespace: int = NS_SCENE,
                      n_objects: int | None = None) -> Scenario:
    """Deterministic scene for ``(seed, namespace, index)``."""
    d = config.data
    meta = config.grid.meta()
    ss = scene_seed(seed, namespace, index)
    place_ss, ego_ss, inf_ss = ss.spawn(3)
    rng = np.random.default_rng(place_ss)

    ego_world = Pose6DoF(rng.uniform(-50, 50), rng.uniform(-50, 50), EGO_HEIGHT, 0.0, rng.uniform(-math.pi, math.pi), 0.0)
    W_ego = pose_to_world(ego_world)
    ground_of_ego = W_ego.copy()
    ground_of_ego[:3, 3] -= W_ego[:3, :3] @ np.array([0.0, 0.0, EGO_HEIGHT])  # ego(t) frame at ground level

    speed = rng.uniform(0.0, d.ego_max_speed)
    dyaw = rng.uniform(-0.05, 0.05)
    back = speed * d.frame_dt
    ego_prev = _ego_frame_pose(ground_of_ego, -back * math.cos(dyaw), back * math.sin(dyaw), EGO_HEIGHT, -dyaw)

    side = 1.0 if rng.uniform() < 0.5 else -1.0
    ix = rng.uniform(-0.3, 0.3) * (meta.x_max - meta.x_min)
    iy = side * (meta.y_max + rng.uniform(0.5, 2.5))
    target = (rng.uniform(-5, 5), 0.0)
    iyaw = math.atan2(target[1] - iy, target[0] - ix) + rng.uniform(-0.1, 0.1)
    infra_pose = _ego_frame_pose(ground_of_ego, ix, iy, INFRA_HEIGHT, iyaw)

    count = int(rng.integers(d.min_objects, d.max_objects + 1)) if n_objects is None else int(n_objects)
    ego_footprint = RotatedBox(0.0, 0.0, 2.0, 4.6, 0.0)
    objects = _place_objects(rng, count, meta, d.max_speed, [ego_footprint])
    clutter = _clutter(rng, d.clutter_clusters, meta, [ego_footprint] + [o.box for o in objects])
    delay = float(rng.uniform(0.0, d.max_delay))

    models = _sensor_models(config)
    frames = {
        VEHICLE: ((ego_prev, -d.frame_dt), (ego_world, 0.0)),
        INFRA: ((infra_pose, -delay - d.frame_dt), (infra_pose, -delay)),
    }
    clouds = {}
    visible = np.zeros(count, dtype=bool)
    for agent, agent_ss in ((VEHICLE, ego_ss), (INFRA, inf_ss)):
        r = np.random.default_rng(agent_ss)
        pair = []
        for slot, (pose, tau) in enumerate(frames[agent]):
            sensor_in_ego = invert_rigid(ground_of_ego) @ pose_to_world(pose)
            solids = [(o.at(tau), o.height) for o in objects] + clutter
            cloud, hits = render_cloud(r, sensor_in_ego, pose, ground_of_ego, solids, count, models[agent],
                                       meta, d.clutter_points)
            pair.append(cloud)
            if slot == 1:
                visible |= hits > 0
        clouds[agent] = tuple(pair)
    return Scenario(f"s{namespace}-{index}", (ego_prev, ego_world), infra_pose, tuple(objects), delay,
                    d.frame_dt, clouds, visible, tuple(clutter))


def scenario_set(config: ExperimentConfig, split: str) -> list:
    if split == "train":
        return [generate_scenario(config.seed, config, i, NS_TRAIN) for i in range(config.data.train_scenes)]
    if split == "eval":
        return [generate_scenario(config.seed, config, i, NS_EVAL) for i in range(config.data.eval_scenes)]
    raise ValueError(f"unknown split {split!r}")
