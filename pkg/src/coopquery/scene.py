"""Synthetic multi-agent scenes with range-dependent sensing noise.

Everything that draws random numbers takes an explicit integer seed, so
scenes, observations and pose perturbations are pure functions of their
arguments.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import CameraModel, RigidTransform, yaw_matrix

CAR_SIZE_MEAN = np.array([4.5, 1.9, 1.6])
CAR_SIZE_STD = np.array([0.4, 0.1, 0.1])
MIN_SEPARATION = 2.0
MAX_PLACEMENT_TRIES = 1000


class PlacementFailure(RuntimeError):
    pass


class Vantage(enum.Enum):
    HIGH_VANTAGE = "high_vantage"
    GROUND_LEVEL = "ground_level"


class Visibility(enum.Enum):
    CO_VISIBLE = "co_visible"
    EGO_MISSED = "ego_missed"
    EGO_INVISIBLE = "ego_invisible"
    EGO_ONLY = "ego_only"
    UNOBSERVED = "unobserved"


class RoiShape(enum.Enum):
    SQUARE = "square"
    CIRCLE = "circle"


@dataclass(frozen=True, eq=False)
class SceneObject:
    id: int
    center_glb: np.ndarray
    size: np.ndarray
    class_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "center_glb", np.asarray(self.center_glb, dtype=np.float64).reshape(3))
        size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if np.any(size <= 0):
            raise ValueError("object size components must be positive")
        object.__setattr__(self, "size", size)

    def __eq__(self, other):
        if not isinstance(other, SceneObject):
            return NotImplemented
        return (self.id == other.id and self.class_id == other.class_id
                and np.array_equal(self.center_glb, other.center_glb)
                and np.array_equal(self.size, other.size))

    __hash__ = None


@dataclass(frozen=True)
class AgentConfig:
    agent_id: int
    pose_glb: RigidTransform
    camera: CameraModel
    vantage: Vantage = Vantage.GROUND_LEVEL
    max_range: float = 100.0
    fov_half_angle: float = math.pi / 3
    detect_prob_base: float = 0.95
    obs_noise_base: float = 0.2
    obs_noise_per_meter: float = 0.01

    def __post_init__(self):
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if not 0 < self.fov_half_angle <= math.pi:
            raise ValueError("fov_half_angle must lie in (0, pi]")
        if not 0 <= self.detect_prob_base <= 1:
            raise ValueError("detect_prob_base must lie in [0, 1]")
        if self.obs_noise_base < 0 or self.obs_noise_per_meter < 0:
            raise ValueError("noise parameters must be non-negative")

    @classmethod
    def mounted(cls, agent_id: int, position, yaw: float, camera_height: float, pitch: float,
                **kwargs) -> "AgentConfig":
        """Agent at ``position`` (global) heading ``yaw`` with a forward camera ``camera_height`` above it."""
        pose = RigidTransform.from_yaw(yaw, position)
        cam_pos = np.asarray(position, dtype=np.float64) + np.array([0.0, 0.0, camera_height])
        return cls(agent_id, pose, CameraModel.looking(cam_pos, yaw, pitch), **kwargs)


@dataclass(frozen=True, eq=False)
class Query:
    owner_agent: int
    position: np.ndarray
    size: np.ndarray
    descriptor: np.ndarray
    confidence: float
    gt_object_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "size", np.asarray(self.size, dtype=np.float64).reshape(3))
        object.__setattr__(self, "descriptor", np.asarray(self.descriptor, dtype=np.float64).ravel())
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


@dataclass(frozen=True)
class NoiseSpec:
    sigma_translation: float = 0.0
    sigma_rotation: float = 0.0  # degrees

    def __post_init__(self):
        if self.sigma_translation < 0 or self.sigma_rotation < 0:
            raise ValueError("noise levels must be non-negative")


@dataclass(frozen=True)
class Roi:
    center: tuple = (0.0, 0.0, 0.0)
    extent: float = 150.0
    shape: RoiShape = RoiShape.CIRCLE

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError("ROI extent must be positive")

    def contains(self, point) -> bool:
        d = np.asarray(point, dtype=np.float64)[:2] - np.asarray(self.center, dtype=np.float64)[:2]
        if self.shape is RoiShape.CIRCLE:
            return bool(math.hypot(d[0], d[1]) <= self.extent)
        return bool(np.max(np.abs(d)) <= self.extent)


@dataclass(eq=False)
class Scene:
    objects: list
    agents: list
    extent: float
    seed: int

    def object_by_id(self, object_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(object_id)

    def agent(self, agent_id: int) -> AgentConfig:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(agent_id)


def generate_scene(n_objects: int, extent: float, agents: Sequence[AgentConfig], seed: int,
                   n_classes: int = 3) -> Scene:
    """Place ``n_objects`` car-sized boxes uniformly in ``[-extent, extent]^2``.

    Centres keep at least 2 m apart; a new position is redrawn up to
    ``MAX_PLACEMENT_TRIES`` times before giving up.
    """
    if n_objects < 0:
        raise ValueError("n_objects must be non-negative")
    if extent <= 0:
        raise ValueError("extent must be positive")
    rng = np.random.default_rng(seed)
    placed = np.empty((0, 2))
    objects = []
    for i in range(n_objects):
        for _ in range(MAX_PLACEMENT_TRIES):
            xy = rng.uniform(-extent, extent, size=2)
            if placed.size == 0 or np.min(np.hypot(*(placed - xy).T)) >= MIN_SEPARATION:
                break
        else:
            raise PlacementFailure(f"could not place object {i} with {MIN_SEPARATION} m separation")
        placed = np.vstack([placed, xy])
        size = np.maximum(CAR_SIZE_MEAN + CAR_SIZE_STD * rng.standard_normal(3), 0.5)
        class_id = int(rng.integers(n_classes))
        objects.append(SceneObject(i, np.array([xy[0], xy[1], size[2] / 2]), size, class_id))
    return Scene(objects, list(agents), float(extent), int(seed))


def in_sensing_region(agent: AgentConfig, point_glb) -> bool:
    """True when the point lies inside the camera cone and within ``max_range``."""
    offset = np.asarray(point_glb, dtype=np.float64) - agent.camera.center_glb
    rng_ = float(np.linalg.norm(offset))
    if rng_ > agent.max_range:
        return False
    if rng_ == 0.0:
        return True
    cos_angle = float(offset @ agent.camera.forward_glb) / rng_
    return cos_angle >= math.cos(agent.fov_half_angle) - 1e-12


def sensing_range(agent: AgentConfig, point_glb) -> float:
    return float(np.linalg.norm(np.asarray(point_glb, dtype=np.float64) - agent.camera.center_glb))


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def identity_embedding(scene_seed: int, object_id: int, dim: int) -> np.ndarray:
    return _unit(np.random.default_rng([scene_seed, object_id, dim, 1]).standard_normal(dim))


def class_embedding(class_id: int, dim: int) -> np.ndarray:
    return _unit(np.random.default_rng([class_id, dim, 2]).standard_normal(dim))


@dataclass(frozen=True)
class DescriptorModel:
    """How synthetic appearance descriptors are built from object identity and class."""

    dim: int = 32
    identity_weight: float = 1.0
    class_weight: float = 1.0
    noise: float = 0.5

    def make(self, scene: Scene, obj: SceneObject, rng: np.random.Generator) -> np.ndarray:
        v = (self.class_weight * class_embedding(obj.class_id, self.dim)
             + self.identity_weight * identity_embedding(scene.seed, obj.id, self.dim)
             + self.noise / math.sqrt(self.dim) * rng.standard_normal(self.dim))
        return _unit(v)


def observe(scene: Scene, agent: AgentConfig, seed: int,
            descriptors: DescriptorModel = DescriptorModel()) -> list:
    """Simulate the agent's detector: returns queries in the agent's local frame.

    Detection succeeds with probability ``detect_prob_base * (1 - 0.5 * range / max_range)``
    for objects inside the sensing region. Positions get isotropic Gaussian
    noise with ``sigma = obs_noise_base + obs_noise_per_meter * range``.
    """
    rng = np.random.default_rng([seed, agent.agent_id])
    to_local = agent.pose_glb.inverse()
    queries = []
    for obj in scene.objects:
        # draw every variate regardless of visibility so one object's fate
        # does not shift another object's random stream
        u_detect = rng.uniform()
        eps = rng.standard_normal(3)
        desc = descriptors.make(scene, obj, rng)
        if not in_sensing_region(agent, obj.center_glb):
            continue
        r = sensing_range(agent, obj.center_glb)
        p_detect = agent.detect_prob_base * min(max(1.0 - 0.5 * r / agent.max_range, 0.0), 1.0)
        if u_detect >= p_detect:
            continue
        sigma = agent.obs_noise_base + agent.obs_noise_per_meter * r
        position = to_local.apply(obj.center_glb) + sigma * eps
        confidence = 1.0 - 0.5 * min(r / agent.max_range, 1.0)
        queries.append(Query(agent.agent_id, position, obj.size.copy(), desc, confidence, obj.id))
    order = rng.permutation(len(queries))
    return [queries[i] for i in order]


def perturb_pose(pose: RigidTransform, noise: NoiseSpec, seed: int) -> RigidTransform:
    """Inject planar localization error: x/y translation and a yaw about the agent origin.

    The standard-normal draws depend only on ``seed``, so sweeping the noise
    level with a fixed seed scales one error direction (common random numbers).
    """
    z = np.random.default_rng(seed).standard_normal(3)
    dt = np.array([z[0], z[1], 0.0]) * noise.sigma_translation
    dyaw = math.radians(noise.sigma_rotation * z[2])
    return RigidTransform(yaw_matrix(dyaw) @ pose.rotation, pose.translation + dt)


def project_queries_to_ego(queries: Iterable[Query], believed_coop_pose: RigidTransform,
                           ego_pose: RigidTransform) -> list:
    """Map cooperative queries into the ego frame through the (possibly wrong) believed pose."""
    T = ego_pose.inverse() @ believed_coop_pose
    return [replace(q, position=T.apply(q.position)) for q in queries]


def gt_union(gt_ego: Sequence[SceneObject], gt_coop: Sequence[SceneObject], coop_to_ego: RigidTransform,
             roi: Roi) -> list:
    """Union of ego and cooperative annotations in the ego frame, restricted to the ROI.

    ``gt_ego`` is already in the ego frame; ``gt_coop`` is in the cooperative
    agent's frame. When an id appears on both sides the ego annotation is kept.
    """
    merged = {}
    for obj in gt_ego:
        merged.setdefault(obj.id, obj)
    for obj in gt_coop:
        if obj.id not in merged:
            merged[obj.id] = replace(obj, center_glb=coop_to_ego.apply(obj.center_glb))
    return [obj for obj in merged.values() if roi.contains(obj.center_glb)]


def objects_in_frame(objects: Sequence[SceneObject], frame_from_glb: RigidTransform) -> list:
    return [replace(o, center_glb=frame_from_glb.apply(o.center_glb)) for o in objects]


def label_visibility(scene: Scene, ego_agent: AgentConfig, ego_queries: Sequence[Query],
                     coop_queries: Sequence[Query]) -> dict:
    """Tag every scene object as co-visible, ego-missed, ego-invisible, ego-only or unobserved."""
    ego_ids = {q.gt_object_id for q in ego_queries}
    coop_ids = {q.gt_object_id for q in coop_queries}
    tags = {}
    for obj in scene.objects:
        by_ego = obj.id in ego_ids
        by_coop = obj.id in coop_ids
        if by_ego and by_coop:
            tags[obj.id] = Visibility.CO_VISIBLE
        elif by_coop:
            tags[obj.id] = (Visibility.EGO_MISSED if in_sensing_region(ego_agent, obj.center_glb)
                            else Visibility.EGO_INVISIBLE)
        elif by_ego:
            tags[obj.id] = Visibility.EGO_ONLY
        else:
            tags[obj.id] = Visibility.UNOBSERVED
    return tags


@dataclass(eq=False)
class QuerySet:
    """Array view of one agent's queries, the form every matcher consumes."""

    agent_id: int
    positions: np.ndarray
    descriptors: np.ndarray
    confidences: np.ndarray
    sizes: np.ndarray
    gt_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.positions)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(n, 3)
        desc = np.asarray(self.descriptors, dtype=np.float64)
        self.descriptors = desc.reshape(n, -1) if n or desc.ndim != 2 else desc
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(n)
        self.sizes = np.asarray(self.sizes, dtype=np.float64).reshape(n, 3)
        if self.gt_ids is None:
            self.gt_ids = np.full(n, -1, dtype=np.int64)
        self.gt_ids = np.asarray(self.gt_ids, dtype=np.int64).reshape(n)

    def __len__(self):
        return len(self.positions)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    @classmethod
    def from_queries(cls, queries: Sequence[Query], agent_id: Optional[int] = None,
                     dim: Optional[int] = None) -> "QuerySet":
        if agent_id is None:
            agent_id = queries[0].owner_agent if queries else -1
        if not queries:
            return cls(agent_id, np.zeros((0, 3)), np.zeros((0, dim or 0)), np.zeros(0), np.zeros((0, 3)))
        return cls(
            agent_id,
            np.stack([q.position for q in queries]),
            np.stack([q.descriptor for q in queries]),
            np.array([q.confidence for q in queries]),
            np.stack([q.size for q in queries]),
            np.array([-1 if q.gt_object_id is None else q.gt_object_id for q in queries]),
        )

    def to_queries(self) -> list:
        return [Query(self.agent_id, self.positions[i], self.sizes[i], self.descriptors[i],
                      float(self.confidences[i]), None if self.gt_ids[i] < 0 else int(self.gt_ids[i]))
                for i in range(len(self))]

    def translated(self, offset) -> "QuerySet":
        return replace(self, positions=self.positions + np.asarray(offset, dtype=np.float64))


def gt_correspondences(coop: QuerySet, ego: QuerySet) -> list:
    """Ground-truth (coop_index, ego_index) pairs from shared object ids."""
    ego_index = {}
    for j, gid in enumerate(ego.gt_ids):
        if gid >= 0:
            ego_index.setdefault(int(gid), j)
    return [(i, ego_index[int(gid)]) for i, gid in enumerate(coop.gt_ids) if gid >= 0 and int(gid) in ego_index]


@dataclass(eq=False)
class Frame:
    """One cooperative perception instant, everything expressed in the ego frame."""

    scene: Scene
    ego_agent: AgentConfig
    ego: QuerySet
    coops: list
    gt_pairs: list
    gt_objects: list
    believed_poses: list


def simulate_frame(scene: Scene, ego_agent: AgentConfig, coop_agents: Sequence[AgentConfig],
                   noise: NoiseSpec, seed: int, descriptors: DescriptorModel = DescriptorModel(),
                   roi: Optional[Roi] = None) -> Frame:
    """Observe with every agent, corrupt the cooperative poses and align into the ego frame."""
    ego_q = observe(scene, ego_agent, seed, descriptors)
    ego = QuerySet.from_queries(ego_q, ego_agent.agent_id, descriptors.dim)
    coops, pairs, believed = [], [], []
    ego_from_glb = ego_agent.pose_glb.inverse()
    gt_coop_objects = []
    for agent in coop_agents:
        q = observe(scene, agent, seed, descriptors)
        pose = perturb_pose(agent.pose_glb, noise, int(np.random.SeedSequence([seed, agent.agent_id, 7]).generate_state(1)[0]))
        projected = project_queries_to_ego(q, pose, ego_agent.pose_glb)
        qs = QuerySet.from_queries(projected, agent.agent_id, descriptors.dim)
        coops.append(qs)
        pairs.append(gt_correspondences(qs, ego))
        believed.append(pose)
        gt_coop_objects.extend(o for o in scene.objects if in_sensing_region(agent, o.center_glb))
    gt_ego_objects = [o for o in scene.objects if in_sensing_region(ego_agent, o.center_glb)]
    roi = roi or Roi(extent=max([ego_agent.max_range] + [a.max_range for a in coop_agents]) * 1.5)
    gt = gt_union(objects_in_frame(gt_ego_objects, ego_from_glb), objects_in_frame(gt_coop_objects, ego_from_glb),
                  RigidTransform.identity(), roi)
    return Frame(scene, ego_agent, ego, coops, pairs, gt, believed)
