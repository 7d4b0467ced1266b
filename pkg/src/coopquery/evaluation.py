"""Association/detection metrics, noise sweeps, lift-strategy comparison and bandwidth costs."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .fusion import fuse
from .geometry import (BehindCamera, CameraModel, GeometryError, LiftStrategy, PixelProposal, RigidTransform,
                       lift_proposal, project_point)
from .matching import MatchResult
from .scene import AgentConfig, NoiseSpec, Vantage, generate_scene, in_sensing_region

DEFAULT_BUCKETS = (0.0, 50.0, 100.0, 150.0)


@dataclass(frozen=True)
class AssociationMetrics:
    true_positive: int
    false_positive: int
    false_negative: int

    @property
    def precision(self) -> float:
        n = self.true_positive + self.false_positive
        return 1.0 if n == 0 else self.true_positive / n

    @property
    def recall(self) -> float:
        n = self.true_positive + self.false_negative
        return 1.0 if n == 0 else self.true_positive / n

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)

    def __add__(self, other: "AssociationMetrics") -> "AssociationMetrics":
        return AssociationMetrics(self.true_positive + other.true_positive,
                                  self.false_positive + other.false_positive,
                                  self.false_negative + other.false_negative)


def association_metrics(match_result, gt_correspondences) -> AssociationMetrics:
    """Pair-level counts. Accepts one result with its GT pairs, or parallel lists of both."""
    if isinstance(match_result, MatchResult):
        match_result, gt_correspondences = [match_result], [gt_correspondences]
    total = AssociationMetrics(0, 0, 0)
    for result, gt in zip(match_result, gt_correspondences, strict=True):
        gt = {(int(u), int(x)) for u, x in gt}
        if len({u for u, _ in gt}) != len(gt) or len({x for _, x in gt}) != len(gt):
            raise ValueError("ground-truth pairing must be injective")
        pred = result.pair_set
        total = total + AssociationMetrics(len(pred & gt), len(pred - gt), len(gt - pred))
    return total


@dataclass(frozen=True)
class RangeBuckets:
    edges: tuple = DEFAULT_BUCKETS

    def __post_init__(self):
        e = tuple(float(v) for v in self.edges)
        if len(e) < 2 or any(b <= a for a, b in zip(e, e[1:])):
            raise ValueError("bucket edges must be strictly increasing")
        object.__setattr__(self, "edges", e)

    def labels(self) -> list:
        return [f"{a:g}-{b:g}" for a, b in zip(self.edges, self.edges[1:])]

    def index(self, r: float) -> Optional[int]:
        """Bucket of range ``r``; buckets are half-open except the last, which is closed."""
        e = self.edges
        if r < e[0] or r > e[-1]:
            return None
        for i in range(len(e) - 1):
            if r < e[i + 1]:
                return i
        return len(e) - 2


@dataclass
class _BucketTally:
    n_gt: int = 0
    hits: int = 0
    duplicates: int = 0
    sq_err: float = 0.0

    def report(self) -> dict:
        return {
            "n_gt": self.n_gt,
            "n_hit": self.hits,
            "n_duplicate": self.duplicates,
            "sq_error": self.sq_err,
            "recall": 1.0 if self.n_gt == 0 else self.hits / self.n_gt,
            "duplicate_rate": 0.0 if self.n_gt == 0 else self.duplicates / self.n_gt,
            "position_rmse": 0.0 if self.hits == 0 else math.sqrt(self.sq_err / self.hits),
        }


def _planar_range(p) -> float:
    return float(math.hypot(p[0], p[1]))


def match_detections(detections, gt_objects, match_radius: float = 2.0):
    """Greedy centre-distance assignment, most confident detection first.

    Each detection claims the nearest unclaimed GT within ``match_radius``;
    failing that it is a duplicate of the nearest claimed GT in range, else a
    false positive. Returns ``(claims, duplicates)`` as lists of
    ``(detection_index, gt_index, distance)``.
    """
    if match_radius <= 0:
        raise ValueError("match_radius must be positive")
    gt_pos = np.array([o.center_glb for o in gt_objects]).reshape(-1, 3)
    claimed = np.zeros(len(gt_pos), dtype=bool)
    order = sorted(range(len(detections)), key=lambda i: -detections[i].confidence)
    claims, duplicates = [], []
    for i in order:
        if len(gt_pos) == 0:
            break
        d = np.linalg.norm(gt_pos - detections[i].position, axis=1)
        free = np.where(~claimed & (d <= match_radius), d, np.inf)
        j = int(np.argmin(free))
        if np.isfinite(free[j]):
            claimed[j] = True
            claims.append((i, j, float(d[j])))
            continue
        taken = np.where(claimed & (d <= match_radius), d, np.inf)
        j = int(np.argmin(taken))
        if np.isfinite(taken[j]):
            duplicates.append((i, j, float(d[j])))
    return claims, duplicates


def detection_metrics(detections, gt_objects, buckets: RangeBuckets = RangeBuckets(),
                      match_radius: float = 2.0) -> dict:
    """Per range bucket: recall, duplicate rate and position RMSE, bucketed by the GT's planar range."""
    tallies = {label: _BucketTally() for label in buckets.labels()}
    labels = buckets.labels()
    gt_bucket = []
    for o in gt_objects:
        b = buckets.index(_planar_range(o.center_glb))
        gt_bucket.append(b)
        if b is not None:
            tallies[labels[b]].n_gt += 1
    claims, duplicates = match_detections(detections, gt_objects, match_radius)
    for _, j, d in claims:
        if gt_bucket[j] is not None:
            t = tallies[labels[gt_bucket[j]]]
            t.hits += 1
            t.sq_err += d * d
    for _, j, _ in duplicates:
        if gt_bucket[j] is not None:
            tallies[labels[gt_bucket[j]]].duplicates += 1
    return {label: t.report() for label, t in tallies.items()}


def pool_buckets(reports: Sequence[dict]) -> dict:
    """Combine per-bucket reports (from several buckets or frames) into one."""
    t = _BucketTally()
    for b in reports:
        t.n_gt += b["n_gt"]
        t.hits += b["n_hit"]
        t.duplicates += b["n_duplicate"]
        t.sq_err += b["sq_error"]
    return t.report()


SWEEP_COLUMNS = ("matcher", "sigma_t", "sigma_r", "tau", "f1", "precision", "assoc_recall",
                 "duplicate_rate", "recall", "tp", "fp", "fn")


def evaluate_frames(matcher, frames, buckets: RangeBuckets = RangeBuckets(), match_radius: float = 2.0) -> dict:
    """Association counts and fused-detection recall/duplicates for one matcher over frames."""
    assoc = AssociationMetrics(0, 0, 0)
    reports = []
    for fr in frames:
        results = matcher.match(fr.ego, fr.coops)
        assoc = assoc + association_metrics(results, fr.gt_pairs)
        dets = fuse(fr.ego, fr.coops, results)
        reports.extend(detection_metrics(dets, fr.gt_objects, buckets, match_radius).values())
    det = pool_buckets(reports)
    return {
        "f1": assoc.f1, "precision": assoc.precision, "assoc_recall": assoc.recall,
        "duplicate_rate": det["duplicate_rate"], "recall": det["recall"],
        "tp": assoc.true_positive, "fp": assoc.false_positive, "fn": assoc.false_negative,
    }


def noise_sweep(scene_config, matchers: dict, noise_grid: Sequence[NoiseSpec], seeds: Sequence[int],
                buckets: RangeBuckets = RangeBuckets(), match_radius: float = 2.0, threads: int = 1) -> list:
    """Evaluate every matcher on every noise level with the same scenes and noise draws.

    ``matchers`` maps a display name to an object with ``match(ego, coops)``
    and an optional ``tau`` attribute. Rows come back sorted by
    ``(sigma_t, sigma_r, matcher)`` whatever the thread count.
    """
    if not matchers or not noise_grid or not seeds:
        raise ValueError("matchers, noise grid and seeds must be non-empty")

    def one_level(noise: NoiseSpec) -> list:
        frames = [scene_config.frame(int(s), noise) for s in seeds]
        rows = []
        for name, m in matchers.items():
            row = {"matcher": name, "sigma_t": noise.sigma_translation, "sigma_r": noise.sigma_rotation,
                   "tau": getattr(m, "tau", None)}
            row.update(evaluate_frames(m, frames, buckets, match_radius))
            rows.append(row)
        return rows

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            chunks = list(pool.map(one_level, noise_grid))
    else:
        chunks = [one_level(n) for n in noise_grid]
    rows = [r for chunk in chunks for r in chunk]
    names = list(matchers)
    rows.sort(key=lambda r: (r["sigma_t"], r["sigma_r"], names.index(r["matcher"])))
    return rows


def noise_grid(translations: Sequence[float], rotations: Sequence[float]) -> list:
    return [NoiseSpec(float(t), float(r)) for t in translations for r in rotations]


def drone_agent(altitude: float = 25.0, pitch: float = math.radians(45.0), max_range: float = 170.0,
                fov_half_angle: float = math.radians(60.0)) -> AgentConfig:
    return AgentConfig.mounted(99, (0.0, 0.0, 0.0), 0.0, altitude, pitch, vantage=Vantage.HIGH_VANTAGE,
                               max_range=max_range, fov_half_angle=fov_half_angle, detect_prob_base=1.0,
                               obs_noise_base=0.0, obs_noise_per_meter=0.0)


LIFT_COLUMNS = ("bucket", "strategy", "n", "mean_error", "median_error", "failures")


def strategy_comparison(n_objects: int, height_noise_sigma: float, depth_sigma0: float, depth_sigma_per_meter: float,
                        seeds: Sequence[int], agent: Optional[AgentConfig] = None,
                        buckets: RangeBuckets = RangeBuckets()) -> list:
    """Lifted-position error per range bucket for height-derived vs direct-depth lifting.

    Predicted heights get constant noise ``height_noise_sigma``; predicted
    depths get ``depth_sigma0 + depth_sigma_per_meter * depth``. Objects are
    bucketed by planar distance from the agent. Rows whose lift fails
    (degenerate ray, negative depth) are counted under ``failures``.
    """
    agent = agent or drone_agent()
    cam: CameraModel = agent.camera
    to_local: RigidTransform = agent.pose_glb.inverse()
    labels = buckets.labels()
    errors = {(b, s): [] for b in labels for s in LiftStrategy}
    failures = {(b, s): 0 for b in labels for s in LiftStrategy}
    extent = buckets.edges[-1]
    for seed in seeds:
        scene = generate_scene(n_objects, extent, [agent], int(seed))
        rng = np.random.default_rng([int(seed), 11])
        for obj in scene.objects:
            z_h, z_d = rng.standard_normal(2)
            if not in_sensing_region(agent, obj.center_glb):
                continue
            try:
                u, v, depth = project_point(cam, obj.center_glb)
            except BehindCamera:
                continue
            truth = to_local.apply(obj.center_glb)
            b = buckets.index(_planar_range(truth))
            if b is None:
                continue
            prop = PixelProposal(u, v, 1.0, obj.center_glb[2] + height_noise_sigma * z_h,
                                 depth + (depth_sigma0 + depth_sigma_per_meter * depth) * z_d)
            for strategy in LiftStrategy:
                try:
                    p = lift_proposal(cam, prop, strategy, to_local)
                except GeometryError:
                    failures[(labels[b], strategy)] += 1
                    continue
                errors[(labels[b], strategy)].append(float(np.linalg.norm(p - truth)))
    rows = []
    for label in labels:
        for strategy in LiftStrategy:
            e = errors[(label, strategy)]
            rows.append({
                "bucket": label, "strategy": strategy.value, "n": len(e),
                "mean_error": float(np.mean(e)) if e else float("nan"),
                "median_error": float(np.median(e)) if e else float("nan"),
                "failures": failures[(label, strategy)],
            })
    return rows


@dataclass(frozen=True)
class CostModelConfig:
    range: float = 100.0
    cell_size: float = 1.0
    channels: int = 2
    bytes_per_value: int = 4
    n_queries: int = 100
    bytes_per_query: int = 190
    rate_hz: float = 10.0

    def __post_init__(self):
        for name in ("range", "cell_size", "channels", "bytes_per_value", "n_queries", "bytes_per_query", "rate_hz"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "CostModelConfig":
        return cls(range=d["dense"]["range"], cell_size=d["dense"]["cell_size"], channels=d["dense"]["channels"],
                   bytes_per_value=d["dense"]["bytes_per_value"], n_queries=d["sparse"]["n_queries"],
                   bytes_per_query=d["sparse"]["bytes_per_query"], rate_hz=d["rate_hz"])


# Dense: 200 x 200 one-metre BEV cells for a 100 m range, 2 float32 channels at 10 Hz.
# Sparse: 100 transmitted queries of 190 bytes at 10 Hz.
CALIBRATED_COST = CostModelConfig()


def cost_report(config: CostModelConfig = CALIBRATED_COST) -> dict:
    """Bytes per second of a dense BEV grid vs sparse queries."""
    cells = (2.0 * config.range / config.cell_size) ** 2
    dense = cells * config.channels * config.bytes_per_value * config.rate_hz
    sparse = float(config.n_queries * config.bytes_per_query) * config.rate_hz
    return {"dense_bps": dense, "sparse_bps": sparse, "ratio": dense / sparse}
