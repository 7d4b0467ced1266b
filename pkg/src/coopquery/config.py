"""Scene and run configuration: plain nested dicts in, validated dataclasses out."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

import numpy as np
import yaml

from .scene import (AgentConfig, DescriptorModel, NoiseSpec, Vantage, generate_scene,
                    simulate_frame)


class ConfigInvalid(ValueError):
    pass


def _ego_default() -> dict:
    return {"agent_id": 0, "position": [-50.0, 0.0, 0.0], "yaw_deg": 0.0, "camera_height": 1.6,
            "pitch_deg": 2.0, "vantage": "ground_level", "max_range": 100.0, "fov_half_deg": 60.0,
            "detect_prob_base": 0.9, "obs_noise_base": 0.2, "obs_noise_per_meter": 0.01}


def _drone_default() -> dict:
    return {"agent_id": 1, "position": [10.0, 0.0, 0.0], "yaw_deg": 180.0, "camera_height": 25.0,
            "pitch_deg": 45.0, "vantage": "high_vantage", "max_range": 100.0, "fov_half_deg": 60.0,
            "detect_prob_base": 0.9, "obs_noise_base": 0.2, "obs_noise_per_meter": 0.01}


def build_agent(spec: dict) -> AgentConfig:
    try:
        return AgentConfig.mounted(
            int(spec["agent_id"]), [float(v) for v in spec["position"]], math.radians(float(spec["yaw_deg"])),
            float(spec["camera_height"]), math.radians(float(spec["pitch_deg"])),
            vantage=Vantage(spec.get("vantage", "ground_level")),
            max_range=float(spec["max_range"]), fov_half_angle=math.radians(float(spec["fov_half_deg"])),
            detect_prob_base=float(spec["detect_prob_base"]), obs_noise_base=float(spec["obs_noise_base"]),
            obs_noise_per_meter=float(spec["obs_noise_per_meter"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad agent spec {spec!r}: {exc}") from exc


@dataclass
class SceneConfig:
    n_objects: int = 35
    extent: float = 60.0
    n_classes: int = 3
    ego: dict = field(default_factory=_ego_default)
    coops: list = field(default_factory=lambda: [_drone_default()])
    descriptor_dim: int = 32
    descriptor_identity_weight: float = 1.0
    descriptor_class_weight: float = 1.0
    descriptor_noise: float = 0.6

    def __post_init__(self):
        if self.n_objects < 0:
            raise ConfigInvalid("n_objects must be non-negative")
        if self.extent <= 0:
            raise ConfigInvalid("extent must be positive")
        if self.descriptor_dim < 1:
            raise ConfigInvalid("descriptor_dim must be >= 1")
        if not self.coops:
            raise ConfigInvalid("at least one cooperative agent is required")
        ids = [self.ego["agent_id"]] + [c["agent_id"] for c in self.coops]
        if len(set(ids)) != len(ids):
            raise ConfigInvalid("agent ids must be unique")
        self.ego_agent  # validates
        self.coop_agents

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "SceneConfig":
        d = dict(d or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown scene keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    @property
    def ego_agent(self) -> AgentConfig:
        return build_agent(self.ego)

    @property
    def coop_agents(self) -> list:
        return [build_agent(c) for c in self.coops]

    @property
    def descriptor_model(self) -> DescriptorModel:
        return DescriptorModel(self.descriptor_dim, self.descriptor_identity_weight,
                               self.descriptor_class_weight, self.descriptor_noise)

    def scene(self, seed: int):
        return generate_scene(self.n_objects, self.extent, [self.ego_agent, *self.coop_agents], seed,
                              self.n_classes)

    def frame(self, seed: int, noise: NoiseSpec = NoiseSpec()):
        return simulate_frame(self.scene(seed), self.ego_agent, self.coop_agents, noise, seed,
                              self.descriptor_model)


DEFAULT_RUN_CONFIG: dict = {
    "seed": 0,
    "scene": SceneConfig().to_dict(),
    "data": {"n_scenes": 20, "train_scenes": 200, "eval_scenes": 40},
    "matcher": {
        "n_layers": 1, "dim": 32, "heads": 1, "tau": 0.4, "temperature": 0.1, "sinkhorn_iters": 20,
        "greedy_radius": 4.0, "hungarian_threshold": 4.0, "params_path": None,
    },
    "train": {"steps": 2000, "learning_rate": 1.0, "batch_size": 4, "bce_weight": 1.0, "clip_norm": 1.0,
              "init_seed": 0},
    "eval": {"sigma_translation": 1.0, "sigma_rotation": 0.0, "match_radius": 2.0,
             "buckets": [0.0, 50.0, 100.0, 150.0]},
    "sweep": {"translation": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2], "rotation": [0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
              "taus": [0.4, 0.8], "n_seeds": 20},
    "lift": {"n_objects": 200, "height_sigma": 0.3, "depth_sigma0": 0.0, "depth_sigma_per_meter": 0.05, "n_seeds": 20,
             "altitude": 25.0, "pitch_deg": 45.0},
    "cost": {"dense": {"range": 100.0, "cell_size": 1.0, "channels": 2, "bytes_per_value": 4},
             "sparse": {"n_queries": 100, "bytes_per_query": 190}, "rate_hz": 10.0},
    "out": "runs/default",
    "threads": 1,
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_dotted(cfg: dict, dotted: str, raw_value: str) -> None:
    """Apply a ``key.sub=value`` override; the value is parsed as YAML."""
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigInvalid(f"--set {dotted}: '{k}' is not a section")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigInvalid(f"--set {dotted}: unknown key")
    try:
        value = yaml.safe_load(raw_value)
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"--set {dotted}: cannot parse {raw_value!r}") from exc
    if isinstance(value, str):
        # YAML 1.1 reads exponent forms without a dot (1e-3) as strings
        try:
            value = float(value)
        except ValueError:
            pass
    node[keys[-1]] = value


def _check_unknown(base: dict, given: dict, path: str = "") -> None:
    for k, v in given.items():
        if k not in base:
            raise ConfigInvalid(f"unknown config key '{path}{k}'")
        if isinstance(v, dict) and isinstance(base[k], dict) and k != "scene":
            _check_unknown(base[k], v, f"{path}{k}.")


def resolve_config(user: Optional[dict]) -> dict:
    user = user or {}
    if not isinstance(user, dict):
        raise ConfigInvalid("config root must be a mapping")
    _check_unknown(DEFAULT_RUN_CONFIG, user)
    return deep_merge(DEFAULT_RUN_CONFIG, user)


def validate_run_config(cfg: dict) -> SceneConfig:
    """Check every module precondition before any work starts."""
    scene = SceneConfig.from_dict(cfg["scene"])
    m, t, s, lift = cfg["matcher"], cfg["train"], cfg["sweep"], cfg["lift"]
    checks = [
        (isinstance(cfg["seed"], int), "seed must be an integer"),
        (0 < m["tau"] <= 1, "matcher.tau must lie in (0, 1]"),
        (m["temperature"] > 0, "matcher.temperature must be positive"),
        (m["sinkhorn_iters"] >= 1, "matcher.sinkhorn_iters must be >= 1"),
        (m["n_layers"] >= 0, "matcher.n_layers must be >= 0"),
        (m["dim"] == scene.descriptor_dim, "matcher.dim must equal scene.descriptor_dim"),
        (m["heads"] >= 1 and m["dim"] % m["heads"] == 0, "matcher.heads must divide matcher.dim"),
        (m["greedy_radius"] > 0 and m["hungarian_threshold"] > 0, "matcher radii must be positive"),
        (t["steps"] >= 1, "train.steps must be >= 1"),
        (t["learning_rate"] >= 0, "train.learning_rate must be >= 0"),
        (isinstance(t["batch_size"], int) and t["batch_size"] >= 1, "train.batch_size must be an integer >= 1"),
        (t["clip_norm"] is None or t["clip_norm"] > 0, "train.clip_norm must be positive or null"),
        (isinstance(t["init_seed"], int), "train.init_seed must be an integer"),
        (len(s["translation"]) > 0 and len(s["rotation"]) > 0, "sweep grids must be non-empty"),
        (all(v >= 0 for v in s["translation"] + s["rotation"]), "sweep noise levels must be >= 0"),
        (all(0 < v <= 1 for v in s["taus"]), "sweep.taus must lie in (0, 1]"),
        (s["n_seeds"] >= 1 and lift["n_seeds"] >= 1, "n_seeds must be >= 1"),
        (lift["n_objects"] >= 1 and lift["altitude"] > 0, "lift.n_objects and lift.altitude must be positive"),
        (lift["height_sigma"] >= 0 and lift["depth_sigma0"] >= 0 and lift["depth_sigma_per_meter"] >= 0,
         "lift noise levels must be >= 0"),
        (cfg["data"]["n_scenes"] >= 1 and cfg["data"]["train_scenes"] >= 1 and cfg["data"]["eval_scenes"] >= 1,
         "data scene counts must be >= 1"),
        (list(cfg["eval"]["buckets"]) == sorted(set(cfg["eval"]["buckets"])), "eval.buckets must increase strictly"),
        (cfg["eval"]["match_radius"] > 0, "eval.match_radius must be positive"),
        (int(cfg["threads"]) >= 1, "threads must be >= 1"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigInvalid(msg)
    for sect in ("dense", "sparse"):
        if any(v <= 0 for v in cfg["cost"][sect].values()):
            raise ConfigInvalid(f"cost.{sect} values must be positive")
    if cfg["cost"]["rate_hz"] <= 0:
        raise ConfigInvalid("cost.rate_hz must be positive")
    return scene


def stable_seed(*parts: int) -> int:
    """Derive an independent 32-bit seed from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def noise_from(cfg_eval: dict) -> NoiseSpec:
    return NoiseSpec(float(cfg_eval["sigma_translation"]), float(cfg_eval["sigma_rotation"]))


def jsonable(obj: Any):
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
