"""Command-line front end.

Every run writes ``manifest.json`` into its output directory; passing that
file back through ``--config`` reproduces the run byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch
import yaml

from .caa import CaaParams, DivergenceDetected, TrainingExample, train_caa
from .config import (ConfigInvalid, SceneConfig, jsonable, noise_from, resolve_config, set_dotted, stable_seed,
                     validate_run_config)
from .estimators import ContextAwareMatcher, GreedyRadiusMatcher, HungarianMatcher
from .evaluation import (LIFT_COLUMNS, SWEEP_COLUMNS, CostModelConfig, RangeBuckets, cost_report, detection_metrics,
                         drone_agent, evaluate_frames, noise_grid, noise_sweep, pool_buckets,
                         strategy_comparison)
from .fusion import fuse
from .serialization import (IoFailure, read_params, write_csv, write_frame, write_json, write_jsonl, write_loss_curve,
                            write_params, write_plot_data)

log = logging.getLogger("coopquery")

SUBCOMMANDS = ("gen-scenes", "train", "eval", "sweep-noise", "compare-lift", "cost-report")
EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 2, 3, 4

# seed streams: scene i of a split is generated from stable_seed(run seed, split, i)
SPLIT_SCENES, SPLIT_TRAIN, SPLIT_EVAL = 0, 1, 2


def split_seeds(seed: int, split: int, n: int) -> list:
    return [stable_seed(seed, split, i) for i in range(n)]


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"cannot parse {path}: {str(exc).splitlines()[0]}") from exc
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{path}: top level must be a mapping")
    # a manifest carries the resolved config under "config"
    if set(data) == {"subcommand", "config"}:
        data = data["config"]
    return data


def build_config(args) -> dict:
    cfg = resolve_config(load_config(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigInvalid(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_dotted(cfg, key.strip(), value)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.threads is not None:
        cfg["threads"] = args.threads
    try:
        validate_run_config(cfg)
    except (KeyError, TypeError) as exc:
        raise ConfigInvalid(f"malformed config: {exc}") from exc
    return cfg


def _baselines(cfg: dict) -> dict:
    m = cfg["matcher"]
    return {"greedy": GreedyRadiusMatcher(m["greedy_radius"]).fit(),
            "hungarian": HungarianMatcher(m["hungarian_threshold"]).fit()}


def _resolve_params_path(cfg: dict, required: bool) -> Optional[Path]:
    path = cfg["matcher"]["params_path"]
    if path is None:
        candidate = Path(cfg["out"]) / "params.bin"
        if candidate.exists():
            path = str(candidate.resolve())
    if path is None:
        if required:
            raise IoFailure("no trained parameters: set matcher.params_path or run train into --out first")
        return None
    cfg["matcher"]["params_path"] = str(Path(path).resolve())
    return Path(path)


def _caa_matchers(cfg: dict, params: CaaParams, taus: Sequence[float]) -> dict:
    m = cfg["matcher"]
    return {f"caa_tau{tau:g}": ContextAwareMatcher.from_params(params, tau=tau, temperature=m["temperature"],
                                                                sinkhorn_iters=m["sinkhorn_iters"])
            for tau in taus}


def cmd_gen_scenes(cfg: dict, scene: SceneConfig, out: Path) -> None:
    noise = noise_from(cfg["eval"])
    for i, s in enumerate(split_seeds(cfg["seed"], SPLIT_SCENES, cfg["data"]["n_scenes"])):
        write_frame(out / "scenes" / f"scene_{i:04d}.txt", scene.frame(s, noise))


def train_params(cfg: dict, scene: SceneConfig, callback=None):
    m, t = cfg["matcher"], cfg["train"]
    frames = [scene.frame(s) for s in split_seeds(cfg["seed"], SPLIT_TRAIN, cfg["data"]["train_scenes"])]
    data = [TrainingExample.from_frame(f) for f in frames]
    init = CaaParams.init(m["n_layers"], m["dim"], m["heads"], seed=t["init_seed"])
    return train_caa(init, data, t["steps"], t["learning_rate"], seed=cfg["seed"], temperature=m["temperature"],
                     sinkhorn_iters=m["sinkhorn_iters"], bce_weight=t["bce_weight"], batch_size=t["batch_size"],
                     clip_norm=t["clip_norm"], callback=callback)


def cmd_train(cfg: dict, scene: SceneConfig, out: Path) -> None:
    def progress(step, loss):
        if step % 100 == 0:
            log.info("step %d loss %.4f", step, loss)

    params, curve = train_params(cfg, scene, progress)
    write_params(out / "params.bin", params)
    write_loss_curve(out / "loss.csv", curve)


EVAL_COLUMNS = ("matcher",) + SWEEP_COLUMNS[1:]


def cmd_eval(cfg: dict, scene: SceneConfig, out: Path) -> None:
    matchers = _baselines(cfg)
    path = _resolve_params_path(cfg, required=False)
    if path is not None:
        matchers.update(_caa_matchers(cfg, read_params(path), cfg["sweep"]["taus"]))
    noise = noise_from(cfg["eval"])
    buckets = RangeBuckets(tuple(cfg["eval"]["buckets"]))
    radius = cfg["eval"]["match_radius"]
    seeds = split_seeds(cfg["seed"], SPLIT_EVAL, cfg["data"]["eval_scenes"])
    frames = [scene.frame(s, noise) for s in seeds]
    rows, bucket_rows, det_lines = [], [], []
    for name, m in matchers.items():
        row = {"matcher": name, "sigma_t": noise.sigma_translation, "sigma_r": noise.sigma_rotation,
               "tau": getattr(m, "tau", None)}
        row.update(evaluate_frames(m, frames, buckets, radius))
        rows.append(row)
        per_bucket: dict = {label: [] for label in buckets.labels()}
        for seed, fr in zip(seeds, frames):
            dets = fuse(fr.ego, fr.coops, m.match(fr.ego, fr.coops))
            for label, b in detection_metrics(dets, fr.gt_objects, buckets, radius).items():
                per_bucket[label].append(b)
            for d in dets:
                det_lines.append({"frame_seed": seed, "matcher": name, **d.to_record()})
        for label, reports in per_bucket.items():
            bucket_rows.append({"matcher": name, "bucket": label, **pool_buckets(reports)})
    write_csv(out / "metrics.csv", EVAL_COLUMNS, rows)
    write_csv(out / "metrics_by_range.csv", ("matcher", "bucket", "n_gt", "recall", "duplicate_rate",
                                             "position_rmse"), bucket_rows)
    write_jsonl(out / "detections.jsonl", det_lines)


def cmd_sweep(cfg: dict, scene: SceneConfig, out: Path) -> None:
    s = cfg["sweep"]
    matchers = _baselines(cfg)
    path = _resolve_params_path(cfg, required=False)
    if path is not None:
        matchers.update(_caa_matchers(cfg, read_params(path), s["taus"]))
    rows = noise_sweep(scene, matchers, noise_grid(s["translation"], s["rotation"]),
                       split_seeds(cfg["seed"], SPLIT_EVAL, s["n_seeds"]), RangeBuckets(tuple(cfg["eval"]["buckets"])),
                       cfg["eval"]["match_radius"], threads=int(cfg["threads"]))
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    planar = [r for r in rows if r["sigma_r"] == s["rotation"][0]]
    write_plot_data(out / "sweep_translation_plot.csv", planar, "sigma_t", "f1", ("matcher",))
    yawed = [r for r in rows if r["sigma_t"] == s["translation"][0]]
    write_plot_data(out / "sweep_rotation_plot.csv", yawed, "sigma_r", "f1", ("matcher",))


def cmd_compare_lift(cfg: dict, scene: SceneConfig, out: Path) -> None:
    lift = cfg["lift"]
    agent = drone_agent(lift["altitude"], math.radians(lift["pitch_deg"]))
    rows = strategy_comparison(lift["n_objects"], lift["height_sigma"], lift["depth_sigma0"],
                               lift["depth_sigma_per_meter"], split_seeds(cfg["seed"], SPLIT_EVAL, lift["n_seeds"]),
                               agent, RangeBuckets(tuple(cfg["eval"]["buckets"])))
    write_csv(out / "lift.csv", LIFT_COLUMNS, rows)


def cmd_cost(cfg: dict, scene: SceneConfig, out: Path) -> None:
    report = cost_report(CostModelConfig.from_dict(cfg["cost"]))
    write_json(out / "cost.json", report)
    print(json.dumps(report, sort_keys=True))


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-noise": cmd_sweep,
    "compare-lift": cmd_compare_lift,
    "cost-report": cmd_cost,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coopquery", description="Cooperative query association toolkit.")
    sub = parser.add_subparsers(dest="subcommand", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH", help="YAML or JSON config (a manifest.json also works)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a leaf key by dotted path")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--seed", type=int, metavar="N")
        p.add_argument("--threads", type=int, metavar="N")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(kind: str, msg: str, code: int) -> int:
    print(f"error: {kind}: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = make_parser().parse_args(argv)  # exits 2 with usage on an unknown subcommand
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        cfg = build_config(args)
        scene = SceneConfig.from_dict(cfg["scene"])
        out = Path(cfg["out"])
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoFailure(f"cannot create {out}: {exc}") from exc
        COMMANDS[args.subcommand](cfg, scene, out)
        write_json(out / "manifest.json", {"subcommand": args.subcommand, "config": jsonable(cfg)})
    except ConfigInvalid as exc:
        return _fail("ConfigInvalid", exc, EXIT_CONFIG)
    except (IoFailure, OSError) as exc:
        return _fail("IoFailure", exc, EXIT_IO)
    except DivergenceDetected as exc:
        return _fail("DivergenceDetected", exc, EXIT_DIVERGED)
    return 0


if __name__ == "__main__":
    sys.exit(main())
