"""On-disk formats: scene files, parameter files, CSV tables and detection lines.

Scene file layout (one record per line, whitespace separated, floats written
with 17 significant digits)::

    SCENE <seed> <extent>
    OBJECTS <n>
    <id> <class_id> <cx> <cy> <cz> <sx> <sy> <sz>
    AGENTS <n>
    <agent_id> <vantage> <max_range> <fov_half_angle> <detect_prob_base> <obs_noise_base>
        <obs_noise_per_meter> <pose r00..r22> <pose t0..t2> <fx> <fy> <cx> <cy> <cam r00..r22> <cam t0..t2>
    QUERIES <n>
    <agent_id> <index> <gt_id> <confidence> <px> <py> <pz> <sx> <sy> <sz> <descriptor...>

Query positions are in the ego frame; ``gt_id`` is -1 for clutter.

Parameter file: the 8-byte magic ``CAAPRM01``, then ``L``, ``d`` and ``heads``
as little-endian int64, then every tensor in declaration order as
little-endian float64.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .caa import CaaParams, param_shapes
from .geometry import CameraModel, RigidTransform
from .scene import AgentConfig, Frame, QuerySet, Scene, SceneObject, Vantage

PARAMS_MAGIC = b"CAAPRM01"
_HEADER = struct.Struct("<8sqqq")


class IoFailure(OSError):
    pass


def _fmt(x: float) -> str:
    return "%.17g" % float(x)


def _line(*fields) -> str:
    return " ".join(_fmt(f) if isinstance(f, (float, np.floating)) else str(f) for f in fields) + "\n"


def _ensure_parent(path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {path.parent}: {exc}") from exc


def _write_text(path, text: str) -> None:
    path = Path(path)
    _ensure_parent(path)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _agent_fields(a: AgentConfig) -> list:
    cam = a.camera.to_record()
    return ([a.agent_id, a.vantage.value, float(a.max_range), float(a.fov_half_angle), float(a.detect_prob_base),
             float(a.obs_noise_base), float(a.obs_noise_per_meter)]
            + [float(v) for v in a.pose_glb.rotation.ravel()] + [float(v) for v in a.pose_glb.translation]
            + [float(cam[k]) for k in CameraModel.RECORD_KEYS])


def format_scene(scene: Scene, query_sets: Sequence[QuerySet] = ()) -> str:
    out = [_line("SCENE", scene.seed, float(scene.extent)), _line("OBJECTS", len(scene.objects))]
    for o in scene.objects:
        out.append(_line(o.id, o.class_id, *map(float, o.center_glb), *map(float, o.size)))
    out.append(_line("AGENTS", len(scene.agents)))
    out.extend(_line(*_agent_fields(a)) for a in scene.agents)
    out.append(_line("QUERIES", sum(len(q) for q in query_sets)))
    for qs in query_sets:
        for i in range(len(qs)):
            out.append(_line(qs.agent_id, i, int(qs.gt_ids[i]), float(qs.confidences[i]),
                             *map(float, qs.positions[i]), *map(float, qs.sizes[i]),
                             *map(float, qs.descriptors[i])))
    return "".join(out)


def write_scene(path, scene: Scene, query_sets: Sequence[QuerySet] = ()) -> None:
    _write_text(path, format_scene(scene, query_sets))


def write_frame(path, frame: Frame) -> None:
    write_scene(path, frame.scene, [frame.ego, *frame.coops])


def _parse_agent(tok: list) -> AgentConfig:
    vals = [float(t) for t in tok[2:]]
    agent_id, vantage = int(tok[0]), Vantage(tok[1])
    max_range, fov, p_det, nb, npm = vals[:5]
    pose = RigidTransform(np.array(vals[5:14]).reshape(3, 3), np.array(vals[14:17]))
    cam = CameraModel.from_record(dict(zip(CameraModel.RECORD_KEYS, vals[17:])))
    return AgentConfig(agent_id, pose, cam, vantage, max_range, fov, p_det, nb, npm)


def parse_scene(text: str):
    """Inverse of :func:`format_scene`; returns ``(scene, {agent_id: QuerySet})``."""
    lines = [ln.split() for ln in text.splitlines() if ln.strip()]
    try:
        it = iter(lines)
        head = next(it)
        if head[0] != "SCENE":
            raise ValueError("missing SCENE header")
        seed, extent = int(head[1]), float(head[2])

        def section(name):
            tok = next(it)
            if tok[0] != name:
                raise ValueError(f"expected {name} section, found {tok[0]}")
            return [next(it) for _ in range(int(tok[1]))]

        objects = [SceneObject(int(t[0]), [float(v) for v in t[2:5]], [float(v) for v in t[5:8]], int(t[1]))
                   for t in section("OBJECTS")]
        agents = [_parse_agent(t) for t in section("AGENTS")]
        rows: dict = {}
        for t in section("QUERIES"):
            rows.setdefault(int(t[0]), []).append(t)
    except (StopIteration, IndexError, ValueError) as exc:
        raise IoFailure(f"malformed scene file: {exc}") from exc
    sets = {}
    for agent_id, rs in rows.items():
        rs.sort(key=lambda t: int(t[1]))
        a = np.array([[float(v) for v in t[2:]] for t in rs])
        sets[agent_id] = QuerySet(agent_id, a[:, 2:5], a[:, 8:], a[:, 1], a[:, 5:8], a[:, 0].astype(np.int64))
    return Scene(objects, agents, extent, seed), sets


def read_scene(path):
    return parse_scene(_read_text(path))


def write_params(path, params: CaaParams) -> None:
    path = Path(path)
    _ensure_parent(path)
    blob = [_HEADER.pack(PARAMS_MAGIC, params.n_layers, params.dim, params.heads)]
    for name in param_shapes(params.n_layers, params.dim):
        blob.append(params.tensors[name].detach().numpy().astype("<f8").tobytes())
    try:
        path.write_bytes(b"".join(blob))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_params(path) -> CaaParams:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise IoFailure(f"{path}: truncated header")
    magic, n_layers, dim, heads = _HEADER.unpack_from(raw)
    if magic != PARAMS_MAGIC:
        raise IoFailure(f"{path}: not a parameter file")
    shapes = param_shapes(n_layers, dim)
    expected = _HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(raw) != expected:
        raise IoFailure(f"{path}: expected {expected} bytes, found {len(raw)}")
    tensors, offset = {}, _HEADER.size
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        tensors[name] = torch.from_numpy(arr.copy())
        offset += 8 * n
    return CaaParams(n_layers, dim, heads, tensors)


def format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))  # shortest string that round-trips exactly
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    path = Path(path)
    _ensure_parent(path)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([format_cell(r.get(c)) for c in columns])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_csv(path) -> list:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def write_loss_curve(path, curve: Sequence[float]) -> None:
    write_csv(path, ("step", "loss"), ({"step": i, "loss": float(v)} for i, v in enumerate(curve)))


def write_plot_data(path, rows: Sequence[dict], x: str, y: str, series: Sequence[str]) -> None:
    """Long-format ``(x, y, series)`` triples; ``series`` joins the given columns with ``/``."""
    triples = [{"x": r[x], "y": r[y], "series": "/".join(format_cell(r[s]) for s in series)} for r in rows]
    write_csv(path, ("x", "y", "series"), triples)


def write_jsonl(path, records) -> None:
    _write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def write_detections(path, detections) -> None:
    write_jsonl(path, (d.to_record() for d in detections))


def write_json(path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise IoFailure(f"{path}: invalid JSON ({exc})") from exc

