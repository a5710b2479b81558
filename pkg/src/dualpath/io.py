"""Readers and writers for every on-disk format the pipeline exchanges.

Scene directory layout::

    cloud.ply                 x, y, z float32 (+ optional red/green/blue uchar)
    frames/<id>.json          camera: intrinsics + world-to-camera extrinsics
    frames/<id>.png           16-bit depth, millimetres, 0 = invalid
    gt.json, classes.json     optional ground truth and class table
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import DimensionMismatch, FormatError, IndexOutOfRange, MalformedHeader, NonMonotoneIndices
from .masks import InstanceMask, indices_from_runs, runs_from_indices
from .projection import CropBox, Mask2D
from .scene import (CameraFrame, ClassInfo, GroundTruth, GTInstance, PointCloud, Proposal,
                    ProposalSet, Scene, Source)

DPFV_MAGIC = b"DPFV"
DEPTH_SCALE = 1000.0


def dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"{path}: not valid JSON ({exc})") from exc


# --------------------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def save_ply(path, positions: np.ndarray, colors: np.ndarray | None = None) -> None:
    pos = np.asarray(positions, dtype="<f4")
    n = pos.shape[0]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(n, dtype=fields)
    rec["x"], rec["y"], rec["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        col = np.asarray(colors, dtype=np.uint8)
        rec["red"], rec["green"], rec["blue"] = col[:, 0], col[:, 1], col[:, 2]
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def load_ply(path) -> PointCloud:
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MalformedHeader(f"{path}: missing PLY magic or end_header")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise MalformedHeader(f"{path}: property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], "list"))
            elif tok[1] in _PLY_TYPES:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
            else:
                raise MalformedHeader(f"{path}: unknown property type {tok[1]!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise MalformedHeader(f"{path}: unsupported PLY format {fmt!r}")
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise MalformedHeader(f"{path}: no vertex element")
    vi = names.index("vertex")
    props = elements[vi][2]
    prop_names = [p[0] for p in props]
    if not {"x", "y", "z"} <= set(prop_names):
        raise MalformedHeader(f"{path}: vertex element lacks x/y/z")
    if any(kind == "list" for _, kind in props):
        raise MalformedHeader(f"{path}: list properties on vertices are not supported")
    count = elements[vi][1]

    if fmt == "ascii":
        text = data[body_start:].decode("ascii").split("\n")
        skip = sum(e[1] for e in elements[:vi])
        rows = [r.split() for r in text[skip: skip + count]]
        try:
            table = np.array(rows, dtype=np.float64)
        except ValueError as exc:
            raise MalformedHeader(f"{path}: bad ascii vertex rows ({exc})") from exc
        if table.shape != (count, len(props)):
            raise MalformedHeader(f"{path}: expected {count} vertex rows of {len(props)} values")
        cols = {name: table[:, i] for i, name in enumerate(prop_names)}
    else:
        offset = body_start
        for _, n, eprops in elements[:vi]:
            if any(k == "list" for _, k in eprops):
                raise MalformedHeader(f"{path}: list element precedes vertices")
            offset += n * np.dtype([(nm, "<" + k) for nm, k in eprops]).itemsize
        dt = np.dtype([(nm, "<" + k) for nm, k in props])
        if len(data) < offset + count * dt.itemsize:
            raise MalformedHeader(f"{path}: truncated vertex block")
        rec = np.frombuffer(data, dtype=dt, count=count, offset=offset)
        cols = {name: rec[name] for name in prop_names}
    positions = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float32)
    colors = None
    if {"red", "green", "blue"} <= set(prop_names):
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1).astype(np.uint8)
    return PointCloud(positions.astype(np.float64), colors)


# --------------------------------------------------------------------------- frames

def save_depth_png(path, depth: np.ndarray) -> None:
    mm = np.round(np.asarray(depth, dtype=np.float64) * DEPTH_SCALE)
    if mm.max(initial=0) > 65535 or mm.min(initial=0) < 0:
        raise ValueError("depth out of 16-bit millimetre range")
    Image.fromarray(mm.astype(np.uint16)).save(path)


def load_depth_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise MalformedHeader(f"{path}: depth must be single-channel")
    return (arr.astype(np.float64) / DEPTH_SCALE).astype(np.float32)


def frame_to_json(frame: CameraFrame) -> dict:
    return {
        "frame_id": frame.frame_id,
        "width": frame.width,
        "height": frame.height,
        "intrinsics": frame.intrinsics.tolist(),
        "extrinsics_world_to_camera": frame.pose.tolist(),
    }


def load_frame(json_path, depth_path=None) -> CameraFrame:
    json_path = Path(json_path)
    doc = read_json(json_path)
    for key in ("frame_id", "width", "height", "intrinsics", "extrinsics_world_to_camera"):
        if key not in doc:
            raise MalformedHeader(f"{json_path}: missing {key!r}")
    depth_path = Path(depth_path) if depth_path else json_path.with_suffix(".png")
    depth = load_depth_png(depth_path)
    return CameraFrame(str(doc["frame_id"]), np.array(doc["intrinsics"], dtype=np.float64),
                       np.array(doc["extrinsics_world_to_camera"], dtype=np.float64),
                       int(doc["width"]), int(doc["height"]), depth)


def save_frame(directory, frame: CameraFrame) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_json(directory / f"{frame.frame_id}.json", frame_to_json(frame))
    save_depth_png(directory / f"{frame.frame_id}.png", frame.depth)


# --------------------------------------------------------------------------- proposals

def _encode_mask(mask: InstanceMask) -> dict:
    runs = runs_from_indices(mask.indices)
    if 2 * runs.shape[0] < len(mask):
        return {"rle": runs.ravel().tolist()}
    return {"point_indices": mask.indices.tolist()}


def _decode_mask(entry: dict, n: int, where: str) -> InstanceMask:
    if "point_indices" in entry:
        raw = entry["point_indices"]
        if not isinstance(raw, list) or not raw:
            raise MalformedHeader(f"{where}: point_indices must be a non-empty list")
        idx = np.asarray(raw)
        if idx.dtype.kind not in "iu":
            raise MalformedHeader(f"{where}: point_indices must be integers")
        if idx.min() < 0 or idx.max() >= n:
            bad = int(idx.max()) if idx.max() >= n else int(idx.min())
            raise IndexOutOfRange(f"{where}: index out of range ({bad} not in [0, {n}))")
        if idx.size > 1 and not np.all(idx[1:] > idx[:-1]):
            raise NonMonotoneIndices(f"{where}: point_indices not strictly increasing")
    elif "rle" in entry:
        raw = entry["rle"]
        if not isinstance(raw, list) or len(raw) % 2 or not raw:
            raise MalformedHeader(f"{where}: rle must be a non-empty list of start,len pairs")
        try:
            idx = indices_from_runs(raw, limit=n)
        except IndexOutOfRange as exc:
            raise IndexOutOfRange(f"{where}: {exc}") from exc
        except NonMonotoneIndices as exc:
            raise NonMonotoneIndices(f"{where}: {exc}") from exc
    else:
        raise MalformedHeader(f"{where}: needs point_indices or rle")
    return InstanceMask(idx, check=False)


def _encode_feature(f: np.ndarray | None):
    if f is None:
        return None
    return [float(x) for x in np.asarray(f, dtype=np.float32)]


def proposals_to_json(pset: ProposalSet, extra: dict[str, dict] | None = None) -> dict:
    out = []
    for p in pset:
        entry = {"id": p.id, "source": p.source.value}
        entry.update(_encode_mask(p.mask))
        entry["feature"] = _encode_feature(p.feature)
        entry["score"] = p.score
        if p.class_id is not None:
            entry["class_id"] = p.class_id
        if extra and p.id in extra:
            entry.update(extra[p.id])
        out.append(entry)
    return {"num_points": pset.num_points, "feature_dim": pset.feature_dim, "proposals": out}


def save_proposals(pset: ProposalSet, path, extra: dict[str, dict] | None = None) -> None:
    write_json(path, proposals_to_json(pset, extra))


def _header_int(doc: dict, key: str, where, optional=False):
    val = doc.get(key)
    if val is None and optional:
        return None
    if not isinstance(val, int) or isinstance(val, bool) or val <= 0:
        raise MalformedHeader(f"{where}: malformed header field {key!r}={val!r}")
    return val


def proposals_from_json(doc, where="<proposals>") -> ProposalSet:
    if not isinstance(doc, dict) or "proposals" not in doc or not isinstance(doc["proposals"], list):
        raise MalformedHeader(f"{where}: malformed header (expected object with 'proposals' list)")
    n = _header_int(doc, "num_points", where)
    d = _header_int(doc, "feature_dim", where, optional=True)
    props = []
    for k, entry in enumerate(doc["proposals"]):
        loc = f"{where}: proposal #{k}"
        if not isinstance(entry, dict) or "id" not in entry:
            raise MalformedHeader(f"{loc}: missing id")
        loc = f"{where}: proposal {entry['id']!r}"
        mask = _decode_mask(entry, n, loc)
        feat = entry.get("feature")
        if feat is not None:
            feat = np.asarray(feat, dtype=np.float32).astype(np.float64)
            if d is None:
                raise MalformedHeader(f"{loc}: feature given but feature_dim is null")
            if feat.ndim != 1 or feat.size != d:
                raise DimensionMismatch(f"{loc}: dimension mismatch (got {feat.size}, declared {d})")
        try:
            source = Source(entry.get("source", "3d"))
        except ValueError as exc:
            raise MalformedHeader(f"{loc}: unknown source {entry.get('source')!r}") from exc
        score = entry.get("score")
        props.append(Proposal(str(entry["id"]), mask, feat, source,
                              None if score is None else float(score),
                              entry.get("class_id")))
    return ProposalSet(n, props, d)


def load_proposals(path) -> ProposalSet:
    return proposals_from_json(read_json(path), where=str(path))


# --------------------------------------------------------------------------- ground truth

def save_ground_truth(gt: GroundTruth, num_points: int, path, classes_path) -> None:
    inst = []
    for g in gt.instances:
        entry = {"id": g.id, "class_id": g.class_id}
        entry.update(_encode_mask(g.mask))
        inst.append(entry)
    write_json(path, {"num_points": num_points, "instances": inst})
    write_json(classes_path, {str(c): {"name": info.name, "subset": info.subset}
                              for c, info in sorted(gt.class_table.items())})


def load_class_table(path) -> dict[int, ClassInfo]:
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise MalformedHeader(f"{path}: class table must be an object")
    try:
        return {int(k): ClassInfo(str(v["name"]), str(v["subset"])) for k, v in doc.items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeader(f"{path}: malformed class entry ({exc})") from exc


def load_ground_truth(path, classes_path) -> GroundTruth:
    doc = read_json(path)
    key = "instances" if "instances" in doc else "proposals"
    if key not in doc:
        raise MalformedHeader(f"{path}: expected 'instances' list")
    n = _header_int(doc, "num_points", path)
    table = load_class_table(classes_path)
    inst = []
    for k, entry in enumerate(doc[key]):
        if "class_id" not in entry:
            raise MalformedHeader(f"{path}: instance #{k} lacks class_id")
        mask = _decode_mask(entry, n, f"{path}: instance #{k}")
        inst.append(GTInstance(str(entry.get("id", k)), mask, int(entry["class_id"])))
    return GroundTruth(inst, table)


# --------------------------------------------------------------------------- 2D masks

def masks2d_to_json(frame_id: str, width: int, height: int, masks: Sequence[Mask2D]) -> dict:
    return {
        "frame_id": frame_id, "width": width, "height": height,
        "masks": [{"id": m.id, "rle": m.runs.ravel().tolist(), "label": m.label,
                   "confidence": m.confidence} for m in masks],
    }


def save_masks2d(path, frame_id: str, width: int, height: int, masks: Sequence[Mask2D]) -> None:
    write_json(path, masks2d_to_json(frame_id, width, height, masks))


def load_masks2d(path) -> tuple[str, list[Mask2D]]:
    doc = read_json(path)
    for key in ("frame_id", "width", "height", "masks"):
        if key not in doc:
            raise MalformedHeader(f"{path}: missing {key!r}")
    fid, w, h = str(doc["frame_id"]), int(doc["width"]), int(doc["height"])
    out = []
    for k, m in enumerate(doc["masks"]):
        try:
            out.append(Mask2D(fid, w, h, np.asarray(m["rle"], dtype=np.int64).reshape(-1, 2),
                              str(m.get("id", k)), m.get("label"), m.get("confidence")))
        except (IndexOutOfRange, NonMonotoneIndices) as exc:
            raise type(exc)(f"{path}: mask #{k}: {exc}") from exc
    return fid, out


# --------------------------------------------------------------------------- features

def save_dpfv(path, vectors: np.ndarray) -> None:
    arr = np.asarray(vectors, dtype="<f4")
    if arr.ndim == 1:
        arr = arr[None, :]
    with open(path, "wb") as fh:
        fh.write(DPFV_MAGIC + struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def load_dpfv(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != DPFV_MAGIC:
        raise MalformedHeader(f"{path}: missing DPFV magic")
    count, dim = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * count * dim:
        raise DimensionMismatch(
            f"{path}: dimension mismatch (header says {count}x{dim}, payload has {len(data) - 12} bytes)")
    arr = np.frombuffer(data, dtype="<f4", offset=12).reshape(count, dim).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: non-finite feature values")
    return arr


def crop_to_json(crop: CropBox, proposal_id: str) -> dict:
    return {"proposal_id": proposal_id, "frame_id": crop.frame_id, "level": crop.level,
            "u_min": crop.u_min, "v_min": crop.v_min, "u_max": crop.u_max, "v_max": crop.v_max}


def save_crops(path, requests: Iterable[tuple[str, CropBox]]) -> None:
    with open(path, "w") as fh:
        for pid, crop in requests:
            fh.write(dumps(crop_to_json(crop, pid)) + "\n")


def load_crops(path) -> list[tuple[str, CropBox]]:
    out = []
    for k, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            out.append((str(d["proposal_id"]), CropBox(str(d["frame_id"]), int(d["u_min"]),
                        int(d["v_min"]), int(d["u_max"]), int(d["v_max"]), int(d["level"]))))
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            raise MalformedHeader(f"{path}:{k + 1}: malformed crop request ({exc})") from exc
    return out


# --------------------------------------------------------------------------- scene dirs

def save_scene(scene: Scene, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_ply(directory / "cloud.ply", scene.cloud.positions)
    for frame in scene.frames:
        save_frame(directory / "frames", frame)
    if scene.gt is not None:
        save_ground_truth(scene.gt, scene.num_points, directory / "gt.json",
                          directory / "classes.json")


def load_scene(directory) -> Scene:
    directory = Path(directory)
    if not (directory / "cloud.ply").exists():
        raise FormatError(f"{directory}: no cloud.ply")
    cloud = load_ply(directory / "cloud.ply")
    frames = [load_frame(p) for p in sorted((directory / "frames").glob("*.json"))]
    gt = None
    if (directory / "gt.json").exists():
        gt = load_ground_truth(directory / "gt.json", directory / "classes.json")
    return Scene(cloud, frames, gt, name=directory.name)
