"""Command-line entry point: one subcommand per pipeline stage plus ``run-all``.

Every command writes its outputs and a ``<command>.manifest.json`` into
``--out``. Manifests hash inputs and outputs, echo the resolved config and
record versions; wall-clock times live under a separate ``timestamps`` key so
the rest of the manifest is reproducible.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import platform
import sys
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, io
from .config import PipelineConfig, apply_overrides, load_config
from .errors import DualPathError, FormatError
from .features import (HashProvider, PrecomputedProvider, SubprocessProvider, hash_embed, mask_crops,
                       rank_by_query)
from .pipeline import (MODES, LiftedInstance, attach_features, fuse, integrate, label_and_evaluate,
                       lift_frames, sweep_thresholds)
from .scene import Proposal, ProposalSet, Source

log = logging.getLogger("dualpath")

SYNTH_MARKER = "synth.json"


# --------------------------------------------------------------------------- helpers

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_paths(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            out[str(f)] = _sha256(f)
    return out


def _versions() -> dict:
    import PIL
    import scipy

    return {"dualpath": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pillow": PIL.__version__}


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, command: str, out: Path, config: PipelineConfig):
        self.command, self.out, self.config = command, out, config
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.started = datetime.now(timezone.utc).isoformat()
        out.mkdir(parents=True, exist_ok=True)

    def input(self, *paths):
        self.inputs.extend(Path(p) for p in paths if p is not None)

    def output(self, path) -> Path:
        path = self.out / path
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(path)
        return path

    def finish(self):
        manifest = {
            "command": self.command,
            "inputs": _hash_paths(self.inputs),
            "outputs": _hash_paths(self.outputs),
            "config": self.config.to_dict(),
            "versions": _versions(),
            "timestamps": {"started": self.started,
                           "finished": datetime.now(timezone.utc).isoformat()},
        }
        io.write_json(self.out / f"{self.command}.manifest.json", manifest)


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, synth=replace(cfg.synth, seed=args.seed))
    if args.threads is not None:
        cfg = replace(cfg, threads=max(1, args.threads))
    return cfg


def _provider(args, scene, cfg: PipelineConfig):
    kind = args.provider
    if kind == "auto":
        kind = "synthetic" if (Path(args.scene) / SYNTH_MARKER).exists() else "hash"
    if kind == "synthetic":
        from .config import from_dict
        from .synth import SceneFeatureProvider, attach_synthetic

        marker = Path(args.scene) / SYNTH_MARKER
        if not marker.exists():
            raise FormatError(f"{args.scene}: synthetic provider needs {SYNTH_MARKER}")
        synth_cfg = from_dict({"synth": io.read_json(marker)}).synth
        synth_cfg = replace(synth_cfg, feature_dim=cfg.features.dim, text_seed=cfg.features.text_seed)
        return SceneFeatureProvider(attach_synthetic(scene, synth_cfg))
    if kind == "hash":
        return HashProvider(cfg.features.dim, cfg.seed)
    if kind == "command":
        if not args.feature_command:
            raise FormatError("--provider command needs --feature-command")
        return SubprocessProvider(args.feature_command, cfg.features.dim)
    if kind == "precomputed":
        if not (args.crops and args.responses):
            raise FormatError("--provider precomputed needs --crops and --responses")
        crops = [c for _, c in io.load_crops(args.crops)]
        return PrecomputedProvider(crops, io.load_dpfv(args.responses))
    raise FormatError(f"unknown provider {kind!r}")


def _load_masks2d(directory) -> dict:
    out = {}
    for p in sorted(Path(directory).glob("*.json")):
        fid, masks = io.load_masks2d(p)
        out[fid] = masks
    return out


# --------------------------------------------------------------------------- commands

def cmd_synth(args, cfg: PipelineConfig, run: Run):
    from .synth import corrupt_to_pathways, generate_scene

    synth_cfg = replace(cfg.synth, feature_dim=cfg.features.dim, text_seed=cfg.features.text_seed)
    synth = generate_scene(synth_cfg)
    set3d, masks2d = corrupt_to_pathways(synth)
    scene_dir = run.output("scene")
    io.save_scene(synth.scene, scene_dir)
    io.write_json(scene_dir / SYNTH_MARKER, asdict(synth_cfg))
    io.save_proposals(set3d, run.output("proposals3d.json"))
    for frame in synth.scene.frames:
        io.save_masks2d(run.output(f"masks2d/{frame.frame_id}.json"), frame.frame_id, frame.width,
                        frame.height, masks2d[frame.frame_id])
    print(f"scene {synth.scene.name}: {synth.scene.num_points} points, {len(synth.gt.instances)} "
          f"instances, {len(synth.scene.frames)} frames, {len(set3d)} 3D proposals")


def cmd_lift(args, cfg, run):
    scene = io.load_scene(args.scene)
    run.input(args.scene, args.masks)
    provider = _provider(args, scene, cfg)
    lifted = lift_frames(scene, _load_masks2d(args.masks), provider, cfg)
    total = 0
    for fid, items in lifted:
        pset = ProposalSet(scene.num_points, [_as_proposal(li) for li in items], provider.dim)
        io.save_proposals(pset, run.output(f"lifted/{fid}.json"))
        total += len(items)
    print(f"lifted {total} masks from {len(lifted)} frames")


def _as_proposal(li: LiftedInstance):
    return Proposal(li.source_id, li.mask, li.feature, Source.PATH2D)


def cmd_fuse(args, cfg, run):
    scene = io.load_scene(args.scene)
    run.input(args.scene, args.lifted)
    files = sorted(Path(args.lifted).glob("*.json"))
    lifted = []
    for p in files:
        pset = io.load_proposals(p)
        if pset.num_points != scene.num_points:
            raise FormatError(f"{p}: num_points {pset.num_points} != scene {scene.num_points}")
        lifted.append((p.stem, [LiftedInstance(q.id, q.mask, q.feature) for q in pset]))
    # frame order is the numeric order of the ids
    lifted.sort(key=lambda t: (int(t[0]) if t[0].isdigit() else float("inf"), t[0]))
    set2d = fuse(scene, lifted, cfg)
    io.save_proposals(set2d, run.output("proposals2d.json"))
    print(f"fused {sum(len(x) for _, x in lifted)} lifted masks into {len(set2d)} 2D proposals")


def cmd_features(args, cfg, run):
    scene = io.load_scene(args.scene)
    run.input(args.scene, args.proposals, args.crops, args.responses)
    pset = io.load_proposals(args.proposals)
    fc, pc = cfg.features, cfg.projection
    if args.export_crops:
        requests = []
        for p in pset:
            try:
                crops = mask_crops(p.mask, scene.cloud, scene.frames, fc.top_k, fc.crop_levels,
                                   fc.crop_expansion, pc.depth_tol, pc.z_near)
            except DualPathError as exc:
                log.warning("%s: %s", p.id, exc)
                continue
            requests.extend((p.id, c) for c in crops)
        io.save_crops(run.output("crops.jsonl"), requests)
        print(f"exported {len(requests)} crop requests for {len(pset)} proposals")
        return
    provider = _provider(args, scene, cfg)
    featured = attach_features(scene, pset, provider, cfg)
    io.save_proposals(featured, run.output(args.name or "featured.json"))
    print(f"attached {provider.dim}-d features to {sum(p.feature is not None for p in featured)}"
          f"/{len(featured)} proposals")


def cmd_integrate(args, cfg, run):
    run.input(args.set3d, args.set2d)
    set3d, set2d = io.load_proposals(args.set3d), io.load_proposals(args.set2d)
    out, report = integrate(args.mode, set3d, set2d, cfg)
    io.save_proposals(out, run.output("proposals.json"))
    if report is not None:
        io.write_json(run.output("report.json"), report.to_json())
    print(f"{args.mode}: {len(set3d)} 3D + {len(set2d)} 2D proposals -> {len(out)}")


def cmd_query(args, cfg, run):
    run.input(args.proposals)
    pset = io.load_proposals(args.proposals)
    if pset.feature_dim is None:
        raise FormatError(f"{args.proposals}: proposals carry no features")
    q = hash_embed(args.text, pset.feature_dim, cfg.features.text_seed)
    res = rank_by_query(pset, q, args.top)
    io.write_json(run.output("query.json"), {"query": args.text,
                                             "hits": [{"id": i, "score": s} for i, s in res.hits],
                                             "skipped": res.skipped})
    for i, s in res.hits:
        print(f"{s:+.4f}  {i}")


def cmd_eval(args, cfg, run):
    scene = io.load_scene(args.scene)
    run.input(args.scene, args.proposals)
    pset = io.load_proposals(args.proposals)
    if pset.num_points != scene.num_points:
        raise FormatError(f"{args.proposals}: num_points {pset.num_points} != scene {scene.num_points}")
    res = label_and_evaluate(pset, scene, cfg)
    io.write_json(run.output(args.name or "eval.json"), res.to_json())
    p = Path(args.proposals)
    print(res.table(p.parent.name if p.stem == "proposals" and p.parent.name else p.stem))


def cmd_sweep(args, cfg, run):
    scene = io.load_scene(args.scene)
    run.input(args.scene, args.set3d, args.set2d)
    rows = sweep_thresholds(scene, io.load_proposals(args.set3d), io.load_proposals(args.set2d), cfg)
    io.write_json(run.output("sweep.json"), {"rows": rows})
    cols = [c for c in ("theta_3d", "theta_2d", "num_proposals", "merged", "ap", "ap50", "ap25")
            if c in rows[0]]
    print("  ".join(f"{c:>13}" for c in cols))
    for r in rows:
        print("  ".join(f"{r[c]:>13.4f}" if isinstance(r[c], float) else f"{r[c]:>13}" for c in cols))


def instance_colors(n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(40, 256, size=(n, 3), dtype=np.uint8)


def cmd_export_colored(args, cfg, run):
    scene = io.load_scene(args.scene)
    run.input(args.scene, args.proposals)
    pset = io.load_proposals(args.proposals)
    colors = np.full((scene.num_points, 3), 90, dtype=np.uint8)
    palette = instance_colors(len(pset), cfg.seed)
    # larger proposals first so smaller ones stay visible on top
    order = sorted(range(len(pset)), key=lambda k: -len(pset[k].mask))
    for k in order:
        colors[pset[k].mask.indices] = palette[k]
    io.save_ply(run.output("colored.ply"), scene.cloud.positions, colors)
    print(f"colored {len(pset)} proposals")


def cmd_run_all(args, cfg, run):
    """Chain every stage inside ``--out``, each reading the previous stage's files."""
    out = Path(args.out)

    def sub(command, **extra):
        ns = argparse.Namespace(**{**vars(args), **extra})
        stage = Run(command, out, cfg)
        COMMANDS[command](ns, cfg, stage)
        stage.finish()

    if args.scene is None:
        sub("synth")
        scene, set3d_raw, masks = out / "scene", out / "proposals3d.json", out / "masks2d"
    else:
        scene, set3d_raw, masks = Path(args.scene), Path(args.set3d), Path(args.masks)
    common = dict(scene=str(scene), crops=None, responses=None, export_crops=False)
    sub("lift", masks=str(masks), **common)
    sub("fuse", lifted=str(out / "lifted"), **common)
    sub("features", proposals=str(set3d_raw), name="featured3d.json", **common)
    has_gt = (scene / "gt.json").exists()
    for mode in MODES:
        mode_dir = out / mode
        ns = argparse.Namespace(**{**vars(args), "mode": mode, "set3d": str(out / "featured3d.json"),
                                   "set2d": str(out / "proposals2d.json"), "out": str(mode_dir)})
        stage = Run("integrate", mode_dir, cfg)
        cmd_integrate(ns, cfg, stage)
        stage.finish()
        if has_gt:
            ns = argparse.Namespace(**{**vars(args), "scene": str(scene), "name": None,
                                       "proposals": str(mode_dir / "proposals.json")})
            stage = Run("eval", mode_dir, cfg)
            cmd_eval(ns, cfg, stage)
            stage.finish()
    sub("sweep", set3d=str(out / "featured3d.json"), set2d=str(out / "proposals2d.json"), **common)
    sub("export-colored", proposals=str(out / "conditional" / "proposals.json"), **common)
    run.input(scene)


COMMANDS = {
    "synth": cmd_synth, "lift": cmd_lift, "fuse": cmd_fuse, "features": cmd_features,
    "integrate": cmd_integrate, "query": cmd_query, "eval": cmd_eval, "sweep": cmd_sweep,
    "export-colored": cmd_export_colored, "run-all": cmd_run_all,
}


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override a config key, e.g. integration.theta_3d=0.5 (repeatable)")
    common.add_argument("--threads", type=int, help="worker thread cap")
    common.add_argument("--seed", type=int, help="master seed (also seeds the synthetic generator)")
    common.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    common.add_argument("-v", "--verbose", action="store_true")

    provider = argparse.ArgumentParser(add_help=False)
    provider.add_argument("--provider", default="auto",
                          choices=["auto", "synthetic", "hash", "command", "precomputed"],
                          help="crop feature source; auto picks synthetic for generated scenes")
    provider.add_argument("--feature-command", help="encoder command: CMD crops.jsonl out.dpfv")
    provider.add_argument("--crops", help="exported crop requests (precomputed provider)")
    provider.add_argument("--responses", help="DPFV feature file answering --crops")

    p = argparse.ArgumentParser(prog="dualpath", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sp = p.add_subparsers(dest="command", required=True)

    sp.add_parser("synth", parents=[common], help="generate a synthetic scene and both pathways")

    s = sp.add_parser("lift", parents=[common, provider], help="lift per-frame 2D masks into the cloud")
    s.add_argument("--scene", required=True)
    s.add_argument("--masks", required=True, help="directory of per-frame 2D mask files")

    s = sp.add_parser("fuse", parents=[common], help="fuse lifted masks into 2D-pathway proposals")
    s.add_argument("--scene", required=True)
    s.add_argument("--lifted", required=True, help="directory written by lift")

    s = sp.add_parser("features", parents=[common, provider], help="attach crop features to proposals")
    s.add_argument("--scene", required=True)
    s.add_argument("--proposals", required=True)
    s.add_argument("--export-crops", action="store_true",
                   help="only write the crop request file for an external encoder")
    s.add_argument("--name", help="output file name (default: featured.json)")

    s = sp.add_parser("integrate", parents=[common], help="combine the two proposal sets")
    s.add_argument("--set3d", required=True)
    s.add_argument("--set2d", required=True)
    s.add_argument("--mode", default="conditional", choices=MODES)

    s = sp.add_parser("query", parents=[common], help="rank proposals against a text query")
    s.add_argument("--proposals", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--top", type=int, default=10)

    s = sp.add_parser("eval", parents=[common], help="label proposals and score against ground truth")
    s.add_argument("--scene", required=True)
    s.add_argument("--proposals", required=True)
    s.add_argument("--name", help="output file name (default: eval.json)")

    s = sp.add_parser("sweep", parents=[common], help="evaluate the integration threshold grid")
    s.add_argument("--scene", required=True)
    s.add_argument("--set3d", required=True)
    s.add_argument("--set2d", required=True)

    s = sp.add_parser("export-colored", parents=[common], help="write a PLY colored by proposal")
    s.add_argument("--scene", required=True)
    s.add_argument("--proposals", required=True)

    s = sp.add_parser("run-all", parents=[common, provider], help="run every stage end to end")
    s.add_argument("--scene", help="existing scene directory (default: generate one)")
    s.add_argument("--set3d", help="3D proposals for --scene")
    s.add_argument("--masks", help="2D mask directory for --scene")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run-all" and args.scene and not (args.set3d and args.masks):
        print("dualpath: error: run-all --scene also needs --set3d and --masks", file=sys.stderr)
        return 2
    try:
        cfg = _config(args)
        run = Run(args.command, Path(args.out), cfg)
        COMMANDS[args.command](args, cfg, run)
        run.finish()
    except (DualPathError, ValueError, OSError) as exc:
        print(f"dualpath {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
