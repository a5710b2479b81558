"""Stage functions shared by the CLI and the experiment harness."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .config import PipelineConfig
from .errors import EmptyLift, NoVisibleFrame
from .evaluation import EvalResult, assign_classes, evaluate
from .features import FeatureProvider, assemble_mask_feature, crop_features, hash_embed
from .fusion import frame_number, fuse_sequence
from .integration import IntegrationReport, conditional_integrate, simple_integrate
from .masks import InstanceMask
from .projection import Mask2D, lift_mask2d, mask2d_crops
from .scene import ClassInfo, ProposalSet, Scene

log = logging.getLogger(__name__)

MODES = ("conditional", "simple", "3d-only", "2d-only")


@dataclass(frozen=True, eq=False)
class LiftedInstance:
    source_id: str
    mask: InstanceMask
    feature: np.ndarray


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def lift_frames(scene: Scene, masks2d: Mapping[str, Sequence[Mask2D]], provider: FeatureProvider,
                config: PipelineConfig = PipelineConfig()):
    """Lift every 2D mask of every ingested frame; returns ordered ``(frame_id, [LiftedInstance])``."""
    pc, fc = config.projection, config.features
    chosen = [f for pos, f in enumerate(scene.frames)
              if frame_number(f.frame_id, pos) % config.fusion.frame_stride == 0]

    def one(frame):
        out = []
        for m in masks2d.get(frame.frame_id, ()):
            try:
                mask3d = lift_mask2d(m, frame, scene.cloud, pc.depth_tol, pc.z_near)
            except EmptyLift:
                continue
            feat = crop_features(mask2d_crops(m, fc.crop_levels, fc.crop_expansion), provider,
                                 owner=f"2D mask {m.id}")
            out.append(LiftedInstance(m.id, mask3d, feat))
        return frame.frame_id, out

    return _map(one, chosen, config.threads)


def fuse(scene: Scene, lifted, config: PipelineConfig = PipelineConfig()) -> ProposalSet:
    # lift_frames already applied the frame stride
    seq = [(fid, [(li.mask, li.feature) for li in items]) for fid, items in lifted]
    return fuse_sequence(seq, scene.num_points, replace(config.fusion, frame_stride=1))


def attach_features(scene: Scene, set3d: ProposalSet, provider: FeatureProvider,
                    config: PipelineConfig = PipelineConfig()) -> ProposalSet:
    """Assemble a pooled crop feature for every 3D proposal that is visible somewhere."""
    pc, fc = config.projection, config.features

    def one(p):
        try:
            f = assemble_mask_feature(p.mask, scene.cloud, scene.frames, provider, fc.top_k,
                                      fc.crop_levels, fc.crop_expansion, pc.depth_tol, pc.z_near,
                                      owner=f"proposal {p.id}")
        except NoVisibleFrame:
            log.warning("proposal %s is not visible in any frame; left without a feature", p.id)
            return p
        return p.with_(feature=f)

    return ProposalSet(set3d.num_points, _map(one, list(set3d), config.threads), provider.dim)


def integrate(mode: str, set3d: ProposalSet, set2d: ProposalSet,
              config: PipelineConfig = PipelineConfig()) -> tuple[ProposalSet, IntegrationReport | None]:
    if mode == "conditional":
        return conditional_integrate(set3d, set2d, config.integration)
    if mode == "simple":
        return simple_integrate(set3d, set2d), None
    if mode == "3d-only":
        return set3d, None
    if mode == "2d-only":
        return set2d, None
    raise ValueError(f"unknown integration mode {mode!r}; choose from {MODES}")


def class_text_features(table: Mapping[int, ClassInfo], config: PipelineConfig = PipelineConfig()):
    fc = config.features
    return {c: hash_embed(info.name, fc.dim, fc.text_seed) for c, info in table.items()}


def label_and_evaluate(pset: ProposalSet, scene: Scene, config: PipelineConfig = PipelineConfig()) -> EvalResult:
    if scene.gt is None:
        raise ValueError(f"scene {scene.name} has no ground truth")
    labeled = assign_classes(pset, class_text_features(scene.gt.class_table, config))
    return evaluate(labeled, scene.gt, scene.num_points)


@dataclass
class SceneRun:
    set3d: ProposalSet
    set2d: ProposalSet
    outputs: dict  # mode -> ProposalSet
    reports: dict  # mode -> IntegrationReport | None
    results: dict  # mode -> EvalResult


def run_pathways(scene: Scene, set3d_raw: ProposalSet, masks2d, provider: FeatureProvider,
                 config: PipelineConfig = PipelineConfig()):
    lifted = lift_frames(scene, masks2d, provider, config)
    set2d = fuse(scene, lifted, config)
    set3d = attach_features(scene, set3d_raw, provider, config)
    return set3d, set2d


def run_modes(scene: Scene, set3d: ProposalSet, set2d: ProposalSet,
              config: PipelineConfig = PipelineConfig(), modes=MODES) -> SceneRun:
    outputs, reports, results = {}, {}, {}
    for mode in modes:
        out, rep = integrate(mode, set3d, set2d, config)
        outputs[mode], reports[mode] = out, rep
        if scene.gt is not None:
            results[mode] = label_and_evaluate(out, scene, config)
    return SceneRun(set3d, set2d, outputs, reports, results)


def run_synthetic(config: PipelineConfig = PipelineConfig(), modes=MODES) -> SceneRun:
    """Generate, corrupt, and run every mode on one synthetic scene."""
    from .synth import SceneFeatureProvider, corrupt_to_pathways, generate_scene

    synth_cfg = replace(config.synth, feature_dim=config.features.dim, text_seed=config.features.text_seed)
    synth = generate_scene(synth_cfg)
    set3d_raw, masks2d = corrupt_to_pathways(synth)
    provider = SceneFeatureProvider(synth)
    set3d, set2d = run_pathways(synth.scene, set3d_raw, masks2d, provider, config)
    return run_modes(synth.scene, set3d, set2d, config, modes)


def sweep_thresholds(scene: Scene, set3d: ProposalSet, set2d: ProposalSet,
                     config: PipelineConfig = PipelineConfig()) -> list[dict]:
    """Conditional integration over the ``theta_3d x theta_2d`` grid."""
    rows = []
    for t3 in config.eval.sweep_grid:
        for t2 in config.eval.sweep_grid:
            cfg = replace(config, integration=replace(config.integration, theta_3d=t3, theta_2d=t2))
            out, rep = conditional_integrate(set3d, set2d, cfg.integration)
            row = {"theta_3d": t3, "theta_2d": t2, "num_proposals": len(out),
                   "merged": sum(p.scenario.value == "s1_merge" for p in rep.pairs)}
            if scene.gt is not None:
                res = label_and_evaluate(out, scene, cfg)
                row.update(ap=res.ap, ap50=res.ap50, ap25=res.ap25)
            rows.append(row)
    return rows
