"""Conditional integration of 3D-pathway and 2D-pathway proposals.

Two stages. Matching pulls out every proposal whose best symmetric IoU with
the other modality is at most ``eps_unique``; those pass through untouched.
The remaining 2D proposals are then swept largest-first, each paired with its
highest-IoU surviving 3D proposal and dispatched on the two directional IoUs:

==========  ==========  =======================================================
cover_2d    cover_3d    outcome
==========  ==========  =======================================================
high        high        s1: union of both masks, averaged feature; 3D consumed
low         low         s2: keep the 2D proposal; 3D kept at sweep end
high        low         s3: keep the 2D proposal; 3D suppressed unless another
                        pair keeps it
low         high        s4: keep the 3D proposal, drop the 2D one
==========  ==========  =======================================================

``cover_2d = |A & B| / |B|`` and ``cover_3d = |A & B| / |A|`` for 3D mask A
and 2D mask B; "high" means ``>=`` the corresponding threshold.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ZeroVector
from .masks import InstanceMask, intersection_matrix
from .scene import Proposal, ProposalSet, Source, normalize


class Scenario(str, enum.Enum):
    UNIQUE = "unique"
    MERGE = "s1_merge"
    KEEP_BOTH = "s2_keep_both"
    KEEP_2D = "s3_keep_2d"
    KEEP_3D = "s4_keep_3d"


class Disposition(str, enum.Enum):
    UNIQUE = "unique"
    MERGED_INTO = "merged_into"
    SUPPRESSED_BY = "suppressed_by"
    RETAINED = "retained"
    KEPT_VIA_S4 = "kept_via_s4"


@dataclass(frozen=True)
class IntegrationConfig:
    theta_3d: float = 0.9
    theta_2d: float = 0.5
    eps_unique: float = 0.0

    def __post_init__(self):
        for name in ("theta_3d", "theta_2d", "eps_unique"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name}={getattr(self, name)} not in [0, 1]")


@dataclass(frozen=True, eq=False)
class IoUMatrix:
    inter: np.ndarray  # (I, J) exact intersection counts
    size3d: np.ndarray
    size2d: np.ndarray
    sym: np.ndarray
    dir3d: np.ndarray  # inter / |3D mask|
    dir2d: np.ndarray  # inter / |2D mask|

    @property
    def shape(self):
        return self.inter.shape


def iou_matrix(set3d: ProposalSet, set2d: ProposalSet) -> IoUMatrix:
    if set3d.num_points != set2d.num_points:
        raise ValueError(f"proposal sets index different clouds ({set3d.num_points} vs {set2d.num_points})")
    inter = intersection_matrix(set3d.masks, set2d.masks, set3d.num_points)
    a = np.array([len(m) for m in set3d.masks], dtype=np.int64)
    b = np.array([len(m) for m in set2d.masks], dtype=np.int64)
    union = a[:, None] + b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        sym = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    dir3d = inter / np.maximum(a, 1)[:, None]
    dir2d = inter / np.maximum(b, 1)[None, :]
    for arr in (inter, a, b, sym, dir3d, dir2d):
        arr.setflags(write=False)
    return IoUMatrix(inter, a, b, sym, dir3d, dir2d)


def merge_features(f3d: np.ndarray, f2d: np.ndarray) -> np.ndarray:
    """Mean of two unit features, renormalized; antipodal inputs raise ZeroVector."""
    if f3d.shape != f2d.shape:
        raise ValueError(f"feature shapes differ: {f3d.shape} vs {f2d.shape}")
    mean = 0.5 * (normalize(f3d) + normalize(f2d))
    if np.linalg.norm(mean) < 1e-9:
        raise ZeroVector("averaged feature vanishes (antipodal inputs)")
    return normalize(mean)


@dataclass
class PairDecision:
    proposal_2d: str
    partner_3d: str | None
    iou: float
    iou_3d: float
    iou_2d: float
    scenario: Scenario
    output: str | None  # id of the emitted proposal, if any


@dataclass
class Disposition3D:
    proposal_3d: str
    disposition: Disposition
    partner_2d: str | None = None


@dataclass
class IntegrationReport:
    config: IntegrationConfig
    pairs: list[PairDecision] = field(default_factory=list)
    dispositions: list[Disposition3D] = field(default_factory=list)
    feature_fallbacks: list[str] = field(default_factory=list)

    def scenario_of(self, id2d: str) -> Scenario:
        return next(p.scenario for p in self.pairs if p.proposal_2d == id2d)

    def disposition_of(self, id3d: str) -> Disposition:
        return next(d.disposition for d in self.dispositions if d.proposal_3d == id3d)

    def to_json(self) -> dict:
        return {
            "config": asdict(self.config),
            "pairs": [{**asdict(p), "scenario": p.scenario.value} for p in self.pairs],
            "proposals_3d": [{**asdict(d), "disposition": d.disposition.value}
                             for d in self.dispositions],
            "feature_fallbacks": list(self.feature_fallbacks),
        }


def match_unique(matrix: IoUMatrix, set3d: ProposalSet, set2d: ProposalSet,
                 eps_unique: float = 0.0):
    """Split off proposals with no cross-modality overlap above ``eps_unique``.

    Returns ``(unique proposals, remaining 3D indices, remaining 2D indices)``;
    unique 3D proposals come first, each group in input order.
    """
    ni, nj = matrix.shape
    if (ni, nj) != (len(set3d), len(set2d)):
        raise ValueError(f"matrix shape {matrix.shape} does not match sets ({len(set3d)}, {len(set2d)})")
    row_max = matrix.sym.max(axis=1) if nj else np.zeros(ni)
    col_max = matrix.sym.max(axis=0) if ni else np.zeros(nj)
    uniq3 = [i for i in range(ni) if row_max[i] <= eps_unique]
    uniq2 = [j for j in range(nj) if col_max[j] <= eps_unique]
    unique = [set3d[i] for i in uniq3] + [set2d[j] for j in uniq2]
    rest3 = [i for i in range(ni) if row_max[i] > eps_unique]
    rest2 = [j for j in range(nj) if col_max[j] > eps_unique]
    return unique, rest3, rest2


def _merged(p3: Proposal, p2: Proposal, report: IntegrationReport) -> Proposal:
    mask = InstanceMask(np.union1d(p3.mask.indices, p2.mask.indices), check=False)
    if p3.feature is not None and p2.feature is not None:
        try:
            feat = merge_features(p3.feature, p2.feature)
        except ZeroVector:
            report.feature_fallbacks.append(f"{p3.id}+{p2.id}")
            feat = p3.feature
    else:
        feat = p3.feature if p3.feature is not None else p2.feature
    return Proposal(f"{p3.id}+{p2.id}", mask, feat, Source.MERGED)


def adaptive_integrate(matrix: IoUMatrix, set3d: ProposalSet, set2d: ProposalSet,
                       rest3: list[int], rest2: list[int],
                       config: IntegrationConfig = IntegrationConfig(),
                       report: IntegrationReport | None = None):
    """Four-scenario dispatch over the non-unique proposals.

    Returns ``(additions, report)``. 2D-side additions appear in sweep order,
    followed by surviving 3D proposals in input order.
    """
    report = report if report is not None else IntegrationReport(config)
    sweep = sorted(rest2, key=lambda j: (-int(matrix.size2d[j]), j))
    consumed: dict[int, int] = {}
    kept: dict[int, int] = {}
    retained: dict[int, int] = {}
    suppressed: dict[int, int] = {}
    additions: list[Proposal] = []

    for j in sweep:
        p2 = set2d[j]
        cands = [i for i in rest3 if i not in consumed]
        best = max(cands, key=lambda i: (matrix.sym[i, j], -i)) if cands else None
        if best is None or matrix.sym[best, j] <= 0.0:
            # every overlapping 3D partner was already merged away
            additions.append(p2)
            report.pairs.append(PairDecision(p2.id, None, 0.0, 0.0, 0.0, Scenario.UNIQUE, p2.id))
            continue
        i = best
        high2 = matrix.dir2d[i, j] >= config.theta_2d
        high3 = matrix.dir3d[i, j] >= config.theta_3d
        if high2 and high3:
            scen = Scenario.MERGE
            out = _merged(set3d[i], p2, report)
            additions.append(out)
            consumed[i] = j
        elif not high2 and not high3:
            scen, out = Scenario.KEEP_BOTH, p2
            additions.append(p2)
            retained.setdefault(i, j)
        elif high2:
            scen, out = Scenario.KEEP_2D, p2
            additions.append(p2)
            suppressed.setdefault(i, j)
        else:
            scen, out = Scenario.KEEP_3D, set3d[i]
            kept.setdefault(i, j)
        report.pairs.append(PairDecision(
            p2.id, set3d[i].id, float(matrix.sym[i, j]), float(matrix.dir3d[i, j]),
            float(matrix.dir2d[i, j]), scen, out.id))

    for i in sorted(rest3):
        p3 = set3d[i]
        if i in consumed:
            disp, partner = Disposition.MERGED_INTO, consumed[i]
        elif i in kept:
            disp, partner = Disposition.KEPT_VIA_S4, kept[i]
        elif i in retained:
            disp, partner = Disposition.RETAINED, retained[i]
        elif i in suppressed:
            disp, partner = Disposition.SUPPRESSED_BY, suppressed[i]
        else:
            disp, partner = Disposition.RETAINED, None
        if disp in (Disposition.KEPT_VIA_S4, Disposition.RETAINED):
            additions.append(p3)
        report.dispositions.append(
            Disposition3D(p3.id, disp, None if partner is None else set2d[partner].id))
    return additions, report


def _check_ids(set3d: ProposalSet, set2d: ProposalSet) -> None:
    clash = set(set3d.ids()) & set(set2d.ids())
    if clash:
        raise ValueError(f"proposal ids shared across modalities: {sorted(clash)[:5]}")
    if set3d.num_points != set2d.num_points:
        raise ValueError(f"proposal sets index different clouds ({set3d.num_points} vs {set2d.num_points})")


def _feature_dim(*sets: ProposalSet):
    dims = {s.feature_dim for s in sets if s.feature_dim is not None}
    if len(dims) > 1:
        raise ValueError(f"feature dimensions differ across modalities: {sorted(dims)}")
    return dims.pop() if dims else None


def conditional_integrate(set3d: ProposalSet, set2d: ProposalSet,
                          config: IntegrationConfig = IntegrationConfig()):
    """Full two-stage integration. Returns ``(ProposalSet, IntegrationReport)``."""
    _check_ids(set3d, set2d)
    dim = _feature_dim(set3d, set2d)
    matrix = iou_matrix(set3d, set2d)
    unique, rest3, rest2 = match_unique(matrix, set3d, set2d, config.eps_unique)
    report = IntegrationReport(config)
    rest3_set, rest2_set = set(rest3), set(rest2)
    for j, p in enumerate(set2d):
        if j not in rest2_set:
            col = matrix.sym[:, j]
            i = int(np.argmax(col)) if col.size else None
            report.pairs.append(PairDecision(
                p.id, None if i is None or col[i] == 0 else set3d[i].id,
                float(col[i]) if i is not None else 0.0,
                float(matrix.dir3d[i, j]) if i is not None else 0.0,
                float(matrix.dir2d[i, j]) if i is not None else 0.0,
                Scenario.UNIQUE, p.id))
    for i, p in enumerate(set3d):
        if i not in rest3_set:
            report.dispositions.append(Disposition3D(p.id, Disposition.UNIQUE))
    additions, report = adaptive_integrate(matrix, set3d, set2d, rest3, rest2, config, report)
    # report order follows input order for readability
    order2 = {p.id: k for k, p in enumerate(set2d)}
    order3 = {p.id: k for k, p in enumerate(set3d)}
    report.pairs.sort(key=lambda d: order2[d.proposal_2d])
    report.dispositions.sort(key=lambda d: order3[d.proposal_3d])
    return ProposalSet(set3d.num_points, unique + additions, dim), report


def simple_integrate(set3d: ProposalSet, set2d: ProposalSet) -> ProposalSet:
    """Baseline: every proposal from both pathways, 3D first, nothing merged."""
    _check_ids(set3d, set2d)
    return ProposalSet(set3d.num_points, list(set3d) + list(set2d), _feature_dim(set3d, set2d))
