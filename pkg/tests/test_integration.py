import numpy as np
import pytest

from dualpath.errors import ZeroVector
from dualpath.integration import (Disposition, IntegrationConfig, Scenario, adaptive_integrate,
                                  conditional_integrate, iou_matrix, match_unique, merge_features,
                                  simple_integrate)
from dualpath.scene import Source

from conftest import pset
from reference import integrate_reference


def r(lo, hi):
    return list(range(lo, hi))


def out_of(result):
    return [(p.id, list(p.mask)) for p in result]


def test_iou_matrix_example():
    m = iou_matrix(pset(10, [r(0, 4)], "a"), pset(10, [r(2, 8)], "b"))
    assert m.inter[0, 0] == 2
    assert m.sym[0, 0] == 0.25
    assert m.dir3d[0, 0] == 0.5
    assert m.dir2d[0, 0] == pytest.approx(1 / 3)


def test_iou_matrix_identical_and_disjoint():
    m = iou_matrix(pset(10, [r(0, 5), r(0, 5)], "a"), pset(10, [r(0, 5), r(5, 10)], "b"))
    for arr in (m.sym, m.dir3d, m.dir2d):
        assert arr[:, 0].tolist() == [1.0, 1.0]
    assert m.sym[:, 1].tolist() == [0, 0] and m.dir2d[:, 1].tolist() == [0, 0]


def test_match_unique_examples():
    a, b = pset(20, [r(0, 3)], "a"), pset(20, [r(5, 9)], "b")
    unique, rest3, rest2 = match_unique(iou_matrix(a, b), a, b)
    assert [p.id for p in unique] == ["a0", "b0"] and rest3 == rest2 == []

    a = pset(20, [r(0, 3), r(3, 6)], "a")
    unique, rest3, rest2 = match_unique(iou_matrix(a, pset(20, [], "b")), a, pset(20, [], "b"))
    assert [p.id for p in unique] == ["a0", "a1"]

    # sym = [[0.3, 0], [0, 0]]
    a = pset(100, [r(0, 10), r(50, 60)], "a")
    b = pset(100, [r(0, 3), r(80, 90)], "b")
    m = iou_matrix(a, b)
    assert m.sym.tolist() == [[0.3, 0.0], [0.0, 0.0]]
    unique, rest3, rest2 = match_unique(m, a, b)
    assert [p.id for p in unique] == ["a1", "b1"] and rest3 == [0] and rest2 == [0]


SCENARIOS = [
    # (3D mask, 2D mask, scenario, output masks)
    (r(0, 100), r(0, 95) + r(100, 105), Scenario.MERGE, [r(0, 105)]),
    (r(0, 100), r(0, 10), Scenario.KEEP_2D, [r(0, 10)]),
    (r(0, 10), r(0, 100), Scenario.KEEP_3D, [r(0, 10)]),
    (r(0, 100), r(90, 200), Scenario.KEEP_BOTH, [r(90, 200), r(0, 100)]),
]


@pytest.mark.parametrize("m3, m2, scenario, outputs", SCENARIOS, ids=[s[2].value for s in SCENARIOS])
def test_four_scenarios(m3, m2, scenario, outputs):
    out, rep = conditional_integrate(pset(300, [m3], "a", features=[[1, 0]]),
                                     pset(300, [m2], "b", source=Source.PATH2D, features=[[0, 1]]))
    assert [list(p.mask) for p in out] == outputs
    assert rep.scenario_of("b0") is scenario
    if scenario is Scenario.MERGE:
        assert out[0].id == "a0+b0" and out[0].source is Source.MERGED
        assert np.allclose(out[0].feature, [np.sqrt(0.5), np.sqrt(0.5)])
        assert rep.disposition_of("a0") is Disposition.MERGED_INTO
    if scenario is Scenario.KEEP_2D:
        assert rep.disposition_of("a0") is Disposition.SUPPRESSED_BY
    if scenario is Scenario.KEEP_3D:
        assert rep.disposition_of("a0") is Disposition.KEPT_VIA_S4


def test_directional_ious_reported():
    _, rep = conditional_integrate(pset(300, [r(0, 100)], "a"), pset(300, [r(0, 95) + r(100, 105)], "b"))
    pair = rep.pairs[0]
    assert (pair.iou_3d, pair.iou_2d) == (0.95, 0.95)
    assert pair.partner_3d == "a0" and pair.output == "a0+b0"


def test_threshold_boundaries_are_closed():
    # dir3d exactly 0.9 and dir2d exactly 0.5
    a, b = pset(300, [r(0, 10)], "a"), pset(300, [r(1, 19)], "b")
    out, rep = conditional_integrate(a, b)
    assert rep.scenario_of("b0") is Scenario.MERGE


def test_merge_features():
    f = np.array([0.6, 0.8, 0.0])
    assert np.allclose(merge_features(f, f), f)
    e1, e2 = np.eye(3)[0], np.eye(3)[1]
    assert np.allclose(merge_features(e1, e2), [np.sqrt(0.5), np.sqrt(0.5), 0])
    with pytest.raises(ZeroVector):
        merge_features(f, -f)


def test_antipodal_merge_falls_back_to_3d_feature():
    out, rep = conditional_integrate(pset(300, [r(0, 100)], "a", features=[[1, 0]]),
                                     pset(300, [r(0, 100)], "b", features=[[-1, 0]]))
    assert np.allclose(out[0].feature, [1, 0]) and rep.feature_fallbacks == ["a0+b0"]


def test_simple_integration():
    a = pset(50, [r(0, 5), r(5, 10)], "a")
    b = pset(50, [r(0, 5), r(20, 30), r(30, 40)], "b")
    out = simple_integrate(a, b)
    assert len(out) == 5 and out.ids() == ["a0", "a1", "b0", "b1", "b2"]
    assert len(simple_integrate(pset(50, [], "a"), pset(50, [], "b"))) == 0


def test_shared_ids_rejected():
    with pytest.raises(ValueError):
        conditional_integrate(pset(50, [r(0, 5)], "x"), pset(50, [r(0, 5)], "x"))


def test_empty_inputs():
    out, rep = conditional_integrate(pset(50, [], "a"), pset(50, [], "b"))
    assert len(out) == 0 and rep.pairs == []


def test_s1_consumes_the_3d_partner():
    # the big 2D proposal merges first; the small one then finds no live partner
    a = pset(300, [r(0, 100)], "a")
    b = pset(300, [r(0, 100), r(0, 40)], "b")
    out, rep = conditional_integrate(a, b)
    assert out.ids() == ["a0+b0", "b1"]
    assert rep.scenario_of("b1") is Scenario.UNIQUE


def test_s4_keeps_3d_even_if_later_suppressed():
    a = pset(300, [r(0, 50)], "a")
    b = pset(300, [r(0, 200), r(0, 30)], "b")
    out, rep = conditional_integrate(a, b)
    assert rep.scenario_of("b0") is Scenario.KEEP_3D and rep.scenario_of("b1") is Scenario.KEEP_2D
    assert out.ids() == ["b1", "a0"]
    assert rep.disposition_of("a0") is Disposition.KEPT_VIA_S4


def _random_population(rng, n=200, max_side=20):
    def blob():
        lo = int(rng.integers(0, n - 2))
        return set(range(lo, min(n, lo + int(rng.integers(1, 60)))))

    threes = [blob() for _ in range(int(rng.integers(0, max_side + 1)))]
    twos = []
    for _ in range(int(rng.integers(0, max_side + 1))):
        kind = rng.integers(0, 4)
        if threes and kind == 0:  # subset of a 3D proposal
            base = sorted(threes[int(rng.integers(0, len(threes)))])
            twos.append(set(base[: max(1, int(len(base) * rng.uniform(0.05, 1)))]))
        elif threes and kind == 1:  # superset of a 3D proposal
            base = threes[int(rng.integers(0, len(threes)))]
            twos.append(base | blob())
        else:
            twos.append(blob())
    return threes, twos


def _sets(threes, twos, n=200):
    return (pset(n, [sorted(m) for m in threes], "t"),
            pset(n, [sorted(m) for m in twos], "w", source=Source.PATH2D))


def test_matches_brute_force_reference():
    rng = np.random.default_rng(2024)
    seen = set()
    for trial in range(500):
        threes, twos = _random_population(rng)
        t3, t2 = [(0.9, 0.5), (0.5, 0.9), (0.25, 0.25), (1.0, 1.0)][trial % 4]
        a, b = _sets(threes, twos)
        out, rep = conditional_integrate(a, b, IntegrationConfig(theta_3d=t3, theta_2d=t2))
        want, scen = integrate_reference(list(zip(a.ids(), threes)), list(zip(b.ids(), twos)), t3, t2)
        assert [(p.id, frozenset(p.mask.indices.tolist())) for p in out] == want, trial
        assert {p.proposal_2d: p.scenario.value for p in rep.pairs} == scen
        seen |= set(scen.values())
    assert seen == {"unique", "s1_merge", "s2_keep_both", "s3_keep_2d", "s4_keep_3d"}


def test_adaptive_stage_alone_matches_reference():
    rng = np.random.default_rng(7)
    for _ in range(100):
        threes, twos = _random_population(rng)
        a, b = _sets(threes, twos)
        m = iou_matrix(a, b)
        unique, rest3, rest2 = match_unique(m, a, b)
        adds, _ = adaptive_integrate(m, a, b, rest3, rest2)
        want, _ = integrate_reference(list(zip(a.ids(), threes)), list(zip(b.ids(), twos)))
        assert [p.id for p in unique + adds] == [w[0] for w in want]


def test_unique_proposals_pass_through_verbatim():
    rng = np.random.default_rng(99)
    for _ in range(200):
        threes, twos = _random_population(rng)
        feats3 = rng.standard_normal((len(threes), 3)) if threes else None
        feats2 = rng.standard_normal((len(twos), 3)) if twos else None
        a = pset(200, [sorted(m) for m in threes], "t", features=feats3)
        b = pset(200, [sorted(m) for m in twos], "w", source=Source.PATH2D, features=feats2)
        out, _ = conditional_integrate(a, b)
        by_id = {p.id: p for p in out}
        m = iou_matrix(a, b)
        for i, p in enumerate(a):
            if not m.sym.shape[1] or m.sym[i].max() == 0:
                assert by_id[p.id] == p
        for j, p in enumerate(b):
            if not m.sym.shape[0] or m.sym[:, j].max() == 0:
                assert by_id[p.id] == p


def test_unit_thresholds_never_merge():
    rng = np.random.default_rng(5)
    cfg = IntegrationConfig(theta_3d=1.0, theta_2d=1.0, eps_unique=0.0)
    for _ in range(100):
        threes, twos = _random_population(rng)
        # exclude exact duplicates, the one case where both covers reach 1.0
        twos = [t for t in twos if t not in threes]
        a, b = _sets(threes, twos)
        out, rep = conditional_integrate(a, b, cfg)
        inputs = {p.mask for p in a} | {p.mask for p in b}
        assert all(p.mask in inputs for p in out)
        assert all(p.scenario is not Scenario.MERGE for p in rep.pairs)


def test_report_json_shape():
    _, rep = conditional_integrate(pset(300, [r(0, 100)], "a"), pset(300, [r(0, 10)], "b"))
    doc = rep.to_json()
    assert doc["pairs"][0]["scenario"] == "s3_keep_2d"
    assert doc["proposals_3d"][0] == {"proposal_3d": "a0", "disposition": "suppressed_by", "partner_2d": "b0"}
    assert doc["config"] == {"theta_3d": 0.9, "theta_2d": 0.5, "eps_unique": 0.0}
