import numpy as np
import pytest

from dualpath.fusion import (BankEntry, FusionConfig, MemoryBank, finalize_bank, fuse_sequence, ingest_frame,
                             merge_graph, periodic_compact)
from dualpath.masks import InstanceMask, mask_iou
from dualpath.scene import Source

CFG = FusionConfig(min_points=1, min_frames=1)


def unit(angle, d=4):
    v = np.zeros(d)
    v[0], v[1] = np.cos(angle), np.sin(angle)
    return v


def M(lo, hi):
    return InstanceMask(np.arange(lo, hi))


def entry(mask, feat, frames=(0,), order=0):
    return BankEntry(mask, feat, frozenset(frames), max(frames), order)


def test_first_insert_and_reingest():
    bank = ingest_frame(MemoryBank(300), [(M(0, 100), unit(0))], 0, CFG)
    assert len(bank) == 1 and bank.entries[0].frames_seen == 1
    bank = ingest_frame(bank, [(M(0, 100), unit(0))], 10, CFG)
    assert len(bank) == 1
    assert bank.entries[0].mask == M(0, 100) and bank.entries[0].frames_seen == 2


def test_disjoint_orthogonal_stay_apart():
    bank = ingest_frame(MemoryBank(300), [(M(0, 100), unit(0))], 0, CFG)
    bank = ingest_frame(bank, [(M(100, 200), unit(np.pi / 2))], 10, CFG)
    assert len(bank) == 2


def test_same_frame_detections_do_not_merge_on_ingest():
    bank = ingest_frame(MemoryBank(300), [(M(0, 100), unit(0)), (M(0, 100), unit(0))], 0, CFG)
    assert len(bank) == 2
    assert len(periodic_compact(bank, CFG)) == 1


def test_ingest_picks_highest_iou_passing_entry():
    bank = MemoryBank(300, (entry(M(0, 100), unit(0), order=0), entry(M(40, 140), unit(0), order=1)), 2, 1)
    bank = ingest_frame(bank, [(M(45, 140), unit(0.1))], 10, CFG)
    assert bank.entries[1].mask == M(40, 140) and bank.entries[1].frames_seen == 2
    assert bank.entries[0].frames_seen == 1


def test_feature_update_is_frames_weighted():
    e = entry(M(0, 10), unit(0), frames=(0, 10, 20))
    bank = ingest_frame(MemoryBank(300, (e,), 1, 3), [(M(0, 10), unit(0.5))], 30, CFG)
    want = 3 * unit(0) + unit(0.5)
    want /= np.linalg.norm(want)
    assert np.allclose(bank.entries[0].feature, want)


def test_duplicate_collapse_and_min_points():
    bank = MemoryBank(300, (entry(M(0, 60), unit(0)), entry(M(0, 60), unit(0), order=1)), 2, 1)
    assert len(periodic_compact(bank, FusionConfig())) == 1
    tiny = MemoryBank(300, (entry(M(0, 3), unit(0)),), 1, 1)
    assert len(periodic_compact(tiny, FusionConfig(min_points=50))) == 0


def _closure(entries, cfg):
    """Connected components of the pairwise predicate, by breadth-first search."""
    n = len(entries)

    def linked(a, b):
        ea, eb = entries[a], entries[b]
        return mask_iou(ea.mask, eb.mask) >= cfg.iou_merge and float(ea.feature @ eb.feature) >= cfg.feat_merge

    seen, groups = set(), []
    for s in range(n):
        if s in seen:
            continue
        queue, comp = [s], set()
        while queue:
            x = queue.pop()
            if x in comp:
                continue
            comp.add(x)
            queue.extend(y for y in range(n) if y not in comp and linked(x, y))
        seen |= comp
        groups.append(sorted(comp))
    return groups


def chain_bank():
    # A~B and B~C pass both tests; A and C are neither overlapping nor similar
    a = entry(M(0, 100), unit(0.0), order=0)
    b = entry(M(50, 150), unit(0.6), frames=(10,), order=1)
    c = entry(M(100, 200), unit(1.2), frames=(20,), order=2)
    return MemoryBank(300, (a, b, c), 3, 3)


def test_chain_collapses_to_one_entry():
    bank = chain_bank()
    assert _closure(list(bank.entries), CFG) == [[0, 1, 2]]
    assert merge_graph(bank.entries, 300, CFG).sum() == 2
    out = periodic_compact(bank, CFG)
    assert len(out) == 1
    e = out.entries[0]
    assert e.mask == M(0, 200) and e.frames == frozenset({0, 10, 20}) and e.order == 0


def test_compaction_is_idempotent_and_a_fixed_point(rng):
    for _ in range(30):
        entries = []
        for k in range(int(rng.integers(2, 12))):
            lo = int(rng.integers(0, 400))
            entries.append(entry(M(lo, lo + int(rng.integers(20, 120))), unit(float(rng.uniform(0, 1.5))),
                                 frames=(int(rng.integers(0, 5)) * 10,), order=k))
        bank = MemoryBank(600, tuple(entries), len(entries), 1)
        once = periodic_compact(bank, CFG)
        twice = periodic_compact(once, CFG)
        assert [e.mask for e in once.entries] == [e.mask for e in twice.entries]
        assert not merge_graph(once.entries, 600, CFG).any() if len(once) > 1 else True
        # merging never loses or invents points
        covered = np.concatenate([e.mask.indices for e in once.entries])
        assert set(covered.tolist()) == set(np.concatenate([e.mask.indices for e in entries]).tolist())


def test_min_frames_only_on_final_pass():
    bank = MemoryBank(300, (entry(M(0, 100), unit(0)),), 1, 1)
    cfg = FusionConfig(min_points=1, min_frames=2)
    assert len(periodic_compact(bank, cfg)) == 1
    assert len(periodic_compact(bank, cfg, final=True)) == 0


def test_finalize():
    assert len(finalize_bank(MemoryBank(300), CFG)) == 0
    one = finalize_bank(MemoryBank(300, (entry(M(0, 100), unit(0)),), 1, 1), CFG)
    assert len(one) == 1 and one[0].source is Source.PATH2D and one[0].id == "2d_0000"
    # two entries that only merge at the final compaction
    two = MemoryBank(300, (entry(M(0, 100), unit(0)), entry(M(10, 110), unit(0.1), order=1)), 2, 1)
    out = finalize_bank(two, CFG)
    assert len(out) == 1 and out[0].mask == M(0, 110)


def test_finalize_orders_by_size_then_first_seen():
    bank = MemoryBank(600, (entry(M(0, 60), unit(0)), entry(M(100, 200), unit(1.5), order=1),
                            entry(M(300, 360), unit(3.0), order=2)), 3, 1)
    out = finalize_bank(bank, CFG)
    assert [len(p.mask) for p in out] == [100, 60, 60]
    assert out[1].mask == M(0, 60)


def test_fuse_sequence_applies_stride():
    frames = [(f"{k}", [(M(0, 100), unit(0))]) for k in range(0, 40, 5)]
    out = fuse_sequence(frames, 300, FusionConfig(min_points=1, min_frames=4, frame_stride=10))
    assert len(out) == 1  # frames 0, 10, 20, 30
    out = fuse_sequence(frames, 300, FusionConfig(min_points=1, min_frames=5, frame_stride=10))
    assert len(out) == 0


def test_config_validation():
    from dualpath.errors import ConfigError

    with pytest.raises(ConfigError):
        FusionConfig(iou_merge=1.5)
    with pytest.raises(ConfigError):
        FusionConfig(frame_stride=0)
