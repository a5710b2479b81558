import itertools
import sys

import numpy as np
import pytest

from dualpath import io
from dualpath.errors import ProviderError
from dualpath.features import (HashProvider, PrecomputedProvider, SubprocessProvider, assemble_mask_feature,
                               hash_embed, mask_crops, pool_features, rank_by_query)
from dualpath.masks import InstanceMask
from dualpath.projection import CropBox
from dualpath.scene import Proposal, ProposalSet, Source

from conftest import cloud, make_frame


def test_hash_embed_is_deterministic_and_unit():
    a = hash_embed("chair", 768, 0)
    assert np.array_equal(a, hash_embed("chair", 768, 0))
    assert abs(np.linalg.norm(a) - 1) <= 1e-6
    assert not np.array_equal(a, hash_embed("chair", 768, 1))


def test_distinct_words_are_nearly_orthogonal():
    assert abs(hash_embed("chair") @ hash_embed("table")) < 0.2
    words = ["chair", "table", "sofa", "lamp", "door", "window", "bed", "sink", "shelf", "desk"]
    worst = max(abs(hash_embed(a) @ hash_embed(b)) for a, b in itertools.combinations(words, 2))
    assert worst < 0.2


def test_pool_features():
    f = np.array([0.6, 0.8, 0.0])
    assert np.allclose(pool_features(np.stack([f, f, f])), f)
    assert np.allclose(pool_features(np.eye(3)[:2]), [np.sqrt(0.5), np.sqrt(0.5), 0])


class ConstantProvider:
    def __init__(self, vec):
        self.vec = np.asarray(vec, dtype=float)
        self.dim = self.vec.size
        self.calls = []

    def features(self, crops):
        self.calls.append(list(crops))
        return np.tile(self.vec, (len(crops), 1))


def _point_scene(frames_visible):
    c = cloud([[0, 0, 1]])
    frames = []
    for k in range(3):
        d = np.zeros((100, 100), np.float32)
        if k < frames_visible:
            d[50, 50] = 1.0
        frames.append(make_frame(str(k * 10), depth=d))
    return c, frames


def test_assemble_uses_available_frames_only():
    c, frames = _point_scene(2)
    prov = ConstantProvider([0.0, 1.0])
    feat = assemble_mask_feature(InstanceMask([0]), c, frames, prov, k=5, levels=3)
    assert np.allclose(feat, [0, 1])
    assert len(prov.calls[0]) == 2 * 3  # two visible frames, three levels each
    assert {cr.frame_id for cr in prov.calls[0]} == {"0", "10"}


def test_provider_shape_and_value_checks():
    c, frames = _point_scene(1)

    class Bad:
        dim = 2

        def features(self, crops):
            return np.zeros((len(crops), 3))

    class Nan:
        dim = 2

        def features(self, crops):
            return np.full((len(crops), 2), np.nan)

    for prov in (Bad(), Nan()):
        with pytest.raises(ProviderError) as err:
            assemble_mask_feature(InstanceMask([0]), c, frames, prov, owner="proposal p7")
        assert "p7" in str(err.value) and err.value.crop is not None


def test_precomputed_provider_serves_exported_crops():
    crops = [CropBox("0", 0, 0, 5, 5, 0), CropBox("0", 0, 0, 6, 6, 1)]
    vecs = np.eye(2)
    prov = PrecomputedProvider(crops, vecs)
    assert np.array_equal(prov.features(crops[::-1]), vecs[::-1])
    with pytest.raises(ProviderError):
        prov.features([CropBox("9", 0, 0, 1, 1, 0)])
    with pytest.raises(ProviderError):
        PrecomputedProvider(crops, np.eye(3))


def test_subprocess_provider_round_trip(tmp_path):
    script = tmp_path / "enc.py"
    script.write_text(
        "import sys, json, numpy as np\n"
        "from dualpath import io\n"
        "rows = [json.loads(l) for l in open(sys.argv[1]) if l.strip()]\n"
        "io.save_dpfv(sys.argv[2], np.array([[r['u_min'], r['level'], 1.0] for r in rows]))\n")
    prov = SubprocessProvider([sys.executable, str(script)], dim=3)
    out = prov.features([CropBox("0", 4, 0, 9, 9, 2), CropBox("0", 1, 0, 9, 9, 0)])
    assert out.tolist() == [[4, 2, 1], [1, 0, 1]]
    failing = SubprocessProvider([sys.executable, "-c", "import sys; sys.exit(3)"], dim=3)
    with pytest.raises(ProviderError):
        failing.features([CropBox("0", 0, 0, 1, 1, 0)])


def test_hash_provider_depends_on_geometry_only():
    prov = HashProvider(16)
    a = prov.features([CropBox("0", 0, 0, 5, 5, 0)])
    assert np.array_equal(a, prov.features([CropBox("0", 0, 0, 5, 5, 0)]))
    assert not np.array_equal(a, prov.features([CropBox("0", 0, 0, 5, 6, 0)]))


def _featured(feats):
    props = [Proposal(f"p{k}", InstanceMask([k]), None if f is None else np.asarray(f, float),
                      Source.PATH3D) for k, f in enumerate(feats)]
    return ProposalSet(10, props, 3)


def test_rank_by_query():
    q = np.array([1.0, 0, 0])
    res = rank_by_query(_featured([[0, 1, 0], [1, 0, 0], None]), q)
    assert res.hits[0] == ("p1", 1.0) and res.skipped == ["p2"]
    # orthogonal to everything: zeros, input order kept
    res = rank_by_query(_featured([[0, 1, 0], [0, 0, 1]]), q)
    assert res.hits == [("p0", 0.0), ("p1", 0.0)]
    f1 = np.array([0.9, np.sqrt(1 - 0.81), 0])
    f2 = np.array([0.2, np.sqrt(1 - 0.04), 0])
    res = rank_by_query(_featured([f2, f1]), q, top_n=2)
    assert [h[0] for h in res.hits] == ["p1", "p0"]
    assert [h[1] for h in res.hits] == pytest.approx([0.9, 0.2])


def test_crop_export_round_trip_through_precomputed(tmp_path):
    c, frames = _point_scene(3)
    crops = mask_crops(InstanceMask([0]), c, frames, k=2)
    io.save_crops(tmp_path / "c.jsonl", [("p0", cr) for cr in crops])
    vecs = np.tile([1.0, 2.0], (len(crops), 1))
    io.save_dpfv(tmp_path / "r.dpfv", vecs)
    prov = PrecomputedProvider([cr for _, cr in io.load_crops(tmp_path / "c.jsonl")],
                               io.load_dpfv(tmp_path / "r.dpfv"))
    feat = assemble_mask_feature(InstanceMask([0]), c, frames, prov, k=2)
    assert np.allclose(feat, np.array([1, 2]) / np.sqrt(5))
