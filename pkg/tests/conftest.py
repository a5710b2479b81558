import numpy as np
import pytest

from dualpath.masks import InstanceMask
from dualpath.scene import CameraFrame, PointCloud, Proposal, ProposalSet, Source, normalize


def make_frame(frame_id="0", width=100, height=100, f=100.0, depth=None, pose=None, c=None):
    cx, cy = (width / 2, height / 2) if c is None else c
    K = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
    if depth is None:
        depth = np.zeros((height, width), dtype=np.float32)
    return CameraFrame(frame_id, K, np.eye(4) if pose is None else pose, width, height, depth)


def pset(n, masks, prefix, source=Source.PATH3D, features=None):
    props = []
    for k, m in enumerate(masks):
        feat = None if features is None else normalize(np.asarray(features[k], dtype=float))
        props.append(Proposal(f"{prefix}{k}", InstanceMask.from_unsorted(m), feat, source))
    dim = None if features is None else len(features[0])
    return ProposalSet(n, props, dim)


def cloud(points):
    return PointCloud(np.asarray(points, dtype=np.float64).reshape(-1, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, tuple[str, bool]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}")
