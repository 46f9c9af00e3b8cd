import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dynfield.diffcore import ContractViolation
from dynfield.hexplane import (
    PLANE_IDS,
    ClampCounter,
    HexPlaneSet,
    PlaneResolution,
    concat_scales,
    export_planes,
    fuse,
    project,
    sample_plane,
)

D = torch.float64
RES = PlaneResolution(50, 8)


def _p(x=0.0, y=0.0, z=0.0, t=0.0):
    return torch.tensor([[x, y, z, t]], dtype=D)


def test_project_endpoints_and_midpoint():
    u, _ = project(_p(x=-1.0), "xy", RES)
    assert u.item() == 0.0
    _, v = project(_p(t=1.0), "xt", RES)
    assert v.item() == 7.0
    u, _ = project(_p(x=0.0), "xz", RES)
    assert u.item() == 24.5


def test_project_clamps_and_counts():
    c = ClampCounter()
    u, v = project(_p(x=1.5, t=-0.2), "xt", RES, c)
    assert u.item() == 49.0 and v.item() == 0.0
    assert c.count == 2


def test_project_rejects_unknown_plane():
    with pytest.raises(ContractViolation):
        project(_p(), "xx", RES)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-1, 1), b=st.floats(-1, 1))
def test_project_monotone(a, b):
    a, b = min(a, b), max(a, b)
    ua, _ = project(_p(y=a), "yz", RES)
    ub, _ = project(_p(y=b), "yz", RES)
    # weak: nearby inputs may round to the same coordinate
    assert ua.item() <= ub.item()
    if b - a > 1e-3:
        assert ua.item() < ub.item()


def test_sample_node_exact():
    g = torch.Generator().manual_seed(0)
    grid = torch.rand(4, 9, 8, generator=g, dtype=D)
    out = sample_plane(grid, torch.tensor([3.0], dtype=D), torch.tensor([5.0], dtype=D))
    assert torch.equal(out[0], grid[:, 5, 3])


def test_sample_constant_patch():
    grid = torch.full((2, 4, 4), 0.37, dtype=D)
    out = sample_plane(grid, torch.tensor([1.3, 2.9], dtype=D), torch.tensor([0.2, 2.5], dtype=D))
    assert torch.allclose(out, torch.full_like(out, 0.37), atol=1e-15)


def test_sample_bilinear_quarter():
    grid = torch.zeros(1, 2, 2, dtype=D)
    grid[0, 1, 1] = 1.0
    out = sample_plane(grid, torch.tensor([0.5], dtype=D), torch.tensor([0.5], dtype=D))
    assert abs(out.item() - 0.25) < 1e-15


def test_texel_gradient_is_bilinear_weights():
    grid = torch.rand(1, 5, 5, dtype=D, requires_grad=True)
    u, v = torch.tensor([1.25], dtype=D), torch.tensor([2.6], dtype=D)
    (g,) = torch.autograd.grad(sample_plane(grid, u, v).sum(), grid)
    expect = torch.zeros(1, 5, 5, dtype=D)
    expect[0, 2, 1] = 0.75 * 0.4
    expect[0, 2, 2] = 0.25 * 0.4
    expect[0, 3, 1] = 0.75 * 0.6
    expect[0, 3, 2] = 0.25 * 0.6
    assert torch.allclose(g, expect, atol=1e-14)
    assert abs(g.sum().item() - 1.0) < 1e-14


@settings(max_examples=30, deadline=None)
@given(u=st.floats(0, 6), v=st.floats(0, 4), du=st.floats(0, 0.5), seed=st.integers(0, 99))
def test_sample_lipschitz(u, v, du, seed):
    g = torch.Generator().manual_seed(seed)
    grid = torch.rand(3, 5, 7, generator=g, dtype=D)
    u2 = min(u + du, 6.0)
    a = sample_plane(grid, torch.tensor([u], dtype=D), torch.tensor([v], dtype=D))
    b = sample_plane(grid, torch.tensor([u2], dtype=D), torch.tensor([v], dtype=D))
    lip = (grid[:, :, 1:] - grid[:, :, :-1]).abs().amax(dim=(1, 2))
    assert torch.all((a - b).abs()[0] <= lip * (u2 - u) + 1e-12)


def test_fuse_examples():
    ones = [torch.ones(4) for _ in range(6)]
    assert torch.equal(fuse(ones), torch.ones(4))
    zero = ones[:5] + [torch.zeros(4)]
    assert torch.equal(fuse(zero), torch.zeros(4))
    vals = [2.0, 3.0, 1.0, 1.0, 1.0, 0.5]
    assert fuse([torch.tensor([v, 1.0]) for v in vals])[0].item() == 3.0
    with pytest.raises(ContractViolation):
        fuse([torch.ones(3), torch.ones(4)])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), perm=st.permutations(range(6)))
def test_fuse_order_invariant(seed, perm):
    g = torch.Generator().manual_seed(seed)
    feats = [torch.rand(5, generator=g, dtype=D) for _ in range(6)]
    a = fuse(feats)
    b = fuse([feats[i] for i in perm])
    assert torch.allclose(a, b, rtol=1e-14)
    x = feats[0]
    assert torch.equal(fuse([x] + [torch.ones(5, dtype=D)] * 5), x)


def test_concat_scales():
    a = torch.tensor([1.0, 2.0])
    assert torch.equal(concat_scales([a]), a)
    assert torch.equal(concat_scales([a, torch.tensor([3.0])]), torch.tensor([1.0, 2.0, 3.0]))
    f1, f2 = torch.rand(16), torch.rand(16)
    c = concat_scales([f1, f2])
    assert c.shape == (32,) and torch.equal(c[:16], f1)
    with pytest.raises(ContractViolation):
        concat_scales([])


def test_hexplane_set_shapes_and_init():
    hp = HexPlaneSet(PlaneResolution(6, 3), features=5, generator=torch.Generator().manual_seed(0))
    assert set(hp.planes.keys()) == set(PLANE_IDS)
    assert hp.planes["xy"].shape == (5, 6, 6)
    assert hp.planes["xt"].shape == (5, 3, 6)
    for p in hp.planes.values():
        assert p.min() >= 0.9 and p.max() <= 1.1
    pts = torch.rand(7, 4) * 2 - 1
    pts[:, 3] = pts[:, 3].abs()
    assert hp(pts).shape == (7, 5)


def test_hexplane_matches_manual_product():
    hp = HexPlaneSet(PlaneResolution(5, 4), features=3, generator=torch.Generator().manual_seed(1),
                     dtype=D)
    pts = torch.tensor([[0.1, -0.3, 0.55, 0.4]], dtype=D)
    manual = torch.ones(3, dtype=D)
    for pid in PLANE_IDS:
        u, v = project(pts, pid, hp.res)
        manual = manual * sample_plane(hp.planes[pid].detach(), u, v)[0]
    assert torch.allclose(hp(pts)[0], manual, rtol=1e-13)


def test_resolution_guard():
    with pytest.raises(ContractViolation):
        PlaneResolution(1, 4)


def test_export_planes(tmp_path):
    hp = HexPlaneSet(PlaneResolution(4, 2), features=2)
    files = export_planes(hp, tmp_path)
    assert len(files) == 12
    assert (tmp_path / "xt_c01.png").exists()
