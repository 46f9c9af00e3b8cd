import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from dynfield.diffcore import ContractViolation
from dynfield.hexplane import TEST_PROFILE
from dynfield.renderfield import (
    CameraPose,
    CascadeField,
    composite,
    compute_normals,
    generate_rays,
    ray_sphere,
    render,
    sample_distances,
)
from dynfield.scenedata import orbiter_scene, render_gt

from helpers import ConstantField, SlabField, ray_through_center

D = torch.float64


def _field(mode="cascade", scales=TEST_PROFILE, seed=0):
    return CascadeField(list(scales), features=4, mode=mode, hidden=8, seed=seed, dtype=D)


def _pts(n=20, seed=0):
    g = torch.Generator().manual_seed(seed)
    p = torch.rand(n, 3, generator=g, dtype=D) * 1.6 - 0.8
    t = torch.rand(n, generator=g, dtype=D)
    return p, t


def test_single_scale_is_plain_kplanes():
    f = _field(scales=TEST_PROFILE[:1])
    p, t = _pts()
    p4 = torch.cat([p, t[:, None]], -1)
    feat = f.scales[0](p4)
    rgb = torch.sigmoid(f.color_heads[0](feat))
    sig = F.softplus(f.density_heads[0](feat)[..., 0])
    (lrgb, lsig), = f.levels(p, t)
    assert torch.equal(lrgb, rgb) and torch.equal(lsig, sig)


def test_fresh_fine_heads_are_zero_residuals():
    f = _field()
    p, t = _pts()
    (c1, s1), (c2, s2) = f.levels(p, t)
    assert torch.equal(c1, c2) and torch.equal(s1, s2)


def test_raw_density_sum_then_softplus():
    f = _field()
    with torch.no_grad():
        for head, b in ((f.density_heads[0], 0.3), (f.density_heads[1], -0.1)):
            head.out.weight.zero_()
            head.out.bias.fill_(b)
    p, t = _pts(3)
    p4 = torch.cat([p, t[:, None]], -1)
    _, sigma = f.eval_field(p4, 2)
    expect = math.log1p(math.exp(0.3 + -0.1))
    assert torch.allclose(sigma, torch.full_like(sigma, expect), atol=1e-15)
    _, s1 = f.eval_field(p4, 1)
    assert torch.allclose(s1, torch.full_like(s1, math.log1p(math.exp(0.3))), atol=1e-15)


def test_cascade_telescoping():
    f = _field()
    with torch.no_grad():
        for p in f.parameters():
            p.add_(0.05 * torch.randn_like(p))
    p, t = _pts()
    p4 = torch.cat([p, t[:, None]], -1)
    (r1, s1), (r2, s2) = f.raw_levels(p4)
    feat = f.scales[1](p4)
    assert torch.allclose(r2 - r1, f.color_heads[1](feat), atol=1e-13)
    assert torch.allclose(s2 - s1, f.density_heads[1](feat)[..., 0], atol=1e-13)


def test_eval_field_scale_guard():
    f = _field()
    p4 = torch.zeros(1, 4, dtype=D)
    with pytest.raises(ContractViolation):
        f.eval_field(p4, 3)


def test_concat_mode_one_level():
    f = _field("concat")
    assert f.n_levels == 1
    assert len(f.color_heads) == 1 and f.color_heads[0].hidden[0].in_features == 8
    p, t = _pts()
    assert len(f.levels(p, t)) == 1


def test_config_round_trip():
    f = _field()
    g = CascadeField.from_config(f.config(), dtype=D)
    for a, b in zip(f.parameters(), g.parameters()):
        assert torch.equal(a, b)


def test_center_ray_hits_origin():
    cam = CameraPose(33.0, 21.0)
    o, d = generate_rays(cam, 5, 7, dtype=D)
    oc, dc = o[3, 2], d[3, 2]
    closest = oc - (oc @ dc) * dc
    assert closest.norm() < 1e-6


def test_opposite_azimuths():
    _, d0 = generate_rays(CameraPose(0.0, 0.0), 3, 3, dtype=D)
    _, d1 = generate_rays(CameraPose(180.0, 0.0), 3, 3, dtype=D)
    assert torch.allclose(d0[1, 1], -d1[1, 1], atol=1e-12)


def test_corner_ray_angle():
    cam = CameraPose(10.0, 5.0, fov=40.0)
    w, h = 8, 6
    o, d = generate_rays(cam, w, h, dtype=D)
    fwd = -o[0, 0] / o[0, 0].norm()
    th = math.tan(math.radians(20.0))
    x = th * (w / h) * (1 - 1 / w)
    y = th * (1 - 1 / h)
    expect = math.atan(math.hypot(x, y))
    got = math.acos(float(d[0, 0] @ fwd))
    assert abs(got - expect) < 1e-9


def test_camera_guards():
    with pytest.raises(ContractViolation):
        CameraPose(0, 0, radius=0.9)
    with pytest.raises(ContractViolation):
        CameraPose(0, 0, fov=130)


def test_zero_density_renders_background():
    o, d = ray_through_center()
    out = render(ConstantField(0.0), o, d, 0.5, n_samples=16, scale=1, background=0.3)
    assert torch.allclose(out.rgb, torch.full_like(out.rgb, 0.3))
    assert out.opacity.item() == 0.0


def test_opaque_slab():
    o, d = ray_through_center()
    out = render(SlabField(0.2, 1e6), o, d, 0.5, n_samples=2048, scale=1, background=0.0)
    assert torch.allclose(out.rgb[0], torch.tensor([0.9, 0.1, 0.3], dtype=D), atol=1e-9)
    assert abs(out.opacity.item() - 1.0) < 1e-9
    # slab entry at x = 0.2 is distance 3.2 from the origin at x = -3
    assert abs(out.depth.item() - 3.2) < 2.0 / 2048 + 1e-9


def test_ray_miss_is_background():
    o = torch.tensor([[-3.0, 2.0, 0.0]], dtype=D)
    d = torch.tensor([[1.0, 0.0, 0.0]], dtype=D)
    out = render(ConstantField(5.0), o, d, 0.0, n_samples=8, scale=1, background=0.7)
    assert out.opacity.item() == 0.0
    assert torch.allclose(out.rgb, torch.full_like(out.rgb, 0.7))


@settings(max_examples=40, deadline=None)
@given(sigma=st.floats(0.01, 20.0), length=st.floats(0.05, 2.0))
def test_homogeneous_beer_lambert(sigma, length):
    o, d = ray_through_center()
    out = render(ConstantField(sigma), o, d, 0.0, n_samples=128, scale=1,
                 bound_radius=length / 2)
    assert abs(out.opacity.item() - (1 - math.exp(-sigma * length))) < 1e-3


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_transmittance_monotone(seed):
    g = torch.Generator().manual_seed(seed)
    sigma = torch.rand(4, 32, generator=g, dtype=D) * 10
    rgb = torch.rand(4, 32, 3, generator=g, dtype=D)
    deltas = torch.full((4, 32), 0.05, dtype=D)
    t_vals = torch.cumsum(deltas, -1)
    _, acc, _, w = composite(sigma, rgb, deltas, t_vals, 1.0)
    trans = 1 - torch.cumsum(w, -1)
    assert torch.all(trans[:, 1:] <= trans[:, :-1] + 1e-12)
    assert torch.all((acc >= 0) & (acc <= 1 + 1e-12))


def test_stratified_samples_stay_in_bins():
    near = torch.tensor([0.5], dtype=D)
    far = torch.tensor([2.5], dtype=D)
    t, deltas = sample_distances(near, far, 10, torch.Generator().manual_seed(0))
    edges = torch.linspace(0.5, 2.5, 11, dtype=D)
    assert torch.all(t[0] >= edges[:-1]) and torch.all(t[0] <= edges[1:])
    assert torch.allclose(deltas, torch.full_like(deltas, 0.2))


def test_ray_sphere():
    o, d = ray_through_center()
    near, far = ray_sphere(o, d, 1.0)
    assert near.item() == 2.0 and far.item() == 4.0


def test_render_time_guard():
    o, d = ray_through_center()
    with pytest.raises(ContractViolation):
        render(ConstantField(1.0), o, d, 1.5, n_samples=4)


def test_normals_planar_ramp():
    pts = torch.rand(10, 3, dtype=D) - 0.5
    n, valid = compute_normals(lambda p, t: p[..., 0], pts, 0.0)
    assert valid.all()
    assert torch.allclose(n, torch.tensor([-1.0, 0.0, 0.0], dtype=D).expand_as(n), atol=1e-12)


def test_normals_radial_blob():
    blob = lambda p, t: torch.exp(-4.0 * (p * p).sum(-1))
    g = torch.Generator().manual_seed(0)
    dirs = torch.randn(50, 3, generator=g, dtype=D)
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    pts = 0.4 * dirs
    n, valid = compute_normals(blob, pts, 0.0)
    assert valid.all()
    ang = torch.rad2deg(torch.acos((n * dirs).sum(-1).clamp(-1, 1)))
    assert ang.max() < 2.0


def test_normals_constant_invalid():
    n, valid = compute_normals(lambda p, t: torch.ones(p.shape[:-1], dtype=p.dtype),
                               torch.zeros(4, 3, dtype=D), 0.0)
    assert not valid.any()
    assert torch.equal(n, torch.zeros_like(n))


def test_render_normals_unit_where_opaque():
    scene = orbiter_scene()
    o, d = generate_rays(CameraPose(0.0, 10.0), 12, 12, dtype=D)
    out = render(scene, o, d, 0.3, n_samples=64, scale=1, with_normals=True)
    m = out.opacity > 0.5
    assert m.any()
    nn_ = out.normal[m].norm(dim=-1)
    assert torch.allclose(nn_, torch.ones_like(nn_), atol=1e-9)


def test_rotation_equivariance():
    scene = orbiter_scene()
    rot = scene.rotated(90.0)
    a = render_gt(scene, CameraPose(20.0, 15.0), 0.4, 12, 12, n_samples=64)
    b = render_gt(rot, CameraPose(110.0, 15.0), 0.4, 12, 12, n_samples=64)
    assert torch.allclose(a.rgb, b.rgb, atol=1e-6)
    assert torch.allclose(a.opacity, b.opacity, atol=1e-6)


def test_render_levels_and_zeroed_heads_bitwise():
    f = _field()
    with torch.no_grad():
        for p in f.parameters():
            p.add_(0.1 * torch.randn_like(p))
    o, d = generate_rays(CameraPose(0.0, 10.0), 6, 6, dtype=D)
    outs = render(f, o, d, 0.5, n_samples=16)
    assert len(outs) == 2
    assert not torch.equal(outs[0].rgb, outs[1].rgb)
    f.zero_fine_heads()
    outs = render(f, o, d, 0.5, n_samples=16)
    assert torch.equal(outs[0].rgb, outs[1].rgb)
