import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from colongs.deformation import (FLAG_BITS, DeformationField, FieldConfig, HexPlaneEncoder,
                                 MalformedCheckpoint, bounded_add, log_scale_cap)
from colongs.scene import GaussianCloud, scene_extent

from helpers import TINY_FIELD, central_difference, grad_close, micro_scene


def _cloud(n=6, seed=0, emb=2, log_scale=(-4.0, -3.0)):
    rng = np.random.default_rng(seed)
    c = GaussianCloud.create(rng.uniform(-1, 1, (n, 3)), log_scales=rng.uniform(*log_scale, (n, 3)),
                             rotations=rng.normal(size=(n, 4)), opacities=rng.uniform(0.1, 0.9, n),
                             colors=rng.uniform(0.1, 0.9, (n, 3)), embedding_dim=emb)
    c.enforce_invariants()
    c.embeddings[:] = rng.normal(size=c.embeddings.shape)
    return c


def _perturb(field, rng, scale=1.0):
    for name, v in field.params().items():
        v += rng.normal(size=v.shape) * scale


# encoder --------------------------------------------------------------------------

def _encoder(cfg, seed=0):
    return HexPlaneEncoder(cfg, np.zeros(3), np.ones(3), rng=np.random.default_rng(seed))


def test_constant_grids_give_cubes():
    cfg = FieldConfig(levels=2, spatial_res=4, temporal_res=3, features=3)
    enc = _encoder(cfg)
    for name in enc.grids:
        enc.grids[name][:] = 0.7
    feat = enc.encode(np.random.default_rng(1).uniform(0, 1, (20, 3)), 0.37)
    np.testing.assert_allclose(feat, 0.7 ** 3, rtol=1e-14)


def test_node_query_is_exact():
    cfg = FieldConfig(levels=1, spatial_res=5, temporal_res=3, features=2)
    enc = _encoder(cfg, seed=3)
    i, j, k, m = 1, 3, 4, 2
    p = np.array([[i / 4, j / 4, k / 4]])
    feat = enc.encode(p, m / 2)
    g = enc.grids
    spatial = g["grid.l0.xy"][i, j] * g["grid.l0.xz"][i, k] * g["grid.l0.yz"][j, k]
    temporal = g["grid.l0.xt"][i, m] * g["grid.l0.yt"][j, m] * g["grid.l0.zt"][k, m]
    np.testing.assert_array_equal(feat[0], np.concatenate([spatial, temporal]))


def _corner_lookup(grid, a, b):
    ra, rb, _ = grid.shape
    fa, fb = a * (ra - 1), b * (rb - 1)
    total = np.zeros(grid.shape[2])
    for i in range(ra):
        for j in range(rb):
            w = max(0.0, 1 - abs(fa - i)) * max(0.0, 1 - abs(fb - j))
            total += w * grid[i, j]
    return total


def test_encode_matches_dense_weight_oracle():
    cfg = FieldConfig(levels=2, spatial_res=4, temporal_res=3, features=3)
    enc = _encoder(cfg, seed=5)
    rng = np.random.default_rng(6)
    for name in enc.grids:
        enc.grids[name][:] = rng.normal(size=enc.grids[name].shape)
    pts = rng.uniform(0, 1, (15, 3))
    pts[0] = [1.0, 0.0, 1.0]
    t = 0.81
    feat = enc.encode(pts, t)
    for n, p in enumerate(pts):
        coords = [p[0], p[1], p[2], t]
        expect = []
        for lvl in range(cfg.levels):
            for group in (((0, 1), (0, 2), (1, 2)), ((0, 3), (1, 3), (2, 3))):
                prod = np.ones(cfg.features)
                for a, b in group:
                    prod *= _corner_lookup(enc.grids[enc.plane_name(lvl, a, b)], coords[a], coords[b])
                expect.append(prod)
        np.testing.assert_allclose(feat[n], np.concatenate(expect), atol=1e-6)


def test_bbox_contains_positions_with_margin():
    c = _cloud(20)
    f = DeformationField.create(FieldConfig(**TINY_FIELD), c.positions)
    lo, hi = c.positions.min(0), c.positions.max(0)
    np.testing.assert_allclose(lo - f.encoder.lo, 0.05 * (hi - lo))
    np.testing.assert_allclose(f.encoder.hi - hi, 0.05 * (hi - lo))


# deform ---------------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_fresh_field_is_identity(seed, t):
    c = _cloud(8, seed)
    f = DeformationField.create(FieldConfig(**TINY_FIELD), c.positions, rng=np.random.default_rng(seed))
    d = f.deform(c, t)
    for got, want in ((d.positions, c.positions), (d.log_scales, c.log_scales),
                      (d.rotations, c.rotations), (d.opacity_logits, c.opacity_logits),
                      (d.colors, c.base_colors)):
        assert got.tobytes() == want.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_constraints_hold_for_arbitrary_parameters(seed):
    rng = np.random.default_rng(seed)
    c = _cloud(10, seed, log_scale=(-4.0, 0.0))
    # the trainer keeps canonical scales under the cap; start from that state
    c.log_scales = np.minimum(c.log_scales, log_scale_cap(scene_extent(c.positions)))
    cfg = FieldConfig(**TINY_FIELD)
    f = DeformationField.create(cfg, c.positions, rng=rng)
    _perturb(f, rng, scale=2.0)
    cap = 0.05 * scene_extent(c.positions)
    for t in rng.uniform(0, 1, 20):
        d = f.deform(c, t)
        assert np.max(np.abs(d.log_scales - c.log_scales)) <= cfg.tau_s
        assert np.max(np.abs(d.rotations_prenorm - c.rotations)) <= cfg.tau_r
        assert d.opacity_logits.tobytes() == c.opacity_logits.tobytes()
        assert np.all(np.exp(d.log_scales) <= cap)
        assert np.all((d.colors >= 0) & (d.colors <= 1))


def test_full_color_extinction():
    c = _cloud(4)
    f = DeformationField.create(FieldConfig(**TINY_FIELD), c.positions)
    f.mlp["color.b1"][:] = -1.0
    d = f.deform(c, 0.5)
    assert not d.colors.any()
    np.testing.assert_array_equal(d.delta_c, -1.0)


def test_no_delta_c_bypasses_color_head():
    c = _cloud(4)
    f = DeformationField.create(FieldConfig(**TINY_FIELD, no_delta_c=True), c.positions)
    f.mlp["color.b1"][:] = 0.5
    d = f.deform(c, 0.3)
    assert d.colors.tobytes() == c.base_colors.tobytes()


def test_no_constraints_frees_opacity_and_scale():
    c = _cloud(5)
    cfg = FieldConfig(**TINY_FIELD, no_constraints=True)
    f = DeformationField.create(cfg, c.positions)
    assert "head.da.w" in f.mlp
    f.mlp["head.da.b"][:] = 0.4
    f.mlp["head.ds.b"][:] = 1.0
    d = f.deform(c, 0.2)
    np.testing.assert_allclose(d.opacity_logits, c.opacity_logits + 0.4)
    np.testing.assert_allclose(d.log_scales, c.log_scales + 1.0)


def test_bounded_add_and_cap_are_exact():
    rng = np.random.default_rng(0)
    base = rng.normal(size=10_000) * 100
    out = bounded_add(base, rng.normal(size=10_000) * 5, 0.05)
    assert np.max(np.abs(out - base)) <= 0.05
    for extent in rng.uniform(1e-3, 50, 200):
        assert np.exp(log_scale_cap(extent)) <= 0.05 * extent


def test_temporal_continuity():
    rng = np.random.default_rng(2)
    c = _cloud(30, 2)
    cfg = FieldConfig(**TINY_FIELD)
    f = DeformationField.create(cfg, c.positions, rng=rng)
    _perturb(f, rng, scale=0.5)
    delta = 1e-4
    # Lipschitz bound in t: each temporal lookup moves by at most (R_t - 1) * max step along t
    feat_bound = []
    for lvl in range(cfg.levels):
        rs, rt = cfg.level_res(lvl)
        spatial = np.zeros(cfg.features)
        feat_bound.append(spatial)
        planes = [f.encoder.grids[f.encoder.plane_name(lvl, a, 3)] for a in range(3)]
        lip = [np.max(np.abs(np.diff(p, axis=1)), axis=(0, 1)) * (rt - 1) for p in planes]
        mag = [np.max(np.abs(p), axis=(0, 1)) for p in planes]
        feat_bound.append(sum(lip[k] * mag[(k + 1) % 3] * mag[(k + 2) % 3] for k in range(3)))
    bound = np.linalg.norm(np.concatenate(feat_bound)) * delta
    for k in range(cfg.depth):
        bound *= np.linalg.norm(f.mlp[f"mlp.w{k}"], 2)
    bound *= np.linalg.norm(f.mlp["head.dx.w"], 2)
    for t in rng.uniform(0, 1 - delta, 20):
        move = np.linalg.norm(f.deform(c, t).positions - f.deform(c, t + delta).positions, axis=1)
        assert np.all(move <= bound * (1 + 1e-9))
        assert move.max() < 1e-2


# backward --------------------------------------------------------------------------

def _outputs(d):
    return [d.positions, d.log_scales, d.rotations, d.opacity_logits, d.colors, d.delta_c]


def test_zero_upstream_gives_zero_gradients():
    c, f, _, _ = micro_scene(0)
    d = f.deform(c, 0.4, record=True)
    z = [np.zeros_like(a) for a in _outputs(d)]
    gc, gf = f.deform_backward(c, d, *z[:5], g_dc=z[5])
    assert not any(v.any() for v in gc.values())
    assert not any(v.any() for v in gf.values())


@pytest.mark.parametrize("no_constraints", [False, True])
@pytest.mark.parametrize("seed", range(4))
def test_deform_gradients_match_finite_differences(seed, no_constraints):
    kw = dict(TINY_FIELD, spatial_res=4, no_constraints=no_constraints)
    c, f, _, _ = micro_scene(seed, field_kw=kw, n_range=(2, 3), head_noise=0.05)
    rng = np.random.default_rng(100 + seed)
    t = 0.3 + 0.4 * rng.uniform()
    d = f.deform(c, t, record=True)
    weights = [rng.normal(size=a.shape) for a in _outputs(d)]

    def objective():
        return float(sum(np.sum(w * a) for w, a in zip(weights, _outputs(f.deform(c, t)))))

    gc, gf = f.deform_backward(c, d, *weights[:5], g_dc=weights[5])
    for params, grads in ((c.params(), gc), (f.params(), gf)):
        for name, arr in params.items():
            for i in range(arr.size):
                fd = central_difference(objective, arr, i)
                a = grads[name].reshape(-1)[i]
                assert grad_close(a, fd), (name, i, a, fd)


def test_saturated_scale_offset_has_zero_gradient():
    c, f, _, _ = micro_scene(1)
    f.mlp["head.ds.b"][:] = 10.0 * f.config.tau_s
    f.mlp["head.ds.w"][:] = 0.0
    d = f.deform(c, 0.5, record=True)
    g = [np.zeros_like(a) for a in _outputs(d)]
    g[1] = np.ones_like(d.log_scales)
    _, gf = f.deform_backward(c, d, *g[:5], g_dc=g[5])
    assert not gf["head.ds.w"].any() and not gf["head.ds.b"].any()


# checkpoint ------------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    c, f, _, _ = micro_scene(2, field_kw=dict(TINY_FIELD, no_delta_c=True))
    f.config.flags["no_knn"] = True
    f.save(tmp_path / "f.bin")
    back = DeformationField.load(tmp_path / "f.bin")
    assert back.flags == {"no_constraints": False, "no_delta_c": True, "no_knn": True, "frozen": False}
    assert back.flags_word() == FLAG_BITS["no_delta_c"] | FLAG_BITS["no_knn"]
    for name, arr in f.params().items():
        np.testing.assert_array_equal(back.params()[name], arr.astype(np.float32))
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:8] == b"CSPLATDF"


def test_checkpoint_corruption(tmp_path):
    _, f, _, _ = micro_scene(3)
    f.save(tmp_path / "f.bin")
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "magic.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    (tmp_path / "short.bin").write_bytes(raw[:-4])
    for name in ("magic.bin", "short.bin"):
        with pytest.raises(MalformedCheckpoint):
            DeformationField.load(tmp_path / name)
