"""Latent arithmetic: grid exactness, attribute tables, shifts, diagnostics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_db, tiny_model
from segvae import latent
from segvae.errors import DataError, UsageError
from segvae.latent import (GRID, AttributeEntry, AttributeTable, LatentShift,
                           apply_shift, build_attribute_table, cosine_matrix,
                           estimate_attribute_repr, feature_space_average,
                           fsum_mean, interpolate, log_prior, make_shift, modify,
                           offdiag_cov_profile, offdiag_cov_profile_z,
                           reconstruct, sample_prior, snap, zero_shift)
from segvae.rng import Rng


class _Rec:
    def __init__(self, speaker, phone):
        self.speaker = speaker
        self.phone = phone


def _fitted_model(seed=0):
    m = tiny_model(seed=seed)
    x = random_db((30, 8, 6), seed=11)
    m.fit_norm_stats(x)
    return m


def _desk_table(m=None, n=24):
    m = m or _fitted_model()
    x = random_db((n, 8, 6), seed=7)
    recs = [_Rec(f"s{i % 3}", f"p{i % 4}" if i % 5 else None) for i in range(n)]
    return build_attribute_table(m, recs, x), recs, x, m


# -- grid arithmetic -----------------------------------------------------------------


def test_snap_is_idempotent_and_bounded():
    z = Rng.from_seed(0, "t").normal((100,)) * 3.0
    s = snap(z)
    assert np.array_equal(snap(s), s)
    assert np.abs(s - z).max() <= 0.5 / GRID
    assert np.array_equal(s * GRID, np.round(s * GRID))


def test_fsum_mean_permutation_invariant():
    rows = Rng.from_seed(1, "t").normal((500, 3)) * np.array([1e-8, 1.0, 1e8])
    perm = Rng.from_seed(2, "t").permutation(500)
    assert np.array_equal(fsum_mean(rows), fsum_mean(rows[perm]))
    with pytest.raises(DataError):
        fsum_mean(np.zeros((0, 3)))
    with pytest.raises(DataError):
        fsum_mean(np.zeros(5))


def test_grid_sums_are_exact():
    # differences and chained sums of snapped values carry no rounding at all
    rng = Rng.from_seed(3, "t")
    a, b, c = (snap(rng.normal((50,)) * 5.0) for _ in range(3))
    assert np.array_equal((a - b) + (b - c), a - c)
    assert np.array_equal((a - b), -(b - a))


# -- attribute tables -----------------------------------------------------------------


def test_build_table_groups_and_counts():
    table, recs, x, m = _desk_table()
    assert table.attributes() == ["phone", "speaker"]
    assert table.values("speaker") == ["s0", "s1", "s2"]
    assert table.values("phone") == ["p0", "p1", "p2", "p3"]
    assert sum(table.get("speaker", v).count for v in table.values("speaker")) == 24
    # unlabeled segments are excluded from phone means only
    n_labeled = sum(1 for r in recs if r.phone is not None)
    assert sum(table.get("phone", v).count for v in table.values("phone")) == n_labeled


def test_table_entries_match_direct_estimate():
    table, recs, x, m = _desk_table()
    idx = [i for i, r in enumerate(recs) if r.speaker == "s1"]
    direct = estimate_attribute_repr(m, x[idx])
    assert np.array_equal(table.get("speaker", "s1").mean, direct)


def test_table_ignores_record_order():
    table, recs, x, m = _desk_table()
    perm = Rng.from_seed(5, "t").permutation(len(recs))
    shuffled = build_attribute_table(m, [recs[i] for i in perm], x[perm])
    for e in table.entries:
        assert np.array_equal(shuffled.get(e.attribute, e.value).mean, e.mean)


def test_table_sampled_mode_differs_but_is_seeded():
    table, recs, x, m = _desk_table()
    t5a = build_attribute_table(m, recs, x, j=5, seed=3)
    t5b = build_attribute_table(m, recs, x, j=5, seed=3)
    t5c = build_attribute_table(m, recs, x, j=5, seed=4)
    e = table.entries[0]
    assert np.array_equal(t5a.get(e.attribute, e.value).mean,
                          t5b.get(e.attribute, e.value).mean)
    assert not np.array_equal(t5a.get(e.attribute, e.value).mean,
                              t5c.get(e.attribute, e.value).mean)
    assert not np.array_equal(t5a.get(e.attribute, e.value).mean, e.mean)


def test_single_instance_value_is_exact_snap_of_posterior():
    m = _fitted_model()
    x = random_db((1, 8, 6), seed=9)
    recs = [_Rec("solo", "pp")]
    table = build_attribute_table(m, recs, x)
    mu, _ = m.encode_np(x)
    assert np.array_equal(table.get("speaker", "solo").mean, snap(mu[0].astype(np.float64)))


def test_table_errors():
    table, recs, x, m = _desk_table()
    with pytest.raises(DataError, match="known values"):
        table.get("speaker", "nope")
    with pytest.raises(DataError, match="length"):
        build_attribute_table(m, recs[:-1], x)
    with pytest.raises(DataError, match="no labeled"):
        build_attribute_table(m, [_Rec(None, None)], x[:1])
    with pytest.raises(DataError, match="duplicate"):
        e = table.entries[0]
        AttributeTable([e, e], 0, table.latent_dim)
    with pytest.raises(UsageError):
        estimate_attribute_repr(m, x, j=-1)


def test_table_json_round_trip(tmp_path):
    table, *_ = _desk_table()
    p = tmp_path / "table.json"
    table.save(p)
    back = AttributeTable.load(p)
    assert back.j_samples == table.j_samples
    assert back.latent_dim == table.latent_dim
    for e in table.entries:
        b = back.get(e.attribute, e.value)
        assert b.count == e.count
        assert np.array_equal(b.mean, e.mean)
    q = tmp_path / "again.json"
    back.save(q)
    assert q.read_bytes() == p.read_bytes()
    (tmp_path / "junk.json").write_text('{"format":"other"}')
    with pytest.raises(DataError, match="not an attribute table"):
        AttributeTable.load(tmp_path / "junk.json")


# -- shifts: the exactness contract ---------------------------------------------------


def test_shift_antisymmetry_exact_all_pairs():
    table, *_ = _desk_table()
    for attr in table.attributes():
        vals = table.values(attr)
        for a in vals:
            for b in vals:
                fwd = make_shift(table, attr, a, b).vector
                bwd = make_shift(table, attr, b, a).vector
                assert np.array_equal(fwd, -bwd)


def test_shift_path_additivity_exact():
    table, *_ = _desk_table()
    vals = table.values("phone")
    for a in vals:
        for b in vals:
            for c in vals:
                ab = make_shift(table, "phone", a, b).vector
                bc = make_shift(table, "phone", b, c).vector
                ac = make_shift(table, "phone", a, c).vector
                assert np.array_equal(ab + bc, ac)


def test_apply_then_undo_is_exact():
    table, recs, x, m = _desk_table()
    mu, _ = m.encode_np(x)
    z = snap(mu.astype(np.float64))
    sh = make_shift(table, "speaker", "s0", "s2")
    back = apply_shift(apply_shift(z, sh), sh.negated())
    assert np.array_equal(back, z)


def test_apply_shift_snaps_input_first():
    sh = LatentShift("speaker", "a", "b", snap(np.array([0.25, -1.5])))
    z = np.array([0.1000000003, 0.2])  # off-grid input
    out = apply_shift(z, sh)
    assert np.array_equal(out, snap(z) + sh.vector)
    with pytest.raises(DataError, match="dimension"):
        apply_shift(np.zeros(3), sh)


def test_shift_json_round_trip(tmp_path):
    table, *_ = _desk_table()
    sh = make_shift(table, "phone", "p0", "p3")
    p = tmp_path / "shift.json"
    sh.save(p)
    back = LatentShift.load(p)
    assert (back.attribute, back.source, back.target) == ("phone", "p0", "p3")
    assert np.array_equal(back.vector, sh.vector)
    back.save(tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == p.read_bytes()
    (tmp_path / "junk.json").write_text("{}")
    with pytest.raises(DataError, match="not a latent shift"):
        LatentShift.load(tmp_path / "junk.json")


def test_zero_shift_reconstruction_identity():
    table, recs, x, m = _desk_table()
    rec = reconstruct(m, x)
    mod = modify(m, x, zero_shift(m.cfg.latent_dim))
    assert np.array_equal(rec, mod)  # literally the same code path
    assert rec.shape == x.shape


def test_modify_changes_output_and_respects_floor():
    table, recs, x, m = _desk_table()
    sh = make_shift(table, "speaker", "s0", "s1")
    out = modify(m, x, sh)
    assert out.shape == x.shape
    assert not np.array_equal(out, reconstruct(m, x))
    assert out.min() >= -20.0
    # single segment in, single segment out
    single = modify(m, x[0], sh)
    assert single.shape == x[0].shape
    with pytest.raises(UsageError, match="mode"):
        modify(m, x, sh, mode="banana")


def test_modify_sample_mode_is_seeded():
    table, recs, x, m = _desk_table()
    sh = make_shift(table, "speaker", "s0", "s1")
    a = modify(m, x[:4], sh, mode="sample", seed=3)
    b = modify(m, x[:4], sh, mode="sample", seed=3)
    c = modify(m, x[:4], sh, mode="sample", seed=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, modify(m, x[:4], sh, mode="mean"))


def test_linearity_weighted_recombination():
    # mean over a union equals the count-weighted mean of group means up to
    # one grid snap per group plus one for the union
    m = _fitted_model()
    x = random_db((20, 8, 6), seed=13)
    ra = estimate_attribute_repr(m, x[:8])
    rb = estimate_attribute_repr(m, x[8:])
    rall = estimate_attribute_repr(m, x)
    weighted = (8 * ra + 12 * rb) / 20.0
    assert np.abs(rall - weighted).max() <= 2.0 / GRID


def test_decode_attribute_repr_and_feature_average():
    table, recs, x, m = _desk_table()
    seg = latent.decode_attribute_repr(m, table.get("speaker", "s0").mean)
    assert seg.shape == (8, 6)
    assert seg.min() >= -20.0
    avg = feature_space_average(x)
    assert avg.shape == (8, 6)
    assert np.allclose(avg, np.asarray(x, np.float64).mean(axis=0))
    with pytest.raises(DataError):
        feature_space_average(np.zeros((0, 8, 6)))


# -- prior-space diagnostics -----------------------------------------------------------


def test_log_prior_matches_formula():
    z = Rng.from_seed(0, "t").normal((5,))
    expect = -0.5 * (5 * math.log(2 * math.pi) + float(z @ z))
    assert log_prior(z) == pytest.approx(expect, abs=1e-12)
    assert log_prior(np.zeros(4)) == pytest.approx(-2 * math.log(2 * math.pi), abs=1e-12)


def test_interpolate_endpoints_and_validation():
    a = np.array([1.0, 2.0])
    b = np.array([-3.0, 0.5])
    assert np.array_equal(interpolate(a, b, 1.0), a)
    assert np.array_equal(interpolate(a, b, 0.0), b)
    assert np.array_equal(interpolate(a, b, 0.25), 0.25 * a + 0.75 * b)
    with pytest.raises(UsageError):
        interpolate(a, b, 1.5)
    with pytest.raises(DataError):
        interpolate(a, np.zeros(3), 0.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 1.0))
def test_interpolation_never_leaves_the_prior_hull(seed, alpha):
    r = Rng.from_seed(seed, "hyp")
    za, zb = r.normal((8,)) * 2.0, r.normal((8,)) * 2.0
    zi = interpolate(za, zb, alpha)
    assert log_prior(zi) >= min(log_prior(za), log_prior(zb)) - 1e-12


def test_sample_prior_shapes_and_determinism():
    m = _fitted_model()
    s = sample_prior(m, 3, seed=1)
    assert s.shape == (3, 8, 6)
    assert np.array_equal(s, sample_prior(m, 3, seed=1))
    assert not np.array_equal(s, sample_prior(m, 3, seed=2))
    with pytest.raises(UsageError):
        sample_prior(m, 0)


def test_cosine_matrix_properties():
    table, *_ = _desk_table()
    labels, c = cosine_matrix(table)
    assert len(labels) == len(table.entries)
    assert labels[0].count(":") == 1
    assert np.array_equal(c, c.T)  # shared accumulation order: exactly symmetric
    assert np.allclose(np.diag(c), 1.0, atol=1e-12)
    assert np.abs(c).max() <= 1.0 + 1e-12
    bad = AttributeTable([AttributeEntry("a", "z", 1, np.zeros(4))], 0, 4)
    with pytest.raises(DataError, match="zero-norm"):
        cosine_matrix(bad)


def test_offdiag_cov_profile_iid_vs_duplicated():
    rng = Rng.from_seed(0, "cov")
    n, d = 4000, 8
    z = rng.normal((n, d))
    prof = offdiag_cov_profile_z(z)
    assert prof.shape == (d,)
    # iid dimensions: each |off-diagonal| entry concentrates near sqrt(2/(pi n))
    expect = (d - 1) * math.sqrt(2.0 / (math.pi * (n - 1)))
    sd = math.sqrt((d - 1) * (1.0 - 2.0 / math.pi) / (n - 1))
    assert np.all(prof < expect + 6.0 * sd)
    # a duplicated dimension forces one covariance entry of ~1 in both rows
    zdup = z.copy()
    zdup[:, 3] = zdup[:, 5]
    pdup = offdiag_cov_profile_z(zdup)
    assert pdup[3] > 0.9 and pdup[5] > 0.9
    assert prof.max() < 0.5
    with pytest.raises(DataError):
        offdiag_cov_profile_z(z[:1])


def test_offdiag_cov_profile_model_wrapper():
    m = _fitted_model()
    x = random_db((16, 8, 6), seed=21)
    prof = offdiag_cov_profile(m, x)
    mu, _ = m.encode_np(x)
    assert np.array_equal(prof, offdiag_cov_profile_z(mu.astype(np.float64)))
