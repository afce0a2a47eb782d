"""Synthetic data generation and the dataset file format."""

import numpy as np
import pytest

from anchoradapt.domains import (Dataset, DatasetParseError,
                                 DatasetVersionError, DomainSpec, LabeledGrid,
                                 class_pixel_counts, default_prototypes,
                                 domain_shift_proxy, generate, load, make_rng,
                                 paired_rotation, save)


def _spec(C=4, D=4, noise=0.2, seed=7, **kw):
    return DomainSpec.identity(C, D, noise_sigma=noise, seed=seed, **kw)


# -- prototypes -----------------------------------------------------------------

def test_prototypes_live_on_the_sphere_and_stay_apart():
    for seed in range(5):
        P = default_prototypes(10, 8, seed=seed)
        assert P.shape == (10, 8)
        norms = np.linalg.norm(P, axis=1)
        assert np.allclose(norms, 3.0, rtol=0, atol=1e-5)
        d = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=2)
        np.fill_diagonal(d, np.inf)
        # greedy farthest-point keeps the worst pair well separated
        assert d.min() > 3.5


def test_prototypes_deterministic_and_seed_sensitive():
    assert np.array_equal(default_prototypes(6, 8, seed=3),
                          default_prototypes(6, 8, seed=3))
    assert not np.array_equal(default_prototypes(6, 8, seed=3),
                              default_prototypes(6, 8, seed=4))


def test_prototypes_are_float32_exact():
    P = default_prototypes(5, 6)
    assert np.array_equal(P, P.astype(np.float32).astype(np.float64))


def test_prototypes_reject_degenerate_requests():
    with pytest.raises(ValueError):
        default_prototypes(1, 8)
    with pytest.raises(ValueError):
        default_prototypes(4, 1)
    with pytest.raises(ValueError):
        default_prototypes(129, 8)


def test_paired_rotation_is_orthogonal():
    for D in (2, 4, 8, 5):
        R = paired_rotation(D, 37.0)
        assert np.allclose(R @ R.T, np.eye(D), rtol=0, atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    R = paired_rotation(2, 90.0)
    assert np.allclose(R @ np.array([1.0, 0.0]), [0.0, 1.0], atol=1e-12)


def test_odd_dimension_last_axis_is_fixed():
    R = paired_rotation(5, 45.0)
    assert R[4, 4] == 1.0
    assert np.allclose(R[4, :4], 0.0) and np.allclose(R[:4, 4], 0.0)


# -- specs ------------------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValueError):
        _spec(C=1)
    with pytest.raises(ValueError):
        _spec(D=1)
    with pytest.raises(ValueError):
        _spec(noise=-0.1)
    with pytest.raises(ValueError):
        DomainSpec.identity(3, 4, coherence_scale=0)
    with pytest.raises(ValueError):
        DomainSpec(C=3, D=4, prototypes=np.zeros((2, 4)),
                   transform_matrix=np.eye(4), transform_offset=np.zeros(4),
                   noise_sigma=0.0, coherence_scale=1, seed=0)


def test_shifted_shares_prototypes_and_changes_appearance_only():
    base = _spec()
    twin = base.shifted(transform_matrix=paired_rotation(4, 30.0),
                        transform_offset=np.full(4, 0.5),
                        noise_sigma=0.4, seed=99)
    assert np.array_equal(base.prototypes, twin.prototypes)
    assert twin.seed == 99 and twin.noise_sigma == 0.4
    assert np.array_equal(base.shifted().transform_matrix, base.transform_matrix)


def test_transformed_prototypes_applies_the_affine_map():
    spec = _spec().shifted(transform_matrix=2.0 * np.eye(4),
                           transform_offset=np.ones(4))
    assert np.allclose(spec.transformed_prototypes(),
                       2.0 * spec.prototypes + 1.0, rtol=0, atol=1e-12)


# -- generation ------------------------------------------------------------------

def test_generation_is_deterministic_per_grid():
    a = generate(_spec(), 5, 6, 6)
    b = generate(_spec(), 5, 6, 6)
    assert a == b
    # per-grid streams: a shorter draw is a prefix of a longer one
    short = generate(_spec(), 3, 6, 6)
    assert all(x == y for x, y in zip(short.grids, a.grids))
    other = generate(_spec(seed=8), 5, 6, 6)
    assert a != other


def test_zero_noise_features_equal_mapped_prototypes():
    spec = _spec(noise=0.0)
    ds = generate(spec, 2, 5, 5)
    protos32 = spec.transformed_prototypes().astype(np.float32)
    for g in ds.grids:
        assert np.array_equal(g.features, protos32[g.labels.astype(np.int64)])


def test_labels_form_coherence_blocks():
    spec = DomainSpec.identity(5, 4, coherence_scale=3, seed=2)
    ds = generate(spec, 3, 7, 8)
    for g in ds.grids:
        plane = g.labels.reshape(7, 8)
        for bi in range(0, 7, 3):
            for bj in range(0, 8, 3):
                block = plane[bi:bi + 3, bj:bj + 3]
                assert np.all(block == block[0, 0])


def test_labels_stay_in_range_and_counts_add_up():
    spec = _spec(C=6)
    ds = generate(spec, 4, 8, 8, role="target-train")
    counts = class_pixel_counts(ds)
    assert counts.sum() == 4 * 64
    for g in ds.grids:
        assert g.labels.max() < 6


def test_generate_rejects_bad_sizes():
    with pytest.raises(ValueError):
        generate(_spec(), 0, 4, 4)
    with pytest.raises(ValueError):
        generate(_spec(), 1, 0, 4)


def test_shift_proxy_grows_with_the_offset():
    base = _spec(noise=0.1, seed=3)
    ds0 = generate(base, 6, 8, 8)
    prox = []
    for off in (0.0, 0.5, 2.0):
        shifted = base.shifted(transform_offset=np.full(4, off), seed=4)
        prox.append(domain_shift_proxy(ds0, generate(shifted, 6, 8, 8)))
    assert prox[0] < prox[1] < prox[2]
    assert domain_shift_proxy(ds0, ds0) == 0.0


def test_shift_proxy_requires_shared_categories():
    a = generate(_spec(), 2, 4, 4)
    b = generate(_spec(C=5, seed=11), 2, 4, 4)
    with pytest.raises(ValueError):
        domain_shift_proxy(a, b)


# -- containers -------------------------------------------------------------------

def test_grid_validation():
    with pytest.raises(ValueError):
        LabeledGrid(2, 2, np.zeros((3, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        LabeledGrid(2, 2, np.zeros((4, 4), dtype=np.float32),
                    np.zeros(3, dtype=np.uint16))
    g = LabeledGrid(2, 3, np.zeros((6, 4), dtype=np.float32),
                    np.zeros(6, dtype=np.uint16))
    assert g.n_pixels == 6 and g.feature_dim == 4


def test_dataset_validation_and_views():
    ds = generate(_spec(), 3, 4, 4)
    assert ds.labeled and len(ds) == 3
    view = ds.unlabeled_view()
    assert not view.labeled
    assert all(v.labels is None for v in view.grids)
    assert np.array_equal(view.grids[0].features, ds.grids[0].features)
    with pytest.raises(ValueError):
        Dataset(ds.grids, "mystery", ds.C)
    with pytest.raises(ValueError):
        Dataset(ds.grids, "source", 2)  # labels exceed C
    tall = LabeledGrid(5, 4, np.zeros((20, 4), dtype=np.float32),
                       np.zeros(20, dtype=np.uint16))
    with pytest.raises(ValueError):
        Dataset(ds.grids + [tall], "source", ds.C)


def test_class_pixel_counts_needs_labels():
    ds = generate(_spec(), 2, 4, 4).unlabeled_view()
    with pytest.raises(ValueError):
        class_pixel_counts(ds)


# -- file format -------------------------------------------------------------------

def test_round_trip_is_bit_exact(tmp_path):
    ds = generate(_spec(C=5, noise=0.3), 4, 6, 5, role="target-eval")
    path = tmp_path / "x.grids"
    save(ds, path)
    back = load(path)
    assert back == ds
    assert back.role == "target-eval" and back.C == 5
    # rewriting produces identical bytes
    save(back, tmp_path / "y.grids")
    assert (tmp_path / "x.grids").read_bytes() == (tmp_path / "y.grids").read_bytes()


def test_save_refuses_empty_or_unlabeled(tmp_path):
    ds = generate(_spec(), 2, 4, 4)
    with pytest.raises(ValueError):
        save(ds.unlabeled_view(), tmp_path / "no.grids")
    with pytest.raises(ValueError):
        save(Dataset([], "source", 3), tmp_path / "no.grids")


def test_load_rejects_bad_magic_and_version(tmp_path):
    ds = generate(_spec(), 2, 4, 4)
    path = tmp_path / "x.grids"
    save(ds, path)
    raw = bytearray(path.read_bytes())
    bad = tmp_path / "bad.grids"

    bad.write_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(DatasetVersionError, match="magic"):
        load(bad)

    v = bytearray(raw)
    v[4] = 99
    bad.write_bytes(bytes(v))
    with pytest.raises(DatasetVersionError, match="version"):
        load(bad)

    r = bytearray(raw)
    r[6] = 77  # role code
    bad.write_bytes(bytes(r))
    with pytest.raises(DatasetParseError, match="role"):
        load(bad)


def test_load_reports_truncation_with_offsets(tmp_path):
    ds = generate(_spec(), 2, 4, 4)
    path = tmp_path / "x.grids"
    save(ds, path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.grids"
    for cut in (3, len(raw) // 2, len(raw) - 1):
        bad.write_bytes(raw[:cut])
        with pytest.raises(DatasetParseError, match="truncated"):
            load(bad)
    bad.write_bytes(raw + b"\x00")
    with pytest.raises(DatasetParseError, match="trailing"):
        load(bad)


def test_make_rng_streams_are_independent():
    assert make_rng(1, 2).normal() == make_rng(1, 2).normal()
    assert make_rng(1, 2).normal() != make_rng(1, 3).normal()
    assert make_rng(1, 2).normal() != make_rng(2, 2).normal()
