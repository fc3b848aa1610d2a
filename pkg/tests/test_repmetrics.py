import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plab.models import STANDARD_DEPTHS, build_model
from plab.repmetrics import (
    METRICS,
    DegenerateInputError,
    DepthProfile,
    delta_cka,
    fit_locality_slope,
    linear_cka,
    load_matrix,
    normalize_profile,
    preprocess,
    procrustes_distance,
    profile_from_runs,
    rsa_distance,
    save_matrix,
)
from conftest import random_corpus, tiny_config

SQRT2 = math.sqrt(2.0)


def _orthogonal(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


seeds = st.integers(0, 2**31 - 1)


# ---------------------------------------------------------------- preprocess


def test_preprocess_centers_and_normalizes():
    x = np.random.default_rng(0).normal(3.0, 2.0, size=(9, 4))
    xt = preprocess(x)
    np.testing.assert_allclose(xt.sum(axis=0), 0.0, atol=1e-14)
    assert abs(np.linalg.norm(xt) - 1.0) < 1e-14


def test_preprocess_constant_rejected():
    with pytest.raises(DegenerateInputError):
        preprocess(np.full((5, 3), 2.5))
    with pytest.raises(DegenerateInputError):
        preprocess(np.ones((1, 3)))


# ---------------------------------------------------------------- Procrustes


def test_procrustes_identity_and_rotation():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20, 5))
    assert procrustes_distance(x, x) < 1e-10
    assert procrustes_distance(x, x @ _orthogonal(rng, 5)) < 1e-10


@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(3, 30), st.integers(1, 8))
def test_procrustes_rotation_invariance_and_bounds(seed, n, d):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    q = _orthogonal(rng, d)
    assert procrustes_distance(x, x @ q) <= 1e-10
    dist = procrustes_distance(x, y)
    assert 0.0 <= dist <= SQRT2 + 1e-9
    assert abs(dist - procrustes_distance(y, x)) <= 1e-10
    assert abs(dist - procrustes_distance(x, y @ q)) <= 1e-10


def test_procrustes_singular_value_identity():
    rng = np.random.default_rng(2)
    x, y = preprocess(rng.normal(size=(12, 4))), preprocess(rng.normal(size=(12, 4)))
    s = np.linalg.svd(y.T @ x, compute_uv=False)
    assert abs(procrustes_distance(x, y) ** 2 - (2 - 2 * s.sum())) < 1e-12


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_procrustes_matches_rotation_grid(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    xt, yt = preprocess(x), preprocess(y)
    theta = np.linspace(0.0, 2 * np.pi, 500_000, endpoint=False)
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    best = np.inf
    for flip in (1.0, -1.0):  # rotations, then reflections
        y2 = yt[:, 1] * flip
        a = yt[:, 0] * c + y2 * s  # first column of Y R(theta)
        b = -yt[:, 0] * s + y2 * c
        err = np.sum((xt[:, 0] - a) ** 2 + (xt[:, 1] - b) ** 2, axis=1)
        best = min(best, float(np.sqrt(err.min())))
    assert abs(procrustes_distance(x, y) - best) <= 1e-5


@pytest.mark.xfail(
    strict=True,
    reason="unattainable at n=512, D=16: the squared distance is 2 - 2*sum(sigma), and sum(sigma) ~ 0.85*sqrt(D/n) ~ 0.15, "
    "so the expected distance is ~1.306 (max over 40 seeds 1.315)",
)
def test_procrustes_above_1_35_at_n512_d16():
    rng = np.random.default_rng(3)
    assert procrustes_distance(rng.normal(size=(512, 16)), rng.normal(size=(512, 16))) > 1.35


def test_procrustes_saturates_toward_sqrt2_for_independent_gaussians():
    rng = np.random.default_rng(3)
    means = []
    for n in (512, 2048, 8192):
        means.append(np.mean([procrustes_distance(rng.normal(size=(n, 16)), rng.normal(size=(n, 16))) for _ in range(5)]))
    assert means[0] > 1.28 and means[1] > 1.35 and means[2] > 1.38
    assert means[0] < means[1] < means[2] < SQRT2


def test_procrustes_shape_mismatch():
    with pytest.raises(ValueError):
        procrustes_distance(np.ones((4, 2)), np.ones((4, 3)))


# ---------------------------------------------------------------- CKA


def _hsic(k, l):
    n = k.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    return np.trace(k @ h @ l @ h) / (n - 1) ** 2


@pytest.mark.parametrize("seed", range(5))
def test_cka_matches_hsic_ratio(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
    k, l = x @ x.T, y @ y.T
    want = _hsic(k, l) / math.sqrt(_hsic(k, k) * _hsic(l, l))
    assert abs(linear_cka(x, y) - want) <= 1e-10


def test_cka_self_is_one():
    x = np.random.default_rng(4).normal(size=(15, 6))
    assert abs(linear_cka(x, x) - 1.0) < 1e-12
    assert abs(delta_cka(x, x)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(3, 25), st.integers(1, 7), st.floats(0.01, 100.0), st.booleans())
def test_cka_invariances_and_bounds(seed, n, d, c, neg):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(n, d)), rng.normal(size=(n, d + 1))
    scale = -c if neg else c
    assert abs(linear_cka(x, scale * x @ _orthogonal(rng, d)) - 1.0) <= 1e-10
    v = linear_cka(x, y)
    assert 0.0 <= v <= 1.0 and 0.0 <= delta_cka(x, y) <= 1.0 + 1e-9


def test_cka_zero_variance():
    with pytest.raises(DegenerateInputError):
        linear_cka(np.ones((5, 2)), np.random.default_rng(0).normal(size=(5, 2)))


# ---------------------------------------------------------------- RSA


def test_rsa_identity_and_scaling():
    x = np.random.default_rng(5).normal(size=(8, 3))
    assert abs(rsa_distance(x, x)) < 1e-12
    assert abs(rsa_distance(x, 4.0 * x)) < 1e-12


def test_rsa_matches_direct_rdm():
    rng = np.random.default_rng(6)
    x, y = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))

    def rdm(m):
        return np.array([np.sqrt(np.sum((m[i] - m[j]) ** 2)) for i in range(8) for j in range(i + 1, 8)])

    def ranks(v):
        r = np.empty(len(v))
        r[np.argsort(v)] = np.arange(len(v))
        return r

    a, b = ranks(rdm(x)), ranks(rdm(y))
    rho = np.corrcoef(a, b)[0, 1]
    assert abs(rsa_distance(x, y) - (1 - rho)) < 1e-12


def test_rsa_needs_three_rows():
    with pytest.raises(DegenerateInputError):
        rsa_distance(np.eye(2), np.eye(2))


# ---------------------------------------------------------------- slopes and normalization


def test_slope_examples():
    d = STANDARD_DEPTHS
    assert abs(fit_locality_slope(d, [0.3] * 7).alpha) < 1e-15
    fit = fit_locality_slope(d, d)
    assert abs(fit.alpha - 1.0) < 1e-14 and abs(fit.beta) < 1e-14 and fit.rms < 1e-15
    fit = fit_locality_slope(DepthProfile(d, (0.066, 0.098, 0.113, 0.151, 0.205, 0.243, 0.330), "procrustes"))
    assert abs(fit.alpha - 0.265) <= 0.005


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_slope_satisfies_normal_equations(seed):
    rng = np.random.default_rng(seed)
    v = rng.uniform(0, 1.4, size=7)
    fit = fit_locality_slope(STANDARD_DEPTHS, v)
    a = np.column_stack([STANDARD_DEPTHS, np.ones(7)])
    want = np.linalg.solve(a.T @ a, a.T @ v)
    np.testing.assert_allclose([fit.alpha, fit.beta], want, atol=1e-12)


def test_slope_needs_distinct_depths():
    with pytest.raises(DegenerateInputError):
        fit_locality_slope([0.5, 0.5], [0.1, 0.2])


def test_depth_profile_validation():
    with pytest.raises(ValueError):
        DepthProfile((0.5, 0.4), (0.1, 0.2), "cka")
    with pytest.raises(ValueError):
        DepthProfile((0.5,), (0.1, 0.2), "cka")


def test_normalize_examples():
    assert all(abs(f - 1 / 7) < 1e-15 for f in normalize_profile([0.2] * 7).fractions)
    assert normalize_profile([0, 0, 0.3, 0, 0, 0, 0]).fractions[2] == 1.0
    n = normalize_profile([0.011, 0.030, 0.044, 0.087, 0.176, 0.239, 0.414])
    assert abs(n.final_concentration - 0.414) <= 0.01
    assert abs(sum(n.fractions) - 1.0) <= 1e-9
    with pytest.raises(DegenerateInputError):
        normalize_profile([0.0] * 7)
    with pytest.raises(ValueError):
        normalize_profile([0.1, -0.1])


# ---------------------------------------------------------------- profiles from models


@pytest.fixture(scope="module")
def eight_layer():
    cfg = tiny_config(n_layers=8)
    model = build_model(cfg, 0)
    seqs = random_corpus(24, seed=11)
    ids = np.full((24, cfg.max_seq), cfg.pad_id)
    mask = np.zeros_like(ids, dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return model, ids, mask


def test_unchanged_model_has_zero_profile(eight_layer):
    model, ids, mask = eight_layer
    prof = profile_from_runs(model, model.copy(), ids, mask)
    assert set(prof) == set(METRICS)
    for p in prof.values():
        assert max(abs(v) for v in p.values) < 1e-7


def test_targeted_perturbation_only_moves_later_depths(eight_layer):
    model, ids, mask = eight_layer
    after = model.copy()
    after["layers.5.mlp.w2"].data += np.random.default_rng(0).normal(0, 0.5, size=after["layers.5.mlp.w2"].shape)
    prof = profile_from_runs(model, after, ids, mask)
    for metric in ("procrustes", "cka"):
        for d, v in zip(prof[metric].depths, prof[metric].values):
            if d < 0.6:  # relative depths below 0.6 map to layers 1..3 on an 8-layer model
                assert abs(v) < 1e-7
            else:
                assert v > 1e-4


def test_profile_config_mismatch(eight_layer):
    model, ids, mask = eight_layer
    with pytest.raises(ValueError):
        profile_from_runs(model, build_model(tiny_config(n_layers=8, block_type="parallel", d_ff=48), 0), ids, mask)


def test_matrix_dump_roundtrip(tmp_path):
    m = np.random.default_rng(0).normal(size=(5, 3))
    path = save_matrix(tmp_path / "acts.bin", m, depth=0.4, run_id="abc")
    back, meta = load_matrix(path)
    assert back.tobytes() == m.tobytes()
    assert meta["n"] == 5 and meta["D"] == 3 and meta["depth"] == 0.4 and meta["run_id"] == "abc"
    assert path.stat().st_size == 5 * 3 * 8
