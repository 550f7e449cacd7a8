import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cstar.errors import BudgetError
from cstar.rank_select import (LayerRanks, RankPlan, SingularSpectrum, budget_for, select,
                               select_global, select_global_normalized, select_uniform,
                               spectra_from_weights)
from cstar.tucker import param_count, project

from rank_oracle import brute_force_plan


def _spec(name, dims, s1, s2):
    return SingularSpectrum(name, dims, np.asarray(s1, float), np.asarray(s2, float))


def _random_spectra(rng, n_layers, max_dim=5):
    out = []
    for n in range(n_layers):
        o, i = (int(v) for v in rng.integers(1, max_dim + 1, size=2))
        k = int(rng.choice([1, 2]))
        s1 = np.sort(rng.exponential(1.0, min(o, i * k * k)))[::-1]
        s2 = np.sort(rng.exponential(1.0, min(i, o * k * k)))[::-1]
        out.append(_spec(f"l{n}", (o, i, k), s1, s2))
    return out


def _ranks(plan):
    return [(lr.r1, lr.r2) for lr in plan.layers]


def test_toy_two_layer_example():
    # Mode 2 has a single value, so only mode-1 ranks move. After the floor
    # the pool is 4 (layer a), 0.2 (layer b), 0.1 (layer a).
    a = _spec("a", (3, 20, 1), [5, 4, 0.1], [1.0])
    b = _spec("b", (2, 20, 1), [4.5, 0.2], [1.0])
    # dense 100; floor 24 + 23; steps cost 4 (a: 1->2), 3 (b: 1->2), 4 (a: 2->3)
    assert _ranks(select_global([a, b], 100 / 54, 1)) == [(2, 1), (2, 1)]
    # One parameter short: 0.2 misfits and admission stops before 0.1 is tried.
    plan = select_global([a, b], 100 / 53, 1)
    assert _ranks(plan) == [(2, 1), (1, 1)]
    assert plan.compressed_params == 51
    assert _ranks(select_global([a, b], 100 / 58, 1)) == [(3, 1), (2, 1)]


def test_matches_brute_force_on_random_instances(rng):
    checked = 0
    while checked < 60:
        spectra = _random_spectra(rng, int(rng.integers(2, 4)), max_dim=4)
        ratio = float(rng.uniform(1.0, 3.0))
        floor = int(rng.integers(1, 3))
        want = brute_force_plan([s.dims for s in spectra], [(s.sigma1, s.sigma2) for s in spectra],
                                ratio, floor)
        if want is None:
            with pytest.raises(BudgetError):
                select_global(spectra, ratio, floor)
            continue
        assert _ranks(select_global(spectra, ratio, floor)) == want
        checked += 1


def test_ties_prefer_earlier_layer():
    a = _spec("a", (2, 6, 1), [1, 1], [1.0])
    b = _spec("b", (2, 6, 1), [1, 1], [1.0])
    # dense 24, floor 18, one increment costs 3: the tie goes to the first layer
    assert _ranks(select_global([a, b], 24 / 21, 1)) == [(2, 1), (1, 1)]
    assert _ranks(select_global([b, a], 24 / 21, 1)) == [(2, 1), (1, 1)]


def test_ties_prefer_mode1_within_layer():
    s = _spec("a", (2, 2, 2), [1, 1], [1, 1])
    # dense 16, floor (1,1) costs 8; raising r1 or r2 each costs 6
    assert _ranks(select_global([s], 16 / 14, 1)) == [(2, 1)]


def test_budget_and_tightness(rng):
    for _ in range(30):
        spectra = _random_spectra(rng, 3, max_dim=8)
        ratio = float(rng.uniform(1.0, 4.0))
        try:
            plan = select_global(spectra, ratio, 1)
        except BudgetError:
            continue
        assert plan.compressed_params <= budget_for(plan.dense_params, ratio)
        assert plan.achieved_ratio >= ratio - 1e-12
        # Greedy stopped at the first misfit: the next pooled value does not fit.
        pool = sorted((-float(v), li, m, j) for li, s in enumerate(spectra)
                      for m, sig in enumerate((s.sigma1, s.sigma2))
                      for j, v in enumerate(sig[:min(s.dims[m], len(sig))])
                      if j >= (plan.layers[li].r1 if m == 0 else plan.layers[li].r2))
        if pool:
            _, li, m, _ = pool[0]
            r = [plan.layers[li].r1, plan.layers[li].r2]
            r[m] += 1
            extra = param_count(*spectra[li].dims, *r) - plan.layers[li].compressed_params
            assert plan.compressed_params + extra > plan.budget


def test_floor_and_dims_respected(rng):
    for _ in range(20):
        spectra = _random_spectra(rng, 3, max_dim=12)
        try:
            plan = select_global(spectra, 1.5, 2)
        except BudgetError:
            continue
        for lr, s in zip(plan.layers, spectra):
            hi1, hi2 = min(s.dims[0], len(s.sigma1)), min(s.dims[1], len(s.sigma2))
            assert min(2, hi1) <= lr.r1 <= hi1
            assert min(2, hi2) <= lr.r2 <= hi2


def test_infeasible_floor_reports_max_ratio():
    s = _spec("a", (16, 16, 3), np.ones(16), np.ones(16))
    floor_cost = param_count(16, 16, 3, 8, 8)
    with pytest.raises(BudgetError) as info:
        select_global([s], 100.0)
    assert f"{16 * 16 * 9 / floor_cost:.3f}" in str(info.value)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_scale_invariance(seed, c):
    spectra = _random_spectra(np.random.default_rng(seed), 3, max_dim=8)
    scaled = [_spec(s.name, s.dims, s.sigma1 * c, s.sigma2 * c) for s in spectra]
    try:
        base = select_global(spectra, 1.7, 1)
    except BudgetError:
        return
    assert _ranks(select_global(scaled, 1.7, 1)) == _ranks(base)


def test_monotone_in_ratio(rng):
    for _ in range(20):
        spectra = _random_spectra(rng, 3, max_dim=8)
        prev = None
        for ratio in (4.0, 3.0, 2.0, 1.5, 1.0):
            try:
                plan = select_global(spectra, ratio, 1)
            except BudgetError:
                continue
            if prev is not None:
                assert all(a >= c and b >= d for (a, b), (c, d) in zip(_ranks(plan), prev))
            prev = _ranks(plan)


def test_deterministic(rng):
    spectra = _random_spectra(rng, 3, max_dim=8)
    assert select_global(spectra, 1.3, 1) == select_global(spectra, 1.3, 1)


def test_self_consistency_on_truncated_weights(rng):
    ws = {"a": rng.standard_normal((12, 10, 3, 3)), "b": rng.standard_normal((16, 12, 3, 3))}
    plan = select_global(spectra_from_weights(ws), 3.0, 2)
    truncated = {n: project(w, plan.ranks()[n]) for n, w in ws.items()}
    again = select_global(spectra_from_weights(truncated), plan.achieved_ratio, 2)
    for lr, old in zip(again.layers, plan.layers):
        assert lr.r1 >= old.r1 and lr.r2 >= old.r2


def test_spectra_from_weights_matches_direct_svd(rng):
    w = rng.standard_normal((6, 4, 3, 3))
    (s,) = spectra_from_weights([w])
    np.testing.assert_allclose(s.sigma1, np.linalg.svd(w.reshape(6, -1), compute_uv=False), atol=1e-10)
    m2 = np.transpose(w.reshape(6, 4, 9), (1, 0, 2)).reshape(4, -1)
    np.testing.assert_allclose(s.sigma2, np.linalg.svd(m2, compute_uv=False), atol=1e-10)
    assert s.name == "layer0" and s.dims == (6, 4, 3)


def test_spectra_identity_kernel_and_zero_weight():
    w = np.zeros((4, 4, 3, 3))
    w[:, :, 1, 1] = 1.0  # every output sums every input at the center tap
    (s,) = spectra_from_weights({"c": w})
    assert s.sigma1[0] > 1 and np.all(s.sigma1[1:] < 1e-12)
    assert s.sigma2[0] > 1 and np.all(s.sigma2[1:] < 1e-12)
    (z,) = spectra_from_weights({"z": np.zeros((3, 2, 3, 3))})
    assert np.all(z.sigma1 == 0) and np.all(z.sigma2 == 0)


def test_uniform_example_64x64_at_4_5():
    s = _spec("f3", (64, 64, 3), np.ones(64), np.ones(64))
    plan = select_uniform([s], 4.5)
    budget = math.floor(36864 / 4.5)
    assert budget == 8192
    # Oracle: scan every equal-fraction pair (r2 = round(r1 * I / O)) for the largest that fits.
    best = max(r for r in range(1, 65) if param_count(64, 64, 3, r, r) <= budget)
    assert _ranks(plan) == [(best, best)] == [(23, 23)]


def test_uniform_ratio_one_and_floor():
    # Full Tucker-2 ranks cost more than the dense kernel, so ratio 1 stops short.
    s = _spec("a", (32, 16, 3), np.ones(32), np.ones(16))
    assert _ranks(select_uniform([s], 1.0)) == [(27, 14)]
    assert param_count(32, 16, 3, 27, 14) <= 4608 < param_count(32, 16, 3, 28, 14)
    big = _spec("b", (512, 512, 3), np.ones(512), np.ones(512))
    assert _ranks(select_uniform([big], 250.0)) == [(8, 8)]
    with pytest.raises(BudgetError):
        select_uniform([big], 400.0)


def test_uniform_respects_aspect_and_budget(rng):
    for _ in range(20):
        o, i = (int(v) for v in rng.integers(8, 80, size=2))
        s = _spec("x", (o, i, 3), np.ones(o), np.ones(i))
        ratio = float(rng.uniform(1.0, 6.0))
        try:
            (lr,) = select_uniform([s], ratio).layers
        except BudgetError:
            continue
        assert lr.compressed_params <= math.floor(o * i * 9 / ratio)
        if lr.r1 > 8 and lr.r2 > 8:
            assert lr.r2 == min(i, max(1, math.floor(lr.r1 * i / o + 0.5)))


def test_normalized_identical_spectra_equal_global():
    sig = [5.0, 3.0, 2.0, 1.0]
    spectra = [_spec(f"l{n}", (4, 4, 1), sig, sig) for n in range(3)]
    base = _ranks(select_global(spectra, 1.4, 1))
    assert _ranks(select_global_normalized(spectra, 1.4, 1, "minmax")) == base
    assert _ranks(select_global_normalized(spectra, 1.4, 1, "standard")) == base


def test_minmax_reorders_and_matches_oracle():
    # Layer a has large raw values; after min-max both layers span [0, 1].
    a = _spec("a", (4, 30, 1), [100, 90, 80, 70], [1.0])
    b = _spec("b", (4, 30, 1), [10, 9.9, 9.8, 1], [1.0])
    ratio = 240 / 85  # floor 70 plus three increments of 5
    assert _ranks(select_global([a, b], ratio, 1)) == [(4, 1), (1, 1)]
    mm = select_global_normalized([a, b], ratio, 1, "minmax")
    assert _ranks(mm) == [(2, 1), (3, 1)]
    norm = lambda v: (v - v.min()) / (v.max() - v.min()) if v.max() > v.min() else np.zeros_like(v)
    want = brute_force_plan([a.dims, b.dims], [(norm(a.sigma1), norm(a.sigma2)),
                                               (norm(b.sigma1), norm(b.sigma2))], ratio, 1)
    assert _ranks(mm) == want


def test_constant_spectrum_normalizes_to_zeros():
    a = _spec("a", (3, 20, 1), [2, 2, 2], [2, 2, 2])
    b = _spec("b", (3, 20, 1), [3, 1, 0], [3, 1, 0])
    for mode in ("minmax", "standard"):
        plan = select_global_normalized([a, b], 2.0, 1, mode)
        f = (lambda v: (v - v.min()) / (v.max() - v.min())) if mode == "minmax" else \
            (lambda v: (v - v.mean()) / v.std())
        scores = [(np.zeros(3), np.zeros(3)), (f(b.sigma1), f(b.sigma2))]
        assert _ranks(plan) == brute_force_plan([a.dims, b.dims], scores, 2.0, 1)


def test_select_dispatch_and_unknown_scheme():
    s = [_spec("a", (4, 4, 1), [4, 3, 2, 1], [4, 3, 2, 1])]
    for scheme in ("global", "uniform", "global-mm", "global-std"):
        assert select(scheme, s, 1.0, 1).scheme == scheme
    with pytest.raises(ValueError):
        select("bogus", s, 1.0)
    with pytest.raises(ValueError):
        select_global(s, 0.5)
    with pytest.raises(ValueError):
        select_global([], 2.0)


def test_plan_dict_roundtrip():
    plan = RankPlan((LayerRanks("a", (8, 4, 3), 3, 2), LayerRanks("b", (4, 8, 1), 2, 2)), 2.0)
    assert RankPlan.from_dict(plan.to_dict()) == plan
    assert plan.dense_params == 8 * 4 * 9 + 32
    assert plan.compressed_params == param_count(8, 4, 3, 3, 2) + param_count(4, 8, 1, 2, 2)
