import numpy as np
import pytest
from hypothesis import given, strategies as st

from splatcache.policy import STORE_BOOSTED, STORE_RAW, PolicyConfig
from splatcache.toymedium import ToyMedium, default_toys, estimator_moments, evaluate, exact_levels, select_convention


def _mc_plain(toy, n, seed):
    """Direct simulation of the uncached estimator."""
    rng = np.random.default_rng(seed)
    out = np.empty(n)
    for i in range(n):
        if rng.random() >= toy.q0:
            out[i] = toy.b
            continue
        L, w = 0.0, 1.0
        for k in range(1, toy.max_depth + 1):
            w *= toy.sigma
            L += w * toy.e
            if rng.random() >= toy.q:
                L += w * toy.b
                break
        out[i] = L
    return out


class TestToyMedium:
    def test_plain_estimator_is_exact(self):
        for toy in default_toys():
            m, _ = estimator_moments(toy)
            assert m == pytest.approx(toy.exact(), rel=1e-12)

    def test_enumeration_matches_simulation(self):
        toy = ToyMedium(sigma=0.7, q=0.5)
        x = _mc_plain(toy, 40_000, 0)
        m, s = estimator_moments(toy)
        assert abs(x.mean() - m) < 4 * x.std() / np.sqrt(x.size)
        assert s - m * m == pytest.approx(x.var(), rel=0.05)

    @given(st.floats(0.1, 1.0), st.floats(0.05, 0.95), st.floats(0.05, 1.0))
    def test_exact_cache_unbiased_when_every_depth_has_a_level(self, sigma, q, C):
        toy = ToyMedium(sigma=sigma, q=q)
        pol = PolicyConfig(C=C, epsilon=1e-12, natural_substitution=False)
        levels = exact_levels(toy, toy.max_depth, pol, STORE_RAW)
        m, _ = estimator_moments(toy, levels, pol)
        assert m == pytest.approx(toy.exact(), rel=1e-9)

    def test_beta_division_needed(self):
        for C in (0.25, 0.5, 0.75):
            on = evaluate(default_toys(), C, STORE_RAW, True)
            off = evaluate(default_toys(), C, STORE_RAW, False)
            assert off.estimate_mean < off.reference_mean
            assert off.rmse > on.rmse

    def test_convention_selection(self):
        best, reports = select_convention()
        assert best == STORE_RAW
        assert {r.convention for r in reports} == {STORE_RAW, STORE_BOOSTED}

    def test_validation(self):
        with pytest.raises(ValueError):
            ToyMedium(sigma=1.5)
        with pytest.raises(ValueError):
            ToyMedium(max_depth=0)
