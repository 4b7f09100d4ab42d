import numpy as np
import pytest

from conftest import small_model
from slimtensor.decoder import lipschitz_upper_bound
from slimtensor.grad import forward
from slimtensor.theory import BoundReport, check_lemma1, check_lemma2, random_rays, theorem1_terms


class TestBoundReport:
    def test_pass_fail_and_ratios(self):
        r = BoundReport("x", [0.5, 1.0], [1.0, 1.0])
        assert r.passed and r.margin_ratio == 1.0 and r.bound == 1.0
        r = BoundReport("x", [1.1, 0.2], [1.0, 1.0])
        assert not r.passed and r.violations == 1
        assert "FAIL" in r.summary()

    def test_zero_bound(self):
        assert BoundReport("x", [0.0], [0.0]).passed
        r = BoundReport("x", [1e-13], [0.0], abs_tol=1e-12)
        assert r.passed and r.margin_ratio == np.inf

    def test_csv(self, tmp_path):
        BoundReport("x", [0.5], [1.0]).to_csv(tmp_path / "r.csv")
        rows = (tmp_path / "r.csv").read_text().splitlines()
        assert rows[0] == "sample,observed,bound,ratio" and rows[1] == "0,0.5,1.0,0.5"


def test_random_rays_hit_box():
    box = np.array([[-1.0, -0.5, 0.0], [1.0, 0.5, 2.0]])
    o, d = random_rays(box, 50, np.random.default_rng(0))
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
    from slimtensor.renderer import ray_box_intersect

    assert ray_box_intersect(o, d, box)[2].all()


class TestLemma1:
    def test_random_model(self):
        rep = check_lemma1(small_model(res=(6, 6, 6), rank=3, r_d=2, hidden=32), n_samples=1000)
        assert rep.n_samples == 1000 and rep.passed
        assert 0 < rep.max_observed <= rep.bound

    def test_zero_output_layer(self):
        m = small_model()
        m.decoder.w2[...] = 0.0
        rep = check_lemma1(m, n_samples=50)
        assert rep.meta["K"] == 0.0 and rep.max_observed == 0.0 and rep.passed

    def test_bound_is_decoder_constant(self):
        m = small_model()
        assert check_lemma1(m, n_samples=10).bound == lipschitz_upper_bound(m.decoder)


class TestLemma2:
    def test_random_model(self):
        rep = check_lemma2(small_model(res=(6, 6, 6), rank=3, r_d=3, hidden=32), n_rays=200, n_elements=5)
        assert rep.n_samples == 1000 and rep.passed
        assert rep.max_observed > 0

    def test_exact_fit_has_zero_gradient(self):
        m = small_model(res=(5, 5, 5), rank=2)
        o, d = random_rays(m.field.bbox, 40, np.random.default_rng(3))
        c = forward(m, o, d, 32).color
        rep = check_lemma2(m, n_rays=40, rays=(o, d, c), n_samples=32)
        assert np.all(rep.meta["theta"] < 1e-25)
        assert rep.max_observed < 1e-8 and rep.passed

    def test_weight_sums_bounded(self):
        rep = check_lemma2(small_model(), n_rays=30, n_elements=2)
        w = rep.meta["weight_sums"]
        assert np.all((w >= 0) & (w <= 1 + 1e-12))


class TestTheorem1:
    def test_identical_pair_has_zero_distance(self):
        m = small_model(res=(5, 5, 5), rank=3, r_d=3)
        o, d = random_rays(m.field.bbox, 20, np.random.default_rng(0))
        c = np.random.default_rng(1).random((20, 3))
        rep = theorem1_terms(m, m.copy(), (o, d, c), n_samples=16)
        assert rep.ranks == [1, 2, 3]
        np.testing.assert_array_equal(rep.distance, 0.0)
        np.testing.assert_allclose(rep.bound, rep.eps_proxy)
        assert rep.observed == pytest.approx(rep.eps_proxy, rel=1e-12)

    def test_distance_grows_with_perturbation(self):
        ref = small_model(res=(5, 5, 5), rank=2, r_d=2)
        snap = ref.copy()
        snap.field.app_vectors[0][:, 1] += 0.5  # a component of rank 0
        o, d = random_rays(ref.field.bbox, 10, np.random.default_rng(0))
        rep = theorem1_terms(snap, ref, (o, d, np.full((10, 3), 0.5)), n_samples=8)
        assert rep.distance[0] > 0 and rep.distance[1] == 0
        assert rep.bound[0] > rep.bound[1]

    def test_reference_rank_check(self):
        with pytest.raises(ValueError):
            theorem1_terms(small_model(rank=3), small_model(rank=2), (np.zeros((1, 3)),) * 3)
