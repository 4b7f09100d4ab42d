import numpy as np
import pytest

from conftest import small_model
from slimtensor.grad import AdamConfig, ParamSet, adam_step, forward
from slimtensor.model import field_arrays
from slimtensor.renderer import mse_loss
from slimtensor.train import (
    GateLoss,
    LossHistory,
    RayData,
    TrainConfig,
    eval_gate_loss,
    load_config,
    occupied_bbox,
    resize_field,
    save_config,
    should_increment,
    train,
    update_masks,
)
from slimtensor.vm_grid import RankState, upsample


def quick(**kw) -> TrainConfig:
    base = dict(
        max_iter=30, batch_size=32, n_samples=16, rank=3, resolution_init=6, resolution_final=6,
        upsample_iters=(), shrink_iters=(), app_feature_dim=6, hidden=16,
    )
    return TrainConfig(**{**base, **kw})


class TestGate:
    def test_example_fires(self):
        assert should_increment(1.0, 0.5, 0.4, it=10, last_inc=0, eta=0)

    def test_below_threshold(self):
        assert not should_increment(1.0, 0.9, 0.4, it=10, last_inc=0, eta=0)

    def test_eta_gate(self):
        assert not should_increment(1.0, 0.5, 0.4, it=10, last_inc=5, eta=5)
        assert should_increment(1.0, 0.5, 0.4, it=11, last_inc=5, eta=5)

    def test_loss_increase_also_counts(self):
        assert should_increment(0.5, 1.0, 0.4, it=1, last_inc=0, eta=0)

    @pytest.mark.parametrize("cur", [0.0, -1.0])
    def test_nonpositive_loss(self, cur):
        with pytest.raises(ValueError):
            should_increment(1.0, cur, 0.4, 1, 0, 0)

    def test_slow_decay_never_fires_at_half(self):
        losses = 0.1 * np.exp(-np.arange(5000) / 400.0)
        fired = [should_increment(a, b, 0.5, i, 0, 0) for i, (a, b) in enumerate(zip(losses, losses[1:]), 1)]
        assert not any(fired)


class TestMasks:
    def test_update_masks(self):
        geo, app = update_masks(RankState(2, 4, 1e-4))
        np.testing.assert_array_equal(geo, [1, 1, 1e-4, 1e-4])
        np.testing.assert_array_equal(app, [1] * 6 + [1e-4] * 6)
        geo, app = update_masks(RankState(4, 4))
        assert np.all(geo == 1) and np.all(app == 1)


class TestGateLoss:
    def test_matches_mse_and_repeatable(self):
        m = small_model()
        rng = np.random.default_rng(0)
        o = np.tile([[0.0, 0.0, 3.0]], (10, 1))
        d = rng.normal(size=(10, 3)) * 0.1 + [0, 0, -1]
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        c = rng.random((10, 3))
        a = eval_gate_loss(m, o, d, c, 8)
        assert a == eval_gate_loss(m, o, d, c, 8)
        assert a == pytest.approx(mse_loss(forward(m, o, d, 8).color, c), rel=1e-14)

    def test_window_one_is_raw(self):
        g = GateLoss(1)
        assert [g.update(v) for v in (3.0, 1.0, 2.0)] == [3.0, 1.0, 2.0]

    def test_ema_smooths(self):
        g = GateLoss(3)
        g.update(1.0)
        assert g.update(0.0) == pytest.approx(0.5)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.max_iter, c.upsilon, c.eta, c.epsilon) == (5000, 0.4, 0, 1e-4)
        assert c.upsample_iters == (1000, 1500, 2000) and c.shrink_iters == (1200,)
        sched = c.upsample_schedule()
        assert list(sched) == [1000, 1500, 2000] and sched[2000] == 32
        assert list(sched.values()) == sorted(sched.values())

    def test_lr_decay(self):
        c = TrainConfig(max_iter=100, lr_decay=0.1)
        assert c.adam_at(1).lr_grid == c.lr_grid
        assert c.adam_at(51).lr_network == pytest.approx(c.lr_network * 0.1**0.5)
        assert c.adam_at(101).lr_grid == pytest.approx(c.lr_grid * 0.1)

    def test_mode_alias_and_validation(self):
        assert TrainConfig(mode="baseline").mode == "baseline_simultaneous"
        for bad in (dict(mode="bcd"), dict(upsilon=-1), dict(eta=-1), dict(max_iter=0), dict(lr_decay=0)):
            with pytest.raises(ValueError):
                TrainConfig(**bad)

    def test_file_roundtrip_and_overrides(self, tmp_path):
        cfg = quick(upsilon=0.25, upsample_iters=(10, 20))
        save_config(cfg, tmp_path / "c.cfg")
        assert load_config(tmp_path / "c.cfg") == cfg
        assert load_config(tmp_path / "c.cfg", seed=9, mode=None).seed == 9

    def test_sectionless_file(self, tmp_path):
        (tmp_path / "c.cfg").write_text("max_iter = 7\nmode = baseline\n")
        c = load_config(tmp_path / "c.cfg")
        assert c.max_iter == 7 and c.mode == "baseline_simultaneous"

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.cfg").write_text("[train]\nlearning_rate = 1\n")
        with pytest.raises(ValueError):
            load_config(tmp_path / "c.cfg")


class TestHistory:
    def test_csv_roundtrip(self, tmp_path):
        h = LossHistory()
        for it, (loss, r) in enumerate([(0.5, 1), (0.25, 2), (0.2, 2)], 1):
            h.record(it, loss, r)
        h.increments.append((2, 2))
        h.to_csv(tmp_path / "h.csv")
        assert (tmp_path / "h.csv").read_text().splitlines()[0] == "iteration,loss,r_d"
        back = LossHistory.from_csv(tmp_path / "h.csv")
        assert back == h


class TestTraining:
    def test_history_and_rank_invariants(self, tiny_dataset):
        res = train(quick(max_iter=40), tiny_dataset)
        h = res.history
        assert len(h) == 40 and h.iterations == list(range(1, 41))
        assert all(b >= a for a, b in zip(h.ranks, h.ranks[1:]))
        assert max(h.ranks) <= 3
        its = [it for it, _ in h.increments]
        assert its == sorted(set(its))
        assert [r for _, r in h.increments] == list(range(2, 2 + len(its)))

    def test_baseline_pinned_at_full_rank(self, tiny_dataset):
        res = train(quick(mode="baseline"), tiny_dataset)
        assert set(res.history.ranks) == {3} and not res.history.increments and not res.flagged

    def test_large_eta_increments_at_most_once(self, tiny_dataset):
        res = train(quick(eta=10_000, upsilon=0.0), tiny_dataset)
        assert len(res.history.increments) <= 1

    def test_infinite_upsilon_stays_rank_one_and_is_flagged(self, tiny_dataset):
        res = train(quick(upsilon=float("inf")), tiny_dataset)
        assert set(res.history.ranks) == {1}
        assert res.flagged

    def test_masked_parameters_still_move(self, tiny_dataset):
        cfg = quick(max_iter=100, upsilon=float("inf"))
        init = RayData.from_dataset(tiny_dataset)
        from slimtensor.model import RadianceModel

        model = RadianceModel.create(
            (6, 6, 6), init.bbox, 3, np.random.default_rng(0), app_feature_dim=6, hidden=16, r_d=1,
        )
        before = model.field.copy()
        train(cfg, init, model=model)
        # both factors of a masked product carry epsilon, so the steps are tiny but nonzero
        assert np.all(np.any(model.field.geo_vectors[0][:, 1:] != before.geo_vectors[0][:, 1:], axis=0))
        assert np.all(np.any(model.field.app_matrices[2][..., 3:] != before.app_matrices[2][..., 3:], axis=(0, 1)))

    def test_deterministic(self, tiny_dataset, tmp_path):
        cfg = quick(max_iter=25, upsample_iters=(10,), resolution_final=8, shrink_iters=(15,))
        a, b = train(cfg, tiny_dataset), train(cfg, tiny_dataset)
        a.history.to_csv(tmp_path / "a.csv")
        b.history.to_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert a.model.field.resolution == (8, 8, 8)

    def test_empty_dataset(self):
        z = np.zeros((0, 3))
        with pytest.raises(ValueError):
            train(quick(), RayData(z, z, z, np.array([[-1.0] * 3, [1.0] * 3])))

    def test_callback_sees_every_iteration(self, tiny_dataset):
        seen = []
        train(quick(max_iter=5), tiny_dataset, callback=lambda it, m, h: seen.append((it, len(h))))
        assert seen == [(i, i) for i in range(1, 6)]


class TestResize:
    def test_moments_follow_the_lattice(self):
        m = small_model(res=(4, 4, 4), rank=2)
        ps = ParamSet.from_model(m)
        for p in ps:
            p.grad[...] = 1.0
        adam_step(ps, AdamConfig())
        ps2 = resize_field(m, ps, lambda f: upsample(f, (7, 7, 7)))
        assert m.field.resolution == (7, 7, 7)
        for pid in field_arrays(m.field):
            assert ps2[pid].value.shape == ps2[pid].m.shape
            assert ps2[pid].step == 1
            np.testing.assert_allclose(ps2[pid].m, ps[pid].m.flat[0])  # constant moments stay constant
        assert ps2["geo_vec_x"].value is m.field.geo_vectors[0]
        assert ps2["dec_w1"] is ps["dec_w1"]

    def test_occupied_bbox(self):
        m = small_model(res=(8, 8, 8), rank=1, density_shift=-10.0)
        f = m.field
        for a in range(3):
            f.geo_vectors[a][...] = 0.0
            f.geo_matrices[a][...] = 0.0
        assert occupied_bbox(m) is None
        f.geo_vectors[0][3, 0] = 1.0  # density only on the x-node 3 slice
        f.geo_matrices[0][...] = 20.0
        box = occupied_bbox(m)
        voxel = 2.0 / 7
        np.testing.assert_allclose(box[:, 0], [-1 + 2 * voxel, -1 + 4 * voxel])
        np.testing.assert_allclose(box[:, 1:], [[-1, -1], [1, 1]])
