import numpy as np
import pytest

from minisal import distill, networks
from minisal.data import generate_synthetic_corpus, load_corpus
from minisal.distill import (ClipSample, ConfigurationError, DistillConfig,
                             infer_kind, loss_spatial, loss_spatiotemporal,
                             loss_temporal, make_samples, mean_nss, predict,
                             run_two_phase, split_clips, sweep_mu,
                             train_fusion, train_student)
from minisal.networks import LayerTable
from minisal.tensor import Tensor, mse_normalized

# small widths keep the training smoke tests quick
TINY = LayerTable(extractor=(4, 4, 4, 4, 4, 4, 4, 4), head=(4, 4, 4, 4, 1))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    generate_synthetic_corpus(root, 6, 4, 32, seed=0)
    return load_corpus(root)


@pytest.fixture(scope="module")
def samples(corpus):
    return make_samples(corpus)


def rand_maps(seed, shape=(2, 1, 8, 8)):
    rng = np.random.default_rng(seed)
    out = Tensor(rng.random(shape).astype(np.float32), requires_grad=True)
    teacher = Tensor(rng.random(shape).astype(np.float32))
    gt = Tensor(rng.random(shape).astype(np.float32))
    return out, teacher, gt


class TestConfig:
    def test_defaults(self):
        cfg = DistillConfig()
        assert cfg.mu == 0.5 and cfg.lr == 1e-3 and cfg.resolution == 32

    @pytest.mark.parametrize("bad", [-0.1, 1.5])
    def test_mu_out_of_range(self, bad):
        with pytest.raises(ConfigurationError):
            DistillConfig(mu=bad)

    def test_bad_resolution(self):
        with pytest.raises(ConfigurationError):
            DistillConfig(resolution=48)

    def test_bad_batch_and_epochs(self):
        with pytest.raises(ConfigurationError):
            DistillConfig(batch=0)
        with pytest.raises(ConfigurationError):
            DistillConfig(epochs=-1)


class TestLoss:
    def test_mu_zero_is_hard_only(self):
        out, teacher, gt = rand_maps(0)
        got = loss_spatial(out, teacher, gt, 0.0).item()
        assert got == pytest.approx(mse_normalized(out, gt).item(), abs=1e-9)

    def test_mu_one_is_soft_only(self):
        out, teacher, gt = rand_maps(1)
        got = loss_temporal(out, teacher, gt, 1.0).item()
        assert got == pytest.approx(mse_normalized(out, teacher).item(), abs=1e-9)

    def test_convex_combination_exact(self):
        out, teacher, gt = rand_maps(2)
        soft = mse_normalized(out, teacher).item()
        hard = mse_normalized(out, gt).item()
        got = loss_spatial(out, teacher, gt, 0.15).item()
        assert got == pytest.approx(0.15 * soft + 0.85 * hard, abs=1e-7)

    def test_affine_in_mu(self):
        out, teacher, gt = rand_maps(3)
        l0 = loss_spatial(out, teacher, gt, 0.0).item()
        l1 = loss_spatial(out, teacher, gt, 1.0).item()
        for mu in (0.25, 0.5, 0.75):
            got = loss_spatial(out, teacher, gt, mu).item()
            assert got == pytest.approx(mu * l1 + (1 - mu) * l0, abs=1e-7)

    def test_zero_iff_equal(self):
        t = Tensor(np.random.default_rng(4).random((1, 1, 6, 6)).astype(np.float32))
        same = Tensor(t.data.copy(), requires_grad=True)
        assert loss_spatial(same, t, t, 0.5).item() == 0.0
        assert loss_spatiotemporal(same, t).item() == 0.0
        off = Tensor(t.data + 0.1, requires_grad=True)
        assert loss_spatiotemporal(off, t).item() > 0.0

    def test_invalid_mu_raises(self):
        out, teacher, gt = rand_maps(5)
        with pytest.raises(ConfigurationError):
            loss_spatial(out, teacher, gt, 1.2)

    def test_gradient_matches_closed_form(self):
        # d/dp [mu*|p-t|^2/s + (1-mu)*|p-g|^2/s] = 2(mu(p-t)+(1-mu)(p-g))/s
        out, teacher, gt = rand_maps(6, shape=(3, 1, 5, 5))
        mu = 0.3
        loss = loss_spatial(out, teacher, gt, mu)
        loss.backward()
        scale = 1.0 / (5 * 5 * 3)
        want = 2.0 * scale * (mu * (out.data - teacher.data)
                              + (1 - mu) * (out.data - gt.data))
        np.testing.assert_allclose(out.grad, want, atol=1e-6)


class TestSampling:
    def test_make_samples_count(self, corpus, samples):
        assert len(samples) == sum(len(c.frames) - 1 for c in corpus)

    def test_sample_fields_align(self, corpus):
        clip = corpus[0]
        s = make_samples([clip])[0]
        np.testing.assert_array_equal(s.frame, clip.frames[0])
        np.testing.assert_array_equal(s.frame_next, clip.frames[1])
        np.testing.assert_array_equal(s.teacher_t, clip.teacher_t[0])

    def test_split_disjoint_and_seeded(self, corpus):
        a_train, a_val = split_clips(corpus, seed=3)
        b_train, b_val = split_clips(corpus, seed=3)
        assert len(a_train) + len(a_val) == len(corpus)
        assert len(a_val) >= 1
        assert [id(c) for c in a_train] == [id(c) for c in b_train]
        ids = {id(c) for c in a_train} | {id(c) for c in a_val}
        assert len(ids) == len(corpus)


class TestTrainStudent:
    def test_unknown_kind(self, samples):
        with pytest.raises(ConfigurationError):
            train_student("fusion", samples, DistillConfig())

    def test_empty_dataset(self):
        with pytest.raises(ConfigurationError):
            train_student("spatial", [], DistillConfig())

    def test_missing_teacher_raises(self, samples):
        broken = [ClipSample(s.frame, s.frame_next, s.density, s.teacher_s,
                             None, s.fixations) for s in samples[:4]]
        with pytest.raises(ConfigurationError, match="teacher_t"):
            train_student("temporal", broken, DistillConfig(epochs=1))

    def test_epochs_zero_returns_init(self, samples):
        cfg = DistillConfig(epochs=0, seed=5)
        weights, history = train_student("spatial", samples, cfg, widths=TINY)
        assert history == []
        init = networks.init_weights(networks.build_spatial_student(TINY), 5)
        for k in init:
            np.testing.assert_array_equal(weights[k].data, init[k].data)

    def test_lr_zero_leaves_weights_at_init(self, samples):
        cfg = DistillConfig(epochs=1, lr=0.0, seed=6)
        weights, _ = train_student("temporal", samples[:8], cfg, widths=TINY)
        init = networks.init_weights(networks.build_temporal_student(TINY), 6)
        for k in init:
            np.testing.assert_array_equal(weights[k].data, init[k].data)

    def test_seed_determinism_bit_identical(self, samples):
        cfg = DistillConfig(epochs=1, seed=7, batch=4)
        a, ha = train_student("spatial", samples[:8], cfg, widths=TINY)
        b, hb = train_student("spatial", samples[:8], cfg, widths=TINY)
        assert ha == hb
        for k in a:
            np.testing.assert_array_equal(a[k].data, b[k].data)

    def test_loss_decreases(self, samples):
        # per-epoch means are noisy at this scale; require the best epoch
        # after the first to improve on the starting loss
        cfg = DistillConfig(epochs=8, seed=8, batch=8, lr=1e-3)
        _, history = train_student("spatial", samples, cfg, widths=TINY)
        assert min(history[1:]) < history[0]


class TestTrainFusion:
    def test_requires_student_weights(self, samples):
        with pytest.raises(ConfigurationError):
            train_fusion(samples[:4], None, None, DistillConfig(epochs=1))

    def test_lr_zero_equals_student_init(self, samples):
        cfg = DistillConfig(epochs=1, lr=0.0, seed=9)
        sw, _ = train_student("spatial", samples[:4], DistillConfig(epochs=0, seed=9),
                              widths=TINY)
        tw, _ = train_student("temporal", samples[:4], DistillConfig(epochs=0, seed=9),
                              widths=TINY)
        fw, _ = train_fusion(samples[:4], sw, tw, cfg, widths=TINY)
        ref = networks.init_from_students(networks.build_spatiotemporal(TINY),
                                          sw, tw, seed=9)
        for k in ref:
            np.testing.assert_array_equal(fw[k].data, ref[k].data)

    def test_random_streams_ignores_students(self, samples):
        cfg = DistillConfig(epochs=0, seed=10)
        fw, _ = train_fusion(samples[:4], None, None, cfg, widths=TINY,
                             random_streams=True)
        ref = networks.init_weights(networks.build_spatiotemporal(TINY), 10)
        for k in ref:
            np.testing.assert_array_equal(fw[k].data, ref[k].data)


class TestPredictAndKind:
    def test_infer_kind_all_layouts(self):
        sw = networks.init_weights(networks.build_spatial_student(TINY), 0)
        tw = networks.init_weights(networks.build_temporal_student(TINY), 0)
        fw = networks.init_weights(networks.build_spatiotemporal(TINY), 0)
        assert infer_kind(sw) == "spatial"
        assert infer_kind(tw) == "temporal"
        assert infer_kind(fw) == "spatiotemporal"

    def test_predict_shapes(self, samples):
        fw = networks.init_weights(networks.build_spatiotemporal(TINY), 1)
        preds = predict(fw, samples[:5], widths=TINY, batch_size=2)
        assert preds.shape == (5, 32, 32)

    def test_predict_batching_invariant(self, samples):
        sw = networks.init_weights(networks.build_spatial_student(TINY), 2)
        a = predict(sw, samples[:5], widths=TINY, batch_size=2)
        b = predict(sw, samples[:5], widths=TINY, batch_size=5)
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_mean_nss_finite(self, samples):
        sw = networks.init_weights(networks.build_spatial_student(TINY), 3)
        assert np.isfinite(mean_nss(sw, samples[:5], widths=TINY))


class TestPipeline:
    def test_two_phase_histories(self, samples):
        cfg = DistillConfig(epochs=1, seed=11, batch=8)
        weights, hist = run_two_phase(samples[:8], cfg, widths=TINY)
        assert set(hist) == {"spatial", "temporal", "fusion"}
        assert infer_kind(weights) == "spatiotemporal"

    def test_two_phase_random_streams(self, samples):
        cfg = DistillConfig(epochs=1, seed=12, batch=8)
        weights, hist = run_two_phase(samples[:8], cfg, widths=TINY,
                                      random_streams=True)
        assert set(hist) == {"fusion"}
        assert infer_kind(weights) == "spatiotemporal"

    def test_sweep_rows_and_grid_validation(self, samples):
        cfg = DistillConfig(epochs=0, seed=13)
        rows = sweep_mu(samples[:6], samples[6:10], [0.0, 1.0], cfg,
                        repeats=2, widths=TINY)
        assert [r[0] for r in rows] == [0.0, 1.0]
        assert all(len(r) == 3 for r in rows)
        with pytest.raises(ConfigurationError):
            sweep_mu(samples[:6], samples[6:10], [0.5, 1.2], cfg, widths=TINY)
