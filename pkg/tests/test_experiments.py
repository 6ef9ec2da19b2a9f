import numpy as np
import pytest

from hcnaf.errors import FormatError
from hcnaf.experiments import (
    CondGaussianSpec,
    DensityGrid,
    DensityStub,
    GridGaussianSpec,
    bits_per_pixel,
    canonical_scene,
    condition_vector,
    dequantize_logit,
    density_grid,
    episodes_for_scenario,
    eval_nll,
    extra_nats,
    gaussian_entropy,
    gen_conditional_gaussian,
    gen_grid_gaussians,
    gen_toy_pom,
    grid_mixture_log_pdf,
    grid_to_csv,
    grid_to_pgm,
    h_eta,
    kl_estimate,
    label_mixture_log_prob,
    load_idx,
    logit_to_pixels,
    mc_entropy,
    pom_log_pdf,
    pom_mixture,
    save_idx,
    scenes_to_dataset,
)
from hcnaf.experiments import pom
from hcnaf.experiments.digits import logit_jacobian_log
from hcnaf.experiments.drivers import default_config, build_dataset, build_model, pom_model_kl
from hcnaf.experiments.gaussians import cond_gaussian_log_pdf, sample_grid_mixture
from hcnaf.experiments.metrics import Episode

LN_2PI = np.log(2 * np.pi)


class TestGridGaussians:
    def test_empty_draw(self):
        spec = GridGaussianSpec.lattice(2)
        assert len(gen_grid_gaussians(spec, 0, seed=0)) == 0

    def test_sample_mean_matches_mixture_mean(self):
        spec = GridGaussianSpec.lattice(5)
        n = 20000
        data = gen_grid_gaussians(spec, n, seed=1)
        total_std = np.sqrt(spec.means.var(axis=0) + spec.sigma**2)
        assert np.all(np.abs(data.x.mean(axis=0)) < 4 * total_std / np.sqrt(n))

    def test_condition_is_class_index(self):
        for k, idx in ((2, 0.0), (5, 1.0), (10, 2.0)):
            data = gen_grid_gaussians(GridGaussianSpec.lattice(k), 3, seed=0)
            assert np.all(data.cond == idx)

    def test_seeded_generator_is_pure(self):
        spec = GridGaussianSpec.lattice(2)
        a = gen_grid_gaussians(spec, 100, seed=9)
        b = gen_grid_gaussians(spec, 100, seed=9)
        assert np.array_equal(a.x, b.x)

    def test_mc_entropy_matches_separated_mode_formula(self):
        # for well-separated modes H = per-component entropy + log(k^2)
        spec = GridGaussianSpec.lattice(2)
        h, se = mc_entropy(spec, n=200_000, seed=2)
        expect = gaussian_entropy(spec.sigma) + np.log(4)
        assert h == pytest.approx(expect, abs=max(3 * se, 5e-3))

    def test_mixture_log_pdf_normalizes(self):
        spec = GridGaussianSpec.lattice(2)
        (x0, x1), (y0, y1) = spec.extent
        lin = np.linspace(x0, x1, 300)
        xx, yy = np.meshgrid(lin, lin)
        dens = np.exp(grid_mixture_log_pdf(spec, np.column_stack([xx.ravel(), yy.ravel()])))
        assert dens.sum() * (lin[1] - lin[0]) ** 2 == pytest.approx(1.0, abs=0.01)

    def test_distinct_means_required(self):
        with pytest.raises(ValueError):
            GridGaussianSpec(k=2, means=np.zeros((4, 2)), sigma=0.5, extent=((-1, 1), (-1, 1)))


class TestConditionalGaussian:
    def test_sample_covariance(self):
        spec = CondGaussianSpec()
        x = gen_conditional_gaussian(spec, np.zeros(2), 40000, seed=3)
        cov = np.cov(x.T)
        assert np.allclose(np.diag(cov), 0.25, rtol=0.05)
        assert abs(cov[0, 1]) < 0.05 * 0.25

    def test_entropy_reference_value(self):
        assert gaussian_entropy(0.5) == pytest.approx(1.4515827052894548, abs=1e-12)
        assert round(gaussian_entropy(0.5), 3) == 1.452

    def test_entropy_zero_case_and_scaling(self):
        assert gaussian_entropy(1.0 / np.sqrt(2 * np.pi * np.e)) == pytest.approx(0.0, abs=1e-12)
        assert gaussian_entropy(2 * 0.7) - gaussian_entropy(0.7) == pytest.approx(2 * np.log(2), abs=1e-12)

    def test_shift_equivariance_is_exact(self):
        spec = CondGaussianSpec()
        a = gen_conditional_gaussian(spec, np.zeros(2), 50, seed=4)
        b = gen_conditional_gaussian(spec, np.array([1.5, -0.5]), 50, seed=4)
        assert np.allclose(b - a, np.array([1.5, -0.5]), atol=1e-15)

    def test_unseen_disjoint_from_train(self):
        with pytest.raises(ValueError):
            CondGaussianSpec(c_unseen=np.array([[0.0, 0.0], [9.0, 9.0]]))


class TestMetrics:
    def test_kl_of_exact_stub_is_zero(self):
        spec = CondGaussianSpec()
        stub = DensityStub(lambda x, c: cond_gaussian_log_pdf(spec, c, x))
        r = kl_estimate(stub, spec, np.array([2.0, 0.0]), n=20000, seed=5)
        assert abs(r["kl"]) <= 3 * r["se"]

    def test_eval_nll_matches_entropy_for_exact_stub(self):
        spec = GridGaussianSpec.lattice(2)
        stub = DensityStub(lambda x, c: grid_mixture_log_pdf(spec, x))
        data = gen_grid_gaussians(spec, 20000, seed=6)
        r = eval_nll(stub, data)
        h, se_h = mc_entropy(spec, n=200_000, seed=7)
        assert r["nll"] == pytest.approx(h, abs=3 * (r["se"] + se_h))

    def test_h_eta_per_scalar_dimension(self):
        assert h_eta(1, 1, 1, sigma=0.01) == pytest.approx(0.5 * np.log(2 * np.pi * np.e * 1e-4), abs=1e-12)

    def test_extra_nats_zero_for_noise_centered_stub(self):
        rng = np.random.default_rng(8)
        positions = rng.normal(size=(4, 2))
        conds = [np.array([float(t)]) for t in range(4)]

        def log_pdf(x, c):
            mean = positions[int(c[0])]
            d = np.atleast_2d(x) - mean
            return -0.5 * np.sum(d * d, axis=1) / 1e-4 - LN_2PI - np.log(1e-4)

        stub = DensityStub(log_pdf)
        episodes = [Episode(conditions=conds, positions=positions.copy()) for _ in range(300)]
        r = extra_nats(stub, episodes, eta_sigma=0.01, seed=9)
        assert abs(r["extra_nats"]) <= 3 * r["se"]

    def test_extra_nats_nonnegative_for_true_mixture(self):
        stub = DensityStub(lambda x, c: pom_log_pdf(0, float(c[-1]) * 4.0, x))
        episodes = episodes_for_scenario(0, 200, seed=10)
        r = extra_nats(stub, episodes, seed=11)
        assert r["extra_nats"] >= -3 * r["se"]


class TestToyPom:
    def test_symmetric_scenario_balances_left_right(self):
        scenes = gen_toy_pom(4000, seed=12, scenario=0, dt=4.0)
        xs = np.array([s.target[0] for s in scenes])
        frac_left = np.mean(xs < 0)
        assert abs(frac_left - 0.5) < 4 * np.sqrt(0.25 / len(xs))

    def test_zero_horizon_collapses_to_current_position(self):
        scenes = gen_toy_pom(10, seed=13, scenario=1, dt=0.0)
        for s in scenes:
            assert np.allclose(s.target, [0.0, -pom.APPROACH_DIST], atol=1e-12)

    def test_mixture_normalizes(self):
        lin = np.linspace(-8, 8, 400)
        xx, yy = np.meshgrid(lin, lin)
        dens = np.exp(pom_log_pdf(1, 3.0, np.column_stack([xx.ravel(), yy.ravel()])))
        assert dens.sum() * (lin[1] - lin[0]) ** 2 == pytest.approx(1.0, abs=0.01)

    def test_mixture_modes_split_after_junction(self):
        weights, means, sigma = pom_mixture(0, 4.0)
        assert sorted(map(tuple, means.round(6))) == [(-2.0, 0.0), (2.0, 0.0)]
        assert np.allclose(weights, [0.5, 0.5])
        assert sigma == pytest.approx(0.6)

    def test_pre_junction_is_unimodal_in_effect(self):
        weights, means, _ = pom_mixture(2, 1.0)
        assert np.allclose(means, means[0])  # all branches still approaching

    def test_geometry_encodes_scenario(self):
        tee = canonical_scene(0, 2.0).grid
        left_heavy = canonical_scene(1, 2.0).grid
        right_heavy = canonical_scene(2, 2.0).grid
        # the T has no north arm
        assert tee[: pom.GRID_CELLS // 2 - 2, 14:18].sum() == 0
        assert left_heavy[: pom.GRID_CELLS // 2 - 2, 14:18].sum() > 0
        # biased scenarios widen their favored arm
        west = left_heavy[:, : pom.GRID_CELLS // 2].sum()
        east = left_heavy[:, pom.GRID_CELLS // 2 :].sum()
        assert west > east
        assert not np.array_equal(left_heavy, right_heavy)

    def test_condition_vector_shape_and_determinism(self):
        scene = canonical_scene(1, 3.0)
        v = condition_vector(scene)
        assert v.shape == (pom.COND_DIM,)
        assert np.array_equal(v, condition_vector(canonical_scene(1, 3.0)))

    def test_generator_is_pure(self):
        a = scenes_to_dataset(gen_toy_pom(50, seed=14))
        b = scenes_to_dataset(gen_toy_pom(50, seed=14))
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.cond, b.cond)

    def test_exact_stub_has_zero_kl(self):
        stub = DensityStub(lambda x, c: pom_log_pdf(1, float(c[-1]) * 4.0, x))
        kl = pom_model_kl(stub, 1, 3.0, n=20000, seed=15)
        assert abs(kl) < 0.02

    def test_episode_shapes(self):
        eps = episodes_for_scenario(2, 5, seed=16)
        assert len(eps) == 5
        assert eps[0].positions.shape == (4, 2)
        assert len(eps[0].conditions) == 4


class TestDensityGrid:
    def _normal_stub(self):
        return DensityStub(lambda x, c: -0.5 * np.sum(x * x, axis=1) - LN_2PI)

    def test_matches_closed_form_standard_normal(self):
        grid = density_grid(self._normal_stub(), np.zeros(1), (-3, 3, -3, 3), 10)
        xx, yy = np.meshgrid(grid.xs, grid.ys)
        expect = np.exp(-0.5 * (xx**2 + yy**2)) / (2 * np.pi)
        assert np.max(np.abs(grid.values - expect)) < 1e-6

    def test_quadrature_near_one(self):
        grid = density_grid(self._normal_stub(), np.zeros(1), (-6, 6, -6, 6), 200)
        assert grid.riemann_sum() == pytest.approx(1.0, abs=0.02)

    def test_csv_layout(self):
        grid = density_grid(self._normal_stub(), np.zeros(1), (-3, 3, -3, 3), 10)
        lines = grid_to_csv(grid).strip().split("\n")
        assert lines[0] == "x,y,density"
        assert len(lines) == 101
        x, y, d = map(float, lines[1].split(","))
        assert x == pytest.approx(-2.7) and y == pytest.approx(-2.7)

    def test_pgm_format_and_orientation(self):
        vals = np.zeros((4, 4))
        vals[3, 0] = 2.0  # largest y, smallest x
        grid = DensityGrid(bounds=(0, 1, 0, 1), resolution=4, values=vals)
        data = grid_to_pgm(grid)
        assert data.startswith(b"P5\n4 4\n255\n")
        img = np.frombuffer(data[len(b"P5\n4 4\n255\n"):], dtype=np.uint8).reshape(4, 4)
        assert img[0, 0] == 255  # row 0 is the top of the bounds
        assert img.sum() == 255

    def test_serialization_deterministic(self):
        grid = density_grid(self._normal_stub(), np.zeros(1), (-2, 2, -2, 2), 16)
        assert grid_to_pgm(grid) == grid_to_pgm(grid)
        assert grid_to_csv(grid) == grid_to_csv(grid)


class TestIdxFormat:
    def test_images_roundtrip(self, tmp_path):
        rng = np.random.default_rng(17)
        imgs = rng.integers(0, 256, size=(7, 5, 4), dtype=np.uint8)
        path = tmp_path / "imgs.idx"
        save_idx(path, imgs)
        assert np.array_equal(load_idx(path), imgs)

    def test_labels_roundtrip(self, tmp_path):
        labels = np.arange(10, dtype=np.uint8)
        path = tmp_path / "labels.idx"
        save_idx(path, labels)
        assert np.array_equal(load_idx(path), labels)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(b"\x00\x00\x09\x99" + b"\x00" * 8)
        with pytest.raises(FormatError):
            load_idx(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.idx"
        import struct

        path.write_bytes(struct.pack(">II", 0x00000801, 10) + b"\x01\x02")
        with pytest.raises(FormatError):
            load_idx(path)


class TestDequantization:
    def test_zero_pixel_zero_noise_boundary(self):
        lam = 1e-6
        x = dequantize_logit(np.array([0]), lam=lam, noise=np.array([0.0]))
        expect = np.log(lam) - np.log1p(-lam)
        assert np.isfinite(x[0])
        assert x[0] == pytest.approx(expect, abs=1e-12)

    def test_roundtrip_recovers_scaled_pixel(self):
        rng = np.random.default_rng(18)
        pixels = rng.integers(0, 256, size=(5, 12))
        noise = rng.random((5, 12))
        x = dequantize_logit(pixels, noise=noise)
        back = logit_to_pixels(x)
        assert np.max(np.abs(back - (pixels + noise))) < 1e-10

    def test_roundtrip_other_level_count(self):
        pixels = np.arange(17)
        noise = np.full(17, 0.5)
        x = dequantize_logit(pixels, noise=noise, levels=17)
        assert np.max(np.abs(logit_to_pixels(x, levels=17) - (pixels + 0.5))) < 1e-10

    def test_seeded_dequantization_is_pure(self):
        pixels = np.arange(10)
        assert np.array_equal(dequantize_logit(pixels, seed=3), dequantize_logit(pixels, seed=3))

    def test_bits_per_pixel_of_uniform_pixels_is_log2_levels(self):
        # under uniform pixel noise the pixel-space density is 1/levels per
        # unit, so the conversion must return exactly log2(levels)
        for levels in (17, 256):
            rng = np.random.default_rng(19)
            pixels = rng.integers(0, levels, size=(40, 6))
            x = dequantize_logit(pixels, seed=1, levels=levels)
            sig = 1.0 / (1.0 + np.exp(-x))
            ll_x = np.sum(np.log(sig) + np.log(1 - sig) - np.log(1 - 2e-6), axis=1)
            assert bits_per_pixel(ll_x, x, levels=levels) == pytest.approx(np.log2(levels), abs=1e-9)

    def test_jacobian_log_is_stable_at_extremes(self):
        out = logit_jacobian_log(np.array([-40.0, 0.0, 40.0]))
        assert np.all(np.isfinite(out))


class TestLabelMixture:
    def test_uniform_prior_mixture(self):
        class PerLabel:
            def log_prob_for_condition(self, x, c, chunk=None):
                return np.full(np.atleast_2d(x).shape[0], -float(c[0]))

        got = label_mixture_log_prob(PerLabel(), np.zeros((3, 2)), labels=(0, 1, 2), prior=1 / 3)
        from hcnaf.tensor_core import logsumexp as lse

        expect = lse(np.array([-0.0, -1.0, -2.0]) + np.log(1 / 3))
        assert np.allclose(got, expect)


class TestDrivers:
    def test_default_configs_complete(self):
        for exp in ("toy1", "toy2", "toypom", "digits"):
            cfg = default_config(exp)
            model = build_model(cfg)
            assert model.kind in ("hcnaf", "affine")

    def test_build_small_datasets(self):
        cfg = default_config("toy1")
        cfg["data.n_train"] = "30"
        data = build_dataset(cfg)
        assert len(data) == 90
        assert sorted(np.unique(data.cond)) == [0.0, 1.0, 2.0]

        cfg = default_config("toy2")
        cfg["data.n_train"] = "10"
        data = build_dataset(cfg)
        assert len(data) == 50

        cfg = default_config("toypom")
        cfg["data.n_train"] = "20"
        data = build_dataset(cfg)
        assert data.cond.shape == (20, pom.COND_DIM)
