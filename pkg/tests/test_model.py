import numpy as np
import pytest

from pccnn import autodiff as ad
from pccnn import geometry as geo
from pccnn.gradcheck import check_gradients
from pccnn.model import PCCNN, PCCNNConfig, build, param_count

TOY = PCCNNConfig(n_pointwise=2, n_blocks=2, c1=8, c3=8, hyper_width=16, fourier_bands=2, k_q=6)


def angular_points(n, seed=0, rho=1000.0):
    shell = geo.make_shell(rho, n, seed=seed)
    return [geo.QSpacePoint(0, 0, 0, rho, d) for d in shell.directions]


def padded_inputs(n_active, n_slots, seed=0):
    pts = angular_points(n_active, seed=seed)
    pad = [geo.QSpacePoint(0, 0, 0, 0.0, geo.PLACEHOLDER_DIRECTION)] * (n_slots - n_active)
    mask = np.array([False] * n_active + [True] * (n_slots - n_active))
    return pts + pad, mask


class TestBuild:
    def test_same_seed_bitwise_identical(self):
        m1, m2 = build(TOY, seed=3), build(TOY, seed=3)
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert p1.name == p2.name
            assert np.array_equal(p1.data, p2.data)

    def test_different_seed_differs(self):
        m1, m2 = build(TOY, seed=3), build(TOY, seed=4)
        assert any(not np.array_equal(a.data, b.data) for a, b in zip(m1.parameters(), m2.parameters()))

    def test_param_count_independent_of_seed(self):
        assert param_count(build(TOY, 0)) == param_count(build(TOY, 99))

    def test_param_count_closed_form(self):
        cfg = TOY
        width = 2 * cfg.fourier_bands * 5  # standard variant has 5 components
        wh = cfg.hyper_width

        def trunk():
            return width * wh + wh + wh * wh + wh

        def plain(c_in, c_out):
            return trunk() + (wh * c_in + c_in) + c_in * c_out

        def factorized(c_in, c_out):
            heads = 4 * (wh * c_in + c_in)
            w_outs = 3 * c_in * c_in + c_in * c_out
            return trunk() + heads + w_outs

        expected = plain(1, cfg.c1)
        expected += (cfg.n_pointwise - 1) * plain(cfg.c1, cfg.c1)
        c_in = cfg.c1
        for _ in range(cfg.n_blocks):
            expected += plain(c_in, cfg.c3) + factorized(c_in, cfg.c3)
            c_in = cfg.c3
        expected += plain(c_in, 1)
        assert param_count(build(cfg, 0)) == expected

    def test_init_bounds(self):
        model = build(TOY, seed=7)
        width = TOY.embedding.width
        wh = TOY.hyper_width
        for p in model.parameters():
            if p.name.endswith(("hyper.w1", "hyper.b1")):
                k_in = width
            elif ".hyper." in p.name:
                k_in = wh
            else:  # channel projections
                k_in = p.data.shape[0]
            bound = np.sqrt(1.0 / k_in)
            assert np.all(np.abs(p.data) < bound), p.name

    def test_hyper_width_monotonicity(self):
        import dataclasses

        bigger = dataclasses.replace(TOY, hyper_width=2 * TOY.hyper_width)
        assert param_count(build(bigger, 0)) > param_count(build(TOY, 0))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            PCCNNConfig(k_q=0)
        with pytest.raises(ValueError):
            PCCNNConfig(k_q=25)
        with pytest.raises(ValueError):
            PCCNNConfig(n_blocks=0)


class TestForward:
    def test_all_zero_patch_gives_zero_output(self):
        model = build(TOY, seed=1)
        in_pts, mask = padded_inputs(6, 10)
        out_pts = angular_points(4, seed=5)
        out = model.forward(np.zeros((3, 3, 3, 10)), in_pts, mask, out_pts)
        assert np.array_equal(out.data, np.zeros((27, 4)))

    def test_padding_transparency_bitwise(self):
        model = build(TOY, seed=2)
        rng = np.random.default_rng(0)
        vals = rng.standard_normal((3, 3, 3, 6)).astype(np.float32)
        out_pts = angular_points(5, seed=6)

        in_full, mask_full = padded_inputs(6, 20, seed=1)
        patch_full = np.concatenate([vals, np.zeros((3, 3, 3, 14), dtype=np.float32)], axis=3)
        in_bare, mask_bare = padded_inputs(6, 6, seed=1)

        a = model.forward(patch_full, in_full, mask_full, out_pts).data
        b = model.forward(vals, in_bare, mask_bare, out_pts).data
        assert np.array_equal(a, b)

    def test_nonzero_padding_rejected(self):
        model = build(TOY, seed=2)
        in_pts, mask = padded_inputs(6, 10)
        patch = np.ones((2, 2, 2, 10), dtype=np.float32)
        with pytest.raises(ValueError, match="padding"):
            model.forward(patch, in_pts, mask, angular_points(3))

    def test_forward_deterministic(self):
        model = build(TOY, seed=4)
        rng = np.random.default_rng(1)
        patch = rng.standard_normal((2, 2, 2, 6)).astype(np.float32)
        in_pts, mask = padded_inputs(6, 6)
        out_pts = angular_points(4, seed=2)
        a = model.forward(patch, in_pts, mask, out_pts).data
        b = model.forward(patch, in_pts, mask, out_pts).data
        assert np.array_equal(a, b)

    def test_centroid_ignored_by_standard_variant(self):
        model = build(TOY, seed=5)
        rng = np.random.default_rng(2)
        patch = rng.standard_normal((2, 2, 2, 6)).astype(np.float32)
        in_pts, mask = padded_inputs(6, 6)
        out_pts = angular_points(4, seed=2)
        a = model.forward(patch, in_pts, mask, out_pts, centroid=None).data
        b = model.forward(patch, in_pts, mask, out_pts, centroid=(0.2, 0.8, 0.5)).data
        assert np.array_equal(a, b)

    def test_sp_variant_requires_and_uses_centroid(self):
        import dataclasses

        cfg = dataclasses.replace(TOY, variant="sp")
        model = build(cfg, seed=5)
        rng = np.random.default_rng(3)
        patch = rng.standard_normal((2, 2, 2, 6)).astype(np.float32)
        in_pts, mask = padded_inputs(6, 6)
        out_pts = angular_points(4, seed=2)
        with pytest.raises(ValueError, match="centroid"):
            model.forward(patch, in_pts, mask, out_pts)
        a = model.forward(patch, in_pts, mask, out_pts, centroid=(0.2, 0.2, 0.2)).data
        b = model.forward(patch, in_pts, mask, out_pts, centroid=(0.8, 0.8, 0.8)).data
        # the centroid feeds every embedding, so outputs must differ
        assert not np.array_equal(a, b)


class TestEndToEndGradients:
    def test_tiny_model_gradcheck(self):
        cfg = PCCNNConfig(
            n_pointwise=1, n_blocks=1, c1=4, c3=4, hyper_width=6,
            fourier_bands=2, k_q=4, dtype="float64",
        )
        model = build(cfg, seed=11)
        rng = np.random.default_rng(12)
        patch = rng.standard_normal((2, 2, 2, 4))
        in_pts, mask = padded_inputs(4, 4, seed=3)
        out_pts = angular_points(3, seed=4)
        target = rng.standard_normal((8, 3)) * 2.0

        def loss():
            return ad.l1_loss(model.forward(patch, in_pts, mask, out_pts), target)

        report = check_gradients(loss, model.parameters(), step=1e-5, tol=1e-4)
        assert report.passed, f"worst: {report.worst}"
