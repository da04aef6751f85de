import numpy as np
import pytest
from scipy import stats

from pccnn import data as dat
from pccnn import geometry as geo


def isotropic_spec(shape=(6, 6, 6), d=1.0e-3, noise=0.0, seed=0):
    region = dat.PhantomRegion(
        predicate=lambda u, v, w: np.ones_like(u, dtype=bool),
        populations=(
            dat.FiberPopulation(1.0, np.array([0.0, 0.0, 1.0]), axial_diffusivity=d, radial_diffusivity=d),
        ),
    )
    return dat.PhantomSpec(regions=(region,), shape=shape, s0=500.0, noise_sigma=noise, seed=seed)


def small_dataset(noise=0.0, seed=0, shape=(10, 10, 10), n_dirs=30, bvals=(1000.0,)):
    shells = [geo.make_shell(b, n_dirs, seed=i) for i, b in enumerate(bvals)]
    spec = dat.default_phantom_spec(shape=shape, noise_sigma=noise, seed=seed)
    return dat.generate_phantom(spec, shells)


class TestGeneratePhantom:
    def test_b0_is_s0(self):
        vols = small_dataset()
        assert np.allclose(vols.intensities[..., 0], 1000.0)

    def test_isotropic_analytic(self):
        shells = [geo.make_shell(2000.0, 12, seed=3)]
        vols = dat.generate_phantom(isotropic_spec(d=1.1e-3), shells)
        expect = 500.0 * np.exp(-2000.0 * 1.1e-3)
        assert np.allclose(vols.intensities[..., 1:], expect, rtol=1e-12)

    def test_single_fiber_matches_direct_formula(self):
        direction = np.array([1.0, 2.0, -1.0]) / np.sqrt(6.0)
        region = dat.PhantomRegion(
            predicate=lambda u, v, w: np.ones_like(u, dtype=bool),
            populations=(
                dat.FiberPopulation(1.0, direction, axial_diffusivity=1.7e-3, radial_diffusivity=0.2e-3),
            ),
        )
        spec = dat.PhantomSpec(regions=(region,), shape=(3, 3, 3), s0=800.0, seed=1)
        shell = geo.make_shell(3000.0, 90, seed=5)
        vols = dat.generate_phantom(spec, [shell])
        tensor = 0.2e-3 * np.eye(3) + (1.7e-3 - 0.2e-3) * np.outer(direction, direction)
        for i, d in enumerate(shell.directions):
            expect = 800.0 * np.exp(-3000.0 * d.unit @ tensor @ d.unit)
            got = vols.intensities[1, 1, 1, 1 + i]
            assert abs(got - expect) < 1e-12 * expect

    def test_degenerate_diffusivity_raises(self):
        region = dat.PhantomRegion(
            predicate=lambda u, v, w: np.ones_like(u, dtype=bool),
            populations=(
                dat.FiberPopulation(1.0, np.array([0.0, 0.0, 1.0]), axial_diffusivity=-1e-3, radial_diffusivity=1e-3),
            ),
        )
        spec = dat.PhantomSpec(regions=(region,), shape=(3, 3, 3))
        with pytest.raises(ValueError):
            dat.generate_phantom(spec, [geo.make_shell(1000.0, 6, seed=0)])

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            dat.PhantomRegion(
                predicate=lambda u, v, w: np.ones_like(u, dtype=bool),
                populations=(
                    dat.FiberPopulation(0.6, np.array([0.0, 0.0, 1.0]), 1e-3, 1e-3),
                ),
            )

    def test_noise_is_seeded(self):
        a = small_dataset(noise=0.02, seed=7)
        b = small_dataset(noise=0.02, seed=7)
        assert np.array_equal(a.intensities, b.intensities)

    def test_continuation_matches_acquired_directions(self):
        shell = geo.make_shell(1000.0, 10, seed=2)
        spec = dat.default_phantom_spec(shape=(6, 6, 6), seed=3)
        vols = dat.generate_phantom(spec, [shell])
        cont = dat.signal_at(spec, 1000.0, shell.units)
        assert np.allclose(vols.intensities[..., 1:], cont, rtol=1e-12)


class TestNormalize:
    def test_idempotent_when_percentile_is_one(self):
        vols = small_dataset()
        normed, rec = dat.normalize_99(vols)
        again, rec2 = dat.normalize_99(normed)
        assert abs(rec2.scale - 1.0) < 1e-9
        assert np.allclose(again.intensities, normed.intensities, rtol=1e-12)

    def test_constant_data(self):
        vols = small_dataset()
        vols.intensities[...] = 3.5
        normed, rec = dat.normalize_99(vols)
        assert rec.scale == pytest.approx(3.5)
        assert np.allclose(normed.intensities, 1.0)

    def test_all_zero_raises(self):
        vols = small_dataset()
        vols.intensities[...] = 0.0
        with pytest.raises(ValueError):
            dat.normalize_99(vols)

    def test_matches_sort_based_percentile(self):
        vols = small_dataset(noise=0.05, seed=9)
        _, rec = dat.normalize_99(vols)
        values = np.sort(np.abs(vols.intensities[vols.brain_mask]).ravel())
        h = (values.size - 1) * 0.99
        lo, hi = int(np.floor(h)), int(np.ceil(h))
        expect = values[lo] + (h - lo) * (values[hi] - values[lo])
        assert rec.scale == pytest.approx(expect, rel=1e-12)

    def test_masked_percentile_is_one_after(self):
        vols = small_dataset(noise=0.02, seed=4)
        normed, _ = dat.normalize_99(vols)
        pct = np.percentile(np.abs(normed.intensities[normed.brain_mask]), 99.0)
        assert abs(pct - 1.0) < 1e-6

    def test_round_trip(self):
        vols = small_dataset(noise=0.01, seed=5)
        normed, _ = dat.normalize_99(vols)
        back = dat.denormalize(normed)
        assert np.allclose(back.intensities, vols.intensities, rtol=1e-6)


class TestExtractPatches:
    def test_single_patch_centroid(self):
        vols = small_dataset(shape=(10, 10, 10))
        vols.brain_mask[...] = True
        patches = dat.extract_patches(vols, size=10, stride=10)
        assert len(patches) == 1
        assert patches[0].origin == (0, 0, 0)
        assert patches[0].centroid == (0.5, 0.5, 0.5)

    def test_eight_patches_on_20_cube(self):
        vols = small_dataset(shape=(20, 20, 20))
        vols.brain_mask[...] = True
        patches = dat.extract_patches(vols, size=10, stride=10)
        assert len(patches) == 8

    def test_every_patch_intersects_mask(self):
        vols = small_dataset(shape=(20, 20, 20))
        rng = np.random.default_rng(11)
        vols.brain_mask[...] = rng.random(vols.shape) < 0.05
        patches = dat.extract_patches(vols, size=10, stride=5)
        assert patches
        for p in patches:
            ou, ov, ow = p.origin
            assert vols.brain_mask[ou : ou + 10, ov : ov + 10, ow : ow + 10].any()
            assert all(0.0 <= c <= 1.0 for c in p.centroid)

    def test_too_small_volume_raises(self):
        vols = small_dataset(shape=(10, 10, 10))
        with pytest.raises(ValueError):
            dat.extract_patches(vols, size=12)


class TestSampleTrainingExample:
    def test_deterministic(self):
        vols = small_dataset(noise=0.02, seed=1)
        a = dat.sample_training_example(vols, seed=42)
        b = dat.sample_training_example(vols, seed=42)
        assert np.array_equal(a.x_in, b.x_in)
        assert np.array_equal(a.x_out, b.x_out)
        assert a.q_in == b.q_in and a.b_in == b.b_in and a.b_out == b.b_out

    def test_padding_slots_zero_and_flagged(self):
        vols = small_dataset()
        ex = dat.sample_training_example(vols, seed=3)
        assert ex.x_in.shape == (10, 10, 10, 20)
        assert ex.padding_mask.sum() == 20 - ex.q_in
        assert np.all(ex.x_in[..., ex.q_in :] == 0)
        assert not ex.padding_mask[: ex.q_in].any()

    def test_q_in_20_has_no_padding(self):
        vols = small_dataset()
        for seed in range(500):
            ex = dat.sample_training_example(vols, seed=seed)
            if ex.q_in == 20:
                assert not ex.padding_mask.any()
                break
        else:
            pytest.fail("no draw produced q_in = 20")

    def test_no_repeated_input_directions(self):
        vols = small_dataset()
        ex = dat.sample_training_example(vols, seed=8)
        units = np.array([p.dir.unit for p, pad in zip(ex.in_points, ex.padding_mask) if not pad])
        dots = units @ units.T
        np.fill_diagonal(dots, 0.0)
        assert np.all(dots < 1.0 - 1e-9)

    def test_same_shell_outputs_exclude_inputs(self):
        vols = small_dataset(bvals=(1000.0,))
        ex = dat.sample_training_example(vols, seed=5)
        in_units = np.array([p.dir.unit for p, pad in zip(ex.in_points, ex.padding_mask) if not pad])
        out_units = np.array([p.dir.unit for p in ex.out_points])
        cross = out_units @ in_units.T
        assert np.all(cross < 1.0 - 1e-9)

    def test_q_in_distribution_uniform(self):
        vols = small_dataset()
        patches = dat.extract_patches(vols)
        rng = np.random.default_rng(1234)
        counts = np.zeros(15, dtype=int)
        for _ in range(10_000):
            ex = dat.sample_training_example(vols, rng, patches=patches)
            counts[ex.q_in - 6] += 1
        _, p_value = stats.chisquare(counts)
        assert p_value > 0.01


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        vols, _ = dat.normalize_99(small_dataset(noise=0.02, seed=6, bvals=(1000.0, 2000.0)))
        dat.save_dataset(vols, tmp_path / "ds")
        loaded = dat.load_dataset(tmp_path / "ds")
        assert loaded.shape == vols.shape
        assert np.allclose(loaded.intensities, vols.intensities, atol=1e-6)
        assert np.array_equal(loaded.brain_mask, vols.brain_mask)
        assert loaded.norm.scale == pytest.approx(vols.norm.scale)
        assert [s.bval for s in loaded.shells()] == [1000.0, 2000.0]

    def test_save_load_save_identical_bytes(self, tmp_path):
        vols, _ = dat.normalize_99(small_dataset(seed=2))
        dat.save_dataset(vols, tmp_path / "a")
        dat.save_dataset(dat.load_dataset(tmp_path / "a"), tmp_path / "b")
        for name in ("header.json", "intensities.f32", "mask.u8", "bvecs.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
