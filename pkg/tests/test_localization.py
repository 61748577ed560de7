import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nvstorm.camera import CameraConfig, DriftModel, FrameStack, expected_images, render_stack, simulate
from nvstorm.fitting import fit_batch
from nvstorm.localization import (
    FitError, Localization, Reject, SelectionCriteria, fit_psf, localization_uncertainty, localize_stack,
    read_localizations_csv, select_frames, write_localizations_csv,
)
from nvstorm.physics import EmitterModel, RateSet
from nvstorm.psf import gaussian_image

from oracles import eq_sigma, fwhm_from_sigma

CAM = CameraConfig(exposure_s=2.0)


class TestUncertainty:
    def test_shot_noise_limit(self):
        assert localization_uncertainty(400, 130.0, 1e-6, 0.0) == pytest.approx(130.0 / 20.0, rel=1e-12)

    def test_reference_point(self):
        s = localization_uncertainty(700, 130.0, 100.0, 2.2)
        assert s == pytest.approx(5.7, abs=0.05)
        assert fwhm_from_sigma(s) == pytest.approx(13.4, abs=0.1)

    def test_doubling_photons_without_background(self):
        a = localization_uncertainty(300, 130.0, 100.0, 0.0) ** 2
        b = localization_uncertainty(600, 130.0, 100.0, 0.0) ** 2
        assert a / b == pytest.approx(2.0, rel=1e-14)

    @settings(max_examples=200, deadline=None)
    @given(n=st.floats(1, 1e5), s=st.floats(10, 500), a=st.floats(1, 500), b=st.floats(0, 50))
    def test_matches_oracle(self, n, s, a, b):
        assert localization_uncertainty(n, s, a, b) == pytest.approx(eq_sigma(n, s, a, b), rel=1e-12)

    def test_vectorised(self):
        out = localization_uncertainty(np.array([100.0, 200.0]), 130.0, 100.0, 1.0)
        assert out.shape == (2,)

    @pytest.mark.parametrize("args", [(0, 130, 100, 1), (10, 0, 100, 1), (10, 130, 0, 1), (10, 130, 100, -1)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            localization_uncertainty(*args)


class TestFitPsf:
    def test_noiseless_recovery(self):
        x0, y0 = 1234.5, 1187.3
        frame = CAM.background_per_px + gaussian_image(CAM.shape, 100.0, x0, y0, 130.0, 600.0)
        for obj in ("mle", "lsq"):
            f = fit_psf(frame, CAM, objective=obj)
            assert abs(f.x_nm - x0) < 0.01 and abs(f.y_nm - y0) < 0.01
            assert f.sigma_psf_nm == pytest.approx(130.0, rel=1e-3)
            assert f.background == pytest.approx(1.6, rel=1e-3)

    def test_background_frame_fails(self, gen):
        frame = gen.poisson(1.6, CAM.shape)
        with pytest.raises(FitError):
            fit_psf(frame, CAM)

    def test_init_selects_window(self, gen):
        frame = gen.poisson(1.6 + gaussian_image(CAM.shape, 100.0, [600.0, 1800.0], [600.0, 1800.0], 130.0, 800.0))
        f = fit_psf(frame, CAM, init=(600.0, 600.0))
        assert math.hypot(f.x_nm - 600, f.y_nm - 600) < 30

    def test_monte_carlo_efficiency(self, gen):
        r = 11
        x0, y0 = 547.0, 512.0
        mu = 1.6 + gaussian_image((r, r), 100.0, x0, y0, 130.0, 600.0)
        data = gen.poisson(mu, (1000, r, r)).astype(float)
        zeros = np.zeros(1000)
        fit = fit_batch(data, zeros, zeros, 100.0, 130.0, objective="mle")
        assert fit.converged.all()
        err = np.concatenate([fit.x - x0, fit.y - y0])
        rmse = float(np.sqrt(np.mean(err**2)))
        pred = eq_sigma(600, 130, 100, 1.6)
        assert 0.8 <= rmse / pred <= 1.2
        # unbiased within three standard errors
        for e in (fit.x - x0, fit.y - y0):
            assert abs(e.mean()) < 3 * e.std() / math.sqrt(e.size)

    @settings(max_examples=25, deadline=None)
    @given(x=st.floats(950, 1450), y=st.floats(950, 1450), k=st.integers(-4, 4), m=st.integers(-4, 4),
           seed=st.integers(0, 2**16))
    def test_translation_equivariance(self, x, y, k, m, seed):
        frame = np.random.default_rng(seed).poisson(1.6 + gaussian_image(CAM.shape, 100.0, x, y, 130.0, 900.0))
        # the 11 px fit window stays inside the field before and after the shift
        moved = np.roll(frame, (m, k), axis=(0, 1))
        try:
            a = fit_psf(frame, CAM)
        except FitError:
            return
        b = fit_psf(moved, CAM)
        assert b.x_nm - a.x_nm == pytest.approx(100.0 * k, abs=5e-3)
        assert b.y_nm - a.y_nm == pytest.approx(100.0 * m, abs=5e-3)


def _three_emitter_stack(n_frames=6000, seed=2):
    cam = CameraConfig(exposure_s=1 / 9)
    ems = [EmitterModel(1050, 1100), EmitterModel(1300, 1120), EmitterModel(1180, 1330)]
    rates = [RateSet(1 / 9, 1.0, 3150.0)] * 3
    return cam, ems, simulate(cam, ems, rates, DriftModel("random_walk", 10.0, seed), n_frames, seed=seed)


class TestSelection:
    def test_all_background_rejected_empty(self):
        stack = render_stack(CAM, [], [], DriftModel("none"), 50, seed=0)
        res = localize_stack(stack)
        assert len(res) == 0
        assert set(res.rejected.values()) == {Reject.EMPTY}
        assert len(res.rejected) == 50
        assert res.summary()["empty"] == 50

    def test_single_and_double_emitter_frames(self):
        cam, ems, (stack, traces, photons, _) = _three_emitter_stack()
        res = localize_stack(stack)
        accepted = {l.frame_index for l in res}
        full = photons >= 350 * (1 - 1e-9)
        off = photons == 0
        single = np.flatnonzero((full.sum(axis=1) == 1) & (off.sum(axis=1) == 2))
        double = np.flatnonzero(full.sum(axis=1) >= 2)
        assert single.size > 100
        assert np.mean([f in accepted for f in single]) >= 0.90
        assert double.size > 5
        assert not any(f in accepted for f in double)
        assert all(res.rejected[f] in (Reject.MULTI_EMITTER, Reject.ASYMMETRIC) for f in double)

    def test_explicit_window(self):
        _, _, (stack, _, _, _) = _three_emitter_stack(n_frames=1000)
        sel = select_frames(stack, SelectionCriteria(min_photons=175, max_photons=525))
        assert sel.window == (175.0, 525.0)
        assert np.all((sel.totals[sel.candidates] >= 175) & (sel.totals[sel.candidates] <= 525))

    def test_criteria_validation(self):
        with pytest.raises(ValueError):
            SelectionCriteria(min_photons=10, max_photons=5)
        with pytest.raises(ValueError):
            SelectionCriteria(max_asymmetry=1.0)


class TestLocalizeStack:
    @pytest.fixture(scope="class")
    @staticmethod
    def result():
        _, _, (stack, _, _, _) = _three_emitter_stack(n_frames=20000, seed=1)
        return stack, localize_stack(stack)

    def test_count_and_precision(self, result):
        _, res = result
        assert len(res) >= 1000
        assert 4 <= np.median([l.sigma_loc_nm for l in res]) <= 15

    def test_eq_consistency(self, result):
        stack, res = result
        for l in res.localizations[:500]:
            want = eq_sigma(l.n_photons, l.sigma_psf_nm, stack.camera.pixel_size_nm, l.background)
            assert l.sigma_loc_nm == pytest.approx(want, rel=1e-6)
            assert l.sigma_loc_nm > 0 and l.n_photons > 0

    def test_ordered(self, result):
        _, res = result
        idx = [l.frame_index for l in res]
        assert idx == sorted(idx)
        assert res.n_frames == 20000
        assert not set(idx) & set(res.rejected)


def test_tags_pass_through():
    cam = CameraConfig(exposure_s=2.0)
    stack = render_stack(cam, [EmitterModel(1200, 1200)], [RateSet(2.0, 2.0, 300.0)], DriftModel("none"), 400,
                         mw_schedule=[2800.0, None, 2900.5, 2950.0], seed=3)
    res = localize_stack(stack)
    assert len(res) > 20
    for l in res:
        tag = stack.mw_tags_mhz[l.frame_index]
        assert (l.mw_tag_mhz is None) if np.isnan(tag) else (l.mw_tag_mhz == tag)


def test_csv_round_trip(tmp_path):
    locs = [Localization(3, 1.0 / 3, 2.5, 129.9, 612.25, 5.75, None, 1.6),
            Localization(9, 1e-17, -4.0, 131.0, 100.0, 13.0, 2871.125, 0.0)]
    p = tmp_path / "l.csv"
    write_localizations_csv(locs, p, comments=["seed 1"])
    text = p.read_text().splitlines()
    assert text[0] == "# seed 1"
    assert text[1].startswith("frame,x_nm,y_nm,sigma_psf_nm,n_photons,sigma_loc_nm,mw_tag_mhz")
    back = read_localizations_csv(p)
    assert [(l.frame_index, l.x_nm, l.y_nm, l.n_photons, l.sigma_loc_nm, l.mw_tag_mhz) for l in back] == \
        [(l.frame_index, l.x_nm, l.y_nm, l.n_photons, l.sigma_loc_nm, l.mw_tag_mhz) for l in locs]


def test_empty_stack_cannot_exist():
    with pytest.raises(ValueError):
        FrameStack(CAM, np.zeros((0, 24, 24)))


def test_expected_frame_dtype_accepted():
    img = expected_images(CAM, [EmitterModel(1200, 1200)], np.array([[600.0]]), np.zeros((1, 2)))[0]
    assert fit_psf(np.rint(img).astype(np.uint32), CAM).n_photons == pytest.approx(600, rel=0.05)
