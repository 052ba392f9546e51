import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mashvco import calibration as cal
from mashvco import experiments as ex
from mashvco import mash
from mashvco import signalcore as sc

FS_COUNTS = 64.0
RATE = 875e6


def dbfs(v, full_scale=FS_COUNTS):
    return 10 * np.log10(np.mean(np.square(v)) / (full_scale**2 / 2))


def distorted_tone(true: cal.NlModel, n=16384, amp=0.9):
    """Tone ``x`` passed through ``y = x + NL(y)`` so ``y - NL(y)`` is clean."""
    f = sc.coherent_bin_frequency(20e6, RATE, n)
    x = sc.generate_tone_sum([(amp * FS_COUNTS, f, 0.3)], RATE, n).samples
    y = x.copy()
    for _ in range(60):
        y = x + cal.eval_nl(true, sc.SampleStream(y, RATE, full_scale=FS_COUNTS)).samples
    return sc.SampleStream(y, RATE, full_scale=FS_COUNTS), f


def harmonics_of(stream, f, n_harmonics=9):
    return sc.decompose(stream, sc.sine_fit(stream, f), n_harmonics=n_harmonics)


TRUE = cal.NlModel(a=[0, 0, 0, 0.02], b=[0.03], c=[1.0, 0.05], scale=FS_COUNTS / 0.999)


class TestFitNl:
    def test_zero_distortion(self):
        s = sc.SampleStream(np.linspace(-1, 1, 256), RATE)
        m = cal.fit_nl(s, s.with_samples(np.zeros(256)), (5, 5, 2))
        assert not m.a.any() and not m.b.any() and not m.c.any()

    def test_synthetic_round_trip(self):
        y, f = distorted_tone(TRUE)
        parts = harmonics_of(y, f)
        assert dbfs(parts.dist.samples) > -60
        m = cal.fit_nl(parts.d_cl, parts.dist, (5, 5, 2))
        left = harmonics_of(cal.apply_model(y, m), f)
        assert dbfs(left.dist.samples) <= -90

    def test_derivative_term_lowers_residual(self):
        y, f = distorted_tone(TRUE)
        parts = harmonics_of(y, f)
        full = cal.fit_nl(parts.d_cl, parts.dist, (5, 5, 2))
        static = cal.fit_nl(parts.d_cl, parts.dist, (5, 0, 2))
        assert full.residual < static.residual

    def test_linear_case_single_solve(self):
        y, f = distorted_tone(cal.NlModel([0, 0, 0, 0.02], [0.03], [1.0], scale=FS_COUNTS / 0.999))
        parts = harmonics_of(y, f)
        m = cal.fit_nl(parts.d_cl, parts.dist, (5, 5, 1))
        assert m.iterations == 0

    def test_rank_deficient(self):
        s = sc.SampleStream(np.tile([0.0, 1.0], 64), RATE)
        with pytest.raises(cal.CalibrationError):
            cal.fit_nl(s, s.with_samples(np.tile([0.0, 0.1], 64)), (5, 5, 2))

    def test_length_mismatch(self):
        s = sc.SampleStream(np.ones(8), RATE)
        with pytest.raises(ValueError):
            cal.fit_nl(s, sc.SampleStream(np.ones(9), RATE))

    def test_non_convergence(self):
        y, f = distorted_tone(TRUE)
        parts = harmonics_of(y, f)
        with pytest.raises(cal.ConvergenceError):
            cal.fit_nl(parts.d_cl, parts.dist, (5, 5, 2), tol=0.0, max_iter=2)


class TestEvalNl:
    def test_zero_input(self):
        m = cal.NlModel([0, 1, 0.5], [0.2], [1.0, 0.1])
        out = cal.eval_nl(m, sc.SampleStream(np.zeros(16), RATE))
        assert not out.samples.any()

    def test_constant_input(self):
        m = cal.NlModel([0.1, 1, 0.5], [0.7, 0.2], [1.0, 0.1])
        out = cal.eval_nl(m, sc.SampleStream(np.full(16, 0.4), RATE)).samples
        inner = 0.1 + 0.4 + 0.5 * 0.16
        assert np.allclose(out, inner + 0.1 * inner**2)

    def test_ramp_with_derivative_only(self):
        m = cal.NlModel([0.0], [1.0], [1.0])
        out = cal.eval_nl(m, sc.SampleStream(np.arange(10) * 0.25, RATE)).samples
        assert out[0] == 0 and np.allclose(out[1:], 0.25)

    def test_too_short(self):
        with pytest.raises(ValueError):
            cal.eval_nl(cal.NlModel([0.0], [], [1.0]), sc.SampleStream(np.ones(1), RATE))


class TestLut:
    def test_identity_ramp(self):
        lut = cal.build_lut(cal.NlModel([0, 1], [], [1.0]))
        x = cal.lut_grid()
        assert lut.lut_a.size == 512
        assert np.max(np.abs(cal.from_fixed(lut.lut_a) - x)) <= 0.5 / cal.Q_ONE
        assert not lut.lut_b.any()

    def test_word_format(self):
        assert (cal.WORD_BITS, cal.LUT_SIZE) == (14, 512)
        assert cal.CODE_MIN == -8192 and cal.CODE_MAX == 8191

    def test_round_half_even(self):
        codes, sat = cal.to_fixed([0.5 / cal.Q_ONE, 1.5 / cal.Q_ONE, 2.0])
        assert codes.tolist() == [0, 2, cal.CODE_MAX] and sat == 1

    def test_overflow(self):
        with pytest.raises(cal.CalibrationError):
            cal.build_lut(cal.NlModel([0, 3.0], [], [1.0]))

    @given(st.integers(cal.CODE_MIN, cal.CODE_MIN + (cal.LUT_SIZE - 1) * 2**cal.INTERP_BITS))
    def test_interpolation_on_linear_table(self, code):
        lut = cal.CorrectionLUT(cal.to_fixed(cal.lut_grid() / 2)[0], np.zeros(512), [1.0], 0.0, 1.0)
        v, clamped = lut.lookup(lut.lut_a, [code])
        assert abs(int(v[0]) - code / 2) <= 1 and clamped == 0

    def test_codes_past_last_entry_clamp(self):
        lut = cal.CorrectionLUT(np.arange(512), np.zeros(512), [1.0], 0.0, 1.0)
        v, clamped = lut.lookup(lut.lut_a, [cal.CODE_MAX, cal.CODE_MIN])
        assert v.tolist() == [511, 0] and clamped == 1

    def test_weak_model_fills_code_range(self):
        lut = cal.build_lut(cal.NlModel([0, 1e-3], [], [1.0, 2.0]))
        assert np.max(np.abs(lut.lut_a)) > cal.Q_ONE / 2
        # c_k I^k is preserved: c_2 / c_1^2 does not depend on the scale
        assert lut.c[1] / lut.c[0] ** 2 == pytest.approx(2.0)

    def test_zero_luts_pass_decimated_input(self):
        d = sc.SampleStream(np.random.default_rng(0).standard_normal(4096), RATE, full_scale=8.0)
        lut = cal.CorrectionLUT(np.zeros(512), np.zeros(512), [1.0, 0.0], 0.0, 8.0 / 0.999)
        dec = cal.DecimationSpec.default(16, 4)
        plain = cal.decimate(d, 16, dec.pre + dec.post)
        out = cal.correct(d, lut, dec)
        assert np.allclose(out.samples, plain.samples, atol=1.0 / cal.Q_ONE * 8.0)

    def test_hex_round_trip(self, tmp_path):
        y, f = distorted_tone(TRUE)
        parts = harmonics_of(y, f)
        lut = cal.build_lut(cal.fit_nl(parts.d_cl, parts.dist))
        a, b = cal.write_lut_hex(lut, tmp_path / "corr")
        assert len(a.read_text().split()) == 512
        assert np.array_equal(cal.read_lut_hex(a), lut.lut_a)
        assert np.array_equal(cal.read_lut_hex(b), lut.lut_b)

    def test_hex_wrong_length(self, tmp_path):
        p = tmp_path / "x.hex"
        p.write_text("0000\n" * 3)
        with pytest.raises(cal.CalibrationError):
            cal.read_lut_hex(p)


class TestJson:
    def test_bit_exact(self, tmp_path):
        y, f = distorted_tone(TRUE)
        parts = harmonics_of(y, f)
        m = cal.fit_nl(parts.d_cl, parts.dist)
        lut = cal.build_lut(m)
        p = cal.save_model(m, tmp_path / "m.json", lut, {"osr": 16, "pre_factor": 4})
        m2, lut2 = cal.load_model(p)
        assert np.array_equal(m.a, m2.a) and np.array_equal(m.b, m2.b) and np.array_equal(m.c, m2.c)
        assert (m.offset, m.scale) == (m2.offset, m2.scale)
        assert np.array_equal(lut.lut_a, lut2.lut_a)
        assert cal.read_decimation(p) == {"osr": 16, "pre_factor": 4}

    def test_wrong_version(self, tmp_path):
        doc = {"model": {**cal.NlModel([0, 1], [], [1.0]).to_dict(), "version": 99}}
        p = tmp_path / "m.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(cal.CalibrationError):
            cal.load_model(p)


class TestDecimate:
    def test_constant(self):
        s = sc.SampleStream(np.full(1024, 0.7), RATE)
        out = cal.decimate(s, 4)
        assert np.allclose(out.samples, 0.7, atol=1e-12) and out.rate == RATE / 4

    def test_stopband(self):
        n = 8192
        f = 0.45 * RATE
        x = np.sin(2 * np.pi * f * np.arange(n) / RATE)
        out = cal.decimate(sc.SampleStream(x, RATE), 4, periodic=False)
        tail = out.samples[200:-200]
        assert 20 * np.log10(np.sqrt(2) * np.std(tail)) <= -80

    def test_passband(self):
        n = 8192
        f = sc.coherent_bin_frequency(RATE / 64, RATE, n)
        x = sc.generate_tone_sum([(1.0, f, 0.0)], RATE, n)
        out = cal.decimate(x, 4)
        assert 20 * np.log10(sc.sine_fit(out, f).amplitude) == pytest.approx(0.0, abs=0.01)

    def test_rejects_bad_factor(self):
        with pytest.raises(ValueError):
            cal.decimate(sc.SampleStream(np.ones(64), RATE), 3)

    def test_short_stream(self):
        with pytest.raises(ValueError):
            cal.decimate(sc.SampleStream(np.ones(8), RATE), 4)

    def test_linear_phase_filters(self):
        for taps in cal.DecimationSpec.default(16, 4).pre:
            h = np.asarray(taps)
            assert np.allclose(h, h[::-1])

    def test_plan(self):
        dec = cal.DecimationSpec.default(16, 4)
        assert (dec.pre_factor, dec.post_factor) == (4, 4)
        with pytest.raises(ValueError):
            cal.DecimationSpec.default(16, 32)


@pytest.fixture(scope="module")
def demo_capture():
    spec = ex.load_spec("cal_demo")
    cfg = ex.build_config(spec.config)
    return mash.simulate(cfg).d, cfg.stimulus[0].freq


def _sndr(s, f):
    return sc.metrics(sc.spectrum(s, len(s), 1, "rectangular"), f, 1, 9)


class TestPipeline:
    def test_lut_tracks_float_and_improves(self, demo_capture):
        d, f = demo_capture
        run = cal.calibrate(d, f)
        before = _sndr(cal.decimate(d, 16, run.dec.pre + run.dec.post), f).sndr_db
        flt = _sndr(cal.correct(d, run.model, run.dec), f)
        lut = _sndr(cal.correct(d, run.lut, run.dec), f)
        assert flt.sndr_db >= before - 0.1 and lut.sndr_db >= before - 0.1
        assert abs(lut.sndr_db - flt.sndr_db) <= 0.5
        assert flt.sndr_db >= flt.snr_db - 1

    def test_correcting_before_decimation_is_worse(self, demo_capture):
        d, f = demo_capture
        partial = cal.calibrate(d, f, pre_factor=4)
        full_rate = cal.calibrate(d, f, pre_factor=1)
        a = _sndr(cal.correct(d, partial.model, partial.dec), f).sndr_db
        b = _sndr(cal.correct(d, full_rate.model, full_rate.dec), f).sndr_db
        assert b < a

    def test_residual_harmonics(self, demo_capture):
        d, f = demo_capture
        run = cal.calibrate(d, f)
        out = cal.correct(d, run.lut, run.dec)
        m = _sndr(out, f)
        assert m.sfdr_db >= 80

    @pytest.mark.parametrize("n", [32768, 131072])
    def test_float_never_degrades_clean_capture(self, n, run_sim):
        cfg = mash.nominal_config("mash_cc", n_samples=n)
        d, f = run_sim(cfg).d, cfg.stimulus[0].freq
        run = cal.calibrate(d, f)
        before = _sndr(cal.decimate(d, 16, run.dec.pre + run.dec.post), f).sndr_db
        assert _sndr(cal.correct(d, run.model, run.dec), f).sndr_db >= before - 0.1

    def test_lut_never_degrades_clean_capture(self, run_sim):
        cfg = mash.nominal_config("mash_cc")
        d, f = run_sim(cfg).d, cfg.stimulus[0].freq
        run = cal.calibrate(d, f)
        before = _sndr(cal.decimate(d, 16, run.dec.pre + run.dec.post), f).sndr_db
        assert _sndr(cal.correct(d, run.lut, run.dec), f).sndr_db >= before - 0.1
