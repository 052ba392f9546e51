import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mashvco import readout as ro
from mashvco import vcomodel as vm

FS = 3.5e9
TS = 1 / FS


def free_run(n_periods, n_phi=32, f0=1.0e9, theta0=0.0123, points=64):
    c = vm.TuningCurve(f0, 0.0, (0.0, 1.0))
    t = np.linspace(0, n_periods * TS, n_periods * points + 1)
    st0 = vm.PhaseState(theta0, n_phi)
    new, waves = vm.advance_phase(st0, c, t, 0.5)
    return st0, new, waves


class TestQsd:
    def test_no_toggles(self):
        s = ro.QsdState.from_levels([0, 1, 0, 1])
        d, new, _ = ro.qsd_sample(s, [0, 1, 0, 1])
        assert not d.any() and list(new.prev_sampled) == [0, 1, 0, 1]

    def test_single_toggle(self):
        s = ro.QsdState.from_levels(np.zeros(8))
        lv = np.zeros(8, dtype=int)
        lv[3] = 1
        d, _, _ = ro.qsd_sample(s, lv)
        assert list(np.flatnonzero(d)) == [3]

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ro.qsd_sample(ro.QsdState.from_levels([0, 0]), [0, 0, 0])

    def test_free_running_edge_rate(self):
        n = 4000
        st0, _, waves = free_run(n)
        clocks = np.arange(1, n + 1) * TS
        state = ro.QsdState.from_levels(vm.levels_at(st0.count, 32))
        total = 0
        for k in range(n):
            lv = np.array([w.level_at(clocks[k]) for w in waves])
            d, state, _ = ro.qsd_sample(state, lv)
            total += int(d.sum())
        assert total / n == pytest.approx(2 * 32 * 1.0e9 / 3.5e9, abs=0.01)
        assert 2 * 32 / 3.5 == pytest.approx(18.29, abs=0.005)

    def test_metastability_delay_only_for_toggled_phases(self):
        m = ro.MetastabilityModel(tau=2e-12, enabled=True)
        s = ro.QsdState.from_levels([0, 0])
        d, _, delays = ro.qsd_sample(s, [1, 0], m, np.array([1e-13, 1e-13]), TS)
        assert delays[0] == pytest.approx(2e-12 * np.log(TS / 1e-13))
        assert delays[1] == 0.0


class TestMetastability:
    def test_log_law_and_cap(self):
        m = ro.MetastabilityModel(tau=2e-12, enabled=True)
        assert m.delay(TS / np.e, TS) == pytest.approx(2e-12)
        assert m.delay(TS, TS) == 0.0
        slow = ro.MetastabilityModel(tau=20e-12, enabled=True)
        assert slow.delay(1e-300, TS) == pytest.approx(TS / 2)

    def test_disabled(self):
        assert ro.MetastabilityModel().delay(1e-15, TS) == 0.0

    def test_window(self):
        m = ro.MetastabilityModel(tau=2e-12, enabled=True, window=10e-12)
        assert m.delay(20e-12, TS) == 0.0 and m.delay(5e-12, TS) > 0


class TestEstimateError:
    def test_toggle_on_clock_edge_gives_no_pulse(self):
        w = vm.EdgeWaveform([2 * TS], 0)
        zoh = ro.zoh_waveform(w, np.arange(1, 5) * TS)
        e, _ = ro.estimate_error(w, zoh)
        assert e.times.size == 0 or np.all(np.diff(e.times)[::2] == 0)

    def test_pulse_width_after_clock(self):
        dt = 0.3 * TS
        w = vm.EdgeWaveform([TS + dt], 0)
        zoh = ro.zoh_waveform(w, np.arange(1, 5) * TS)
        e, e_bar = ro.estimate_error(w, zoh)
        assert list(e.times) == pytest.approx([TS + dt, 2 * TS])
        assert e.times[1] - e.times[0] == pytest.approx(TS - dt)
        assert e_bar.initial_level == 1

    def test_skew_adds_area(self):
        # a 75 ps rising delay with 0 ps falling delay shrinks every pulse by 75 ps
        skew = 75e-12
        pw = ro.PulseWidthErrors((skew,), (0.0,))
        toggles = (np.arange(1, 40) + 0.2) * TS
        w = vm.EdgeWaveform(toggles, 0)
        zoh = ro.zoh_waveform(w, np.arange(1, 42) * TS)
        e0, _ = ro.estimate_error(w, zoh)
        e1, _ = ro.estimate_error(w, zoh, pw, 0)
        area = lambda e: float(np.sum(e.times[1::2] - e.times[0::2]))
        assert area(e0) - area(e1) == pytest.approx(skew * toggles.size, rel=1e-9)

    def test_short_pulses_vanish(self):
        pw = ro.PulseWidthErrors((0.5 * TS,), (0.0,))
        w = vm.EdgeWaveform([TS + 0.8 * TS], 0)
        zoh = ro.zoh_waveform(w, np.arange(1, 4) * TS)
        e, _ = ro.estimate_error(w, zoh, pw, 0)
        assert e.times.size == 0

    @given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=30))
    def test_complementarity(self, fracs):
        toggles = (np.arange(1, len(fracs) + 1) + np.array(fracs)) * TS
        w = vm.EdgeWaveform(toggles, 1)
        zoh = ro.zoh_waveform(w, np.arange(1, len(fracs) + 3) * TS)
        e, e_bar = ro.estimate_error(w, zoh)
        probe = np.linspace(0, (len(fracs) + 2) * TS, 997)
        assert np.all(e_bar.level_at(probe) == 1 - e.level_at(probe))

    @given(st.floats(0.0, 1.0))
    def test_pulse_area_is_time_to_next_clock(self, theta0):
        # every toggle in (lo, hi] contributes hi - t_toggle of E area
        n_phi, n = 8, 60
        _, _, waves = free_run(n, n_phi=n_phi, theta0=theta0)
        clocks = np.arange(1, n + 1) * TS
        E = ro.sum_error_bits([ro.estimate_error(w, ro.zoh_waveform(w, clocks))[0] for w in waves])
        toggles = np.concatenate([w.times for w in waves])
        for k in range(1, n - 1):
            lo, hi = clocks[k], clocks[k + 1]
            inside = toggles[(toggles > lo) & (toggles <= hi)]
            assert E.integral(lo, hi) == pytest.approx(float(np.sum(hi - inside)), abs=1e-21)


class TestSumErrorBits:
    def test_zero(self):
        E = ro.sum_error_bits([vm.EdgeWaveform([], 0) for _ in range(32)])
        assert E.value_at(1.0) == 0

    def test_all_high(self):
        E = ro.sum_error_bits([vm.EdgeWaveform([], 1) for _ in range(32)])
        assert E.value_at([0.0, 1.0]).tolist() == [32, 32]

    def test_empty(self):
        assert ro.sum_error_bits([]).value_at(0.0) == 0

    def test_steady_state_mean(self):
        n = 10000
        n_phi = 32
        _, _, waves = free_run(n, n_phi=n_phi, points=32)
        clocks = np.arange(1, n + 1) * TS
        e = [ro.estimate_error(w, ro.zoh_waveform(w, clocks))[0] for w in waves]
        E = ro.sum_error_bits(e)
        mean = E.integral(clocks[10], clocks[-1]) / (clocks[-1] - clocks[10])
        # each of the 2 f n_phi Ts toggles per period lasts Ts/2 on average
        assert mean == pytest.approx(n_phi * 1.0e9 / FS, abs=0.1)
        assert E.values.min() >= 0 and E.values.max() <= n_phi


class TestGradient:
    def test_zero(self):
        pw = ro.gradient_pw_errors(32, 0.0)
        assert pw.is_ideal and len(pw.tr) == 32

    def test_75ps(self):
        pw = ro.gradient_pw_errors(32, 75e-12)
        skew = np.subtract(pw.tr, pw.tf)
        assert skew[0] == 0 and skew[31] == pytest.approx(75e-12)
        assert np.allclose(np.diff(skew), 75e-12 / 31)

    def test_two_phases(self):
        pw = ro.gradient_pw_errors(2, 10e-12)
        assert np.subtract(pw.tr, pw.tf).tolist() == pytest.approx([0.0, 10e-12])

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            ro.gradient_pw_errors(4, -1e-12)

    def test_validate_range(self):
        with pytest.raises(ValueError):
            ro.PulseWidthErrors((TS,), (0.0,)).validate(TS)


class TestVectorizedRoute:
    """The simulator's whole-run pulse computation against the per-phase route."""

    @given(st.floats(0.0, 1.0), st.floats(0.0, 60e-12))
    def test_matches_per_phase(self, theta0, skew):
        n_phi, n = 8, 40
        c = vm.stage1_curve()
        t = np.linspace(0, n * TS, n * 64 + 1)
        x = 0.45 + 0.3 * np.sin(2 * np.pi * 80e6 * t)
        st0 = vm.PhaseState(theta0, n_phi)
        _, waves = vm.advance_phase(st0, c, t, x)
        pw = ro.gradient_pw_errors(n_phi, skew)
        clocks = np.arange(1, n + 1) * TS

        per_phase = []
        for i, w in enumerate(waves):
            e, _ = ro.estimate_error(w, ro.zoh_waveform(w, clocks), pw, i)
            per_phase.append(e)
        E_ref = ro.sum_error_bits(per_phase)

        cc = vm.integrate_count(t, c.frequency(x), st0.count, n_phi)
        times, values, cell = vm.crossings(t, cc, n_phi)
        k = np.ceil(times / TS - 1e-12)
        ps = ro.error_pulses(times, vm.phase_of(values, n_phi), k * TS, pw, None, TS, n_phi)
        ev_t = np.concatenate((ps.rise, ps.fall))
        ev_d = np.concatenate((np.ones(ps.rise.size), -np.ones(ps.fall.size)))
        order = np.argsort(ev_t, kind="stable")
        E_vec = ro.StepWaveform(ev_t[order], np.cumsum(ev_d[order]), 0.0)
        for j in range(n - 1):
            assert E_vec.integral(clocks[j], clocks[j + 1]) == pytest.approx(
                E_ref.integral(clocks[j], clocks[j + 1]), abs=1e-20)
