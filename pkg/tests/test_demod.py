"""Slot decoding, pattern alignment, and QBER accounting."""

import math

import numpy as np
import pytest

from photonclock.tagstream import TagStream, TagStreamError, Channel
from photonclock.simulator import (SourceConfig, make_sequence, sample_arrivals,
                                   encode_sequence, inject_dark_counts)
from photonclock.recovery import DemodEstimate, EstimateStatus
from photonclock.demod import (AlignmentError, demodulate, align_sequence,
                               compute_qber, qber_timeline)

from conftest import LINE_HZ


def grid_stream(src, qubits, slots, extra_ps=0.0):
    """Tags placed exactly on the source grid at given qubits and slots."""
    period = src.qubit_period_ps
    pos = np.asarray(src.pulse_positions_ps)
    t = np.round(np.asarray(qubits) * period + pos[np.asarray(slots)]
                 + extra_ps).astype(np.int64)
    order = np.argsort(t, kind="stable")
    ch = np.asarray(slots, dtype=np.uint8)[order]
    return TagStream(t[order], ch, int(t.max()) + 10_000)


class TestDemodulate:
    def test_perfect_decode(self, clean_stream, default_source):
        noisy, truth = clean_stream
        dec = demodulate(noisy, LINE_HZ, default_source)
        assert len(dec) == len(noisy)
        # white jitter keeps most tags inside the 200 ps sift window
        assert dec.accepted.mean() > 0.95
        z = dec.accepted_z
        match = dec.bit[z] == truth.bit[z]
        assert match.mean() > 0.999
        assert dec.qubit_period_ps == pytest.approx(default_source.qubit_period_ps)

    def test_sift_boundary(self, default_source):
        src = default_source
        qubits = np.arange(10, 1000, 7)
        s0 = grid_stream(src, qubits, np.zeros(qubits.size, dtype=int),
                         extra_ps=99.0)
        dec = demodulate(s0, src.pulse_line_hz, src, sift_window_ps=200.0,
                         phase_offset=0.0)
        assert dec.accepted.all()
        assert np.all(dec.bit == 0)
        s1 = grid_stream(src, qubits, np.zeros(qubits.size, dtype=int),
                         extra_ps=102.0)
        dec = demodulate(s1, src.pulse_line_hz, src, sift_window_ps=200.0,
                         phase_offset=0.0)
        assert not dec.accepted.any()

    def test_qubit_index_straddles_boundary(self, default_source):
        # slot 0 sits at the period edge; jitter in either direction must
        # not move the tag into a neighbouring qubit
        src = default_source
        qubits = np.arange(5, 500, 5)
        for extra in (-80.0, 80.0):
            s = grid_stream(src, qubits, np.zeros(qubits.size, dtype=int),
                            extra_ps=extra)
            dec = demodulate(s, src.pulse_line_hz, src, phase_offset=0.0)
            assert np.array_equal(dec.qubit_index, qubits)

    def test_shift_invariance_via_auto_phase(self, clean_stream, default_source):
        noisy, _ = clean_stream
        ref = demodulate(noisy, LINE_HZ, default_source)
        moved = demodulate(noisy.shifted(137), LINE_HZ, default_source)
        assert abs(moved.phase_offset_ps - ref.phase_offset_ps - 137.0) < 10.0
        n = min(len(ref), len(moved))
        both = ref.accepted[:n] & moved.accepted[:n]
        assert np.array_equal(ref.bit[:n][both], moved.bit[:n][both])

    def test_detuned_clock_scrambles_late_windows(self, clean_stream,
                                                  default_source):
        noisy, truth = clean_stream
        dec = demodulate(noisy, LINE_HZ + 100.0, default_source)
        al = align_sequence(
            demodulate(noisy, LINE_HZ, default_source), truth.sequence)
        # 100 Hz walks a slot every ~4 ms; across 1 s the decode is noise
        _, qber, sifted = qber_timeline(dec, truth.sequence, al.offset,
                                        100_000_000_000)
        late = qber[-3:]
        assert np.all(np.isnan(late) | (late > 0.25))

    def test_window_param(self, clean_stream, default_source):
        noisy, _ = clean_stream
        lo, hi = 100_000_000_000, 200_000_000_000
        dec = demodulate(noisy, LINE_HZ, default_source, window=(lo, hi))
        assert np.all((dec.t_ps >= lo) & (dec.t_ps < hi))
        i, j = noisy.window_indices(lo, hi)
        assert len(dec) == j - i

    def test_rejects_failed_estimate(self, clean_stream, default_source):
        noisy, _ = clean_stream
        bad = DemodEstimate(0.0, 0.0, (0, 1), 0.0, EstimateStatus.FAILED, "x")
        with pytest.raises(TagStreamError):
            demodulate(noisy, bad, default_source)

    def test_accepts_estimate_object(self, clean_stream, default_source):
        noisy, truth = clean_stream
        est = DemodEstimate(LINE_HZ, 0.0, (0, 10**9), -1.0,
                            EstimateStatus.OPTIMIZED)
        dec = demodulate(noisy, est, default_source)
        assert dec.frequency_hz == LINE_HZ

    def test_basis_split(self, clean_stream, default_source):
        noisy, truth = clean_stream
        dec = demodulate(noisy, LINE_HZ, default_source)
        x_mask = noisy.channel == int(Channel.X)
        assert np.array_equal(dec.basis == 1, x_mask)
        assert not (dec.accepted_z & dec.accepted_x).any()


class TestAlignSequence:
    @pytest.mark.parametrize("shift", [0, 1, 17, 1234, 4095])
    def test_finds_known_shift(self, clean_stream, default_source, shift):
        noisy, truth = clean_stream
        dec = demodulate(noisy, LINE_HZ, default_source,
                         window=(0, 100_000_000_000))
        rolled = np.roll(truth.sequence, shift)
        al = align_sequence(dec, rolled)
        assert al.offset == shift
        assert al.agreement > 0.99

    def test_errored_stream_agreement(self, errored_stream, default_source):
        noisy, truth = errored_stream
        dec = demodulate(noisy, LINE_HZ, default_source)
        al = align_sequence(dec, truth.sequence)
        assert al.offset == 0
        assert al.agreement == pytest.approx(0.95, abs=0.01)

    def test_too_few_records(self, clean_stream, default_source):
        noisy, _ = clean_stream
        dec = demodulate(noisy, LINE_HZ, default_source,
                         window=(0, 1_000_000_000))
        with pytest.raises(AlignmentError):
            align_sequence(dec, np.zeros(4096, dtype=np.uint8),
                           min_records=10**9)

    def test_garbage_fails(self, default_source):
        rng = np.random.default_rng(0)
        t = np.sort(rng.integers(0, 10**11, size=60_000))
        s = TagStream(t, np.zeros(t.size, dtype=np.uint8), 10**11)
        dec = demodulate(s, LINE_HZ, default_source)
        with pytest.raises(AlignmentError):
            align_sequence(dec, make_sequence(4096, seed=1))

    def test_reference_must_be_pow2(self, clean_stream, default_source):
        noisy, _ = clean_stream
        dec = demodulate(noisy, LINE_HZ, default_source)
        with pytest.raises(TagStreamError):
            align_sequence(dec, np.zeros(1000, dtype=np.uint8))


class TestComputeQber:
    def test_zero_errors_on_clean_stream(self, clean_stream, default_source):
        noisy, truth = clean_stream
        dec = demodulate(noisy, LINE_HZ, default_source)
        rep = compute_qber(dec, truth.sequence, 0)
        assert rep.basis == "Z"
        assert rep.qber < 0.001
        assert rep.sifted_count > 100_000

    def test_matches_injected_error_rate(self, errored_stream, default_source):
        noisy, truth = errored_stream
        dec = demodulate(noisy, LINE_HZ, default_source)
        rep = compute_qber(dec, truth.sequence, 0)
        sd = math.sqrt(0.05 * 0.95 / rep.sifted_count)
        assert abs(rep.qber - 0.05) < 3 * sd
        # jitter never crosses a slot, so the only mismatches are the
        # injected flips among the sifted records
        assert rep.error_count == int(truth.flipped[dec.accepted_z].sum())

    def test_wrong_offset_scores_half(self, clean_stream, default_source):
        noisy, truth = clean_stream
        dec = demodulate(noisy, LINE_HZ, default_source)
        rep = compute_qber(dec, truth.sequence, 1)
        assert abs(rep.qber - 0.5) < 0.05

    def test_x_basis_counts_only(self, clean_stream, default_source):
        noisy, truth = clean_stream
        dec = demodulate(noisy, LINE_HZ, default_source)
        rep = compute_qber(dec, truth.sequence, 0, basis="X")
        assert rep.basis == "X"
        assert rep.error_count == 0
        assert rep.sifted_count > 0
        assert "not simulated" in rep.note

    def test_no_sifted_raises(self, default_source):
        src = default_source
        # all tags labeled X: nothing sifts in the Z basis
        qubits = np.arange(10, 5000, 3)
        s = grid_stream(src, qubits, np.zeros(qubits.size, dtype=int))
        s = TagStream(s.t, np.full(len(s), int(Channel.X), dtype=np.uint8),
                      s.duration_ps)
        dec = demodulate(s, src.pulse_line_hz, src, phase_offset=0.0)
        with pytest.raises(TagStreamError):
            compute_qber(dec, make_sequence(4096, seed=0, p_z=1.0), 0)

    def test_unknown_basis(self, clean_stream, default_source):
        noisy, truth = clean_stream
        dec = demodulate(noisy, LINE_HZ, default_source)
        with pytest.raises(TagStreamError):
            compute_qber(dec, truth.sequence, 0, basis="Y")

    def test_dark_counts_raise_qber(self, errored_stream, default_source):
        noisy, truth = errored_stream
        darkened = inject_dark_counts(noisy, 50e3, seed=99)
        clean = compute_qber(demodulate(noisy, LINE_HZ, default_source),
                             truth.sequence, 0)
        dirty = compute_qber(demodulate(darkened, LINE_HZ, default_source),
                             truth.sequence, 0)
        assert dirty.sifted_count > clean.sifted_count
        assert dirty.qber > clean.qber


class TestQberTimeline:
    def test_window_accounting(self, errored_stream, default_source):
        noisy, truth = errored_stream
        dec = demodulate(noisy, LINE_HZ, default_source)
        win = 50_000_000_000
        centers, qber, sifted = qber_timeline(dec, truth.sequence, 0, win,
                                              t_start_ps=0)
        assert centers.size == sifted.size == qber.size
        assert np.allclose(np.diff(centers), win)
        rep = compute_qber(dec, truth.sequence, 0)
        assert sifted.sum() == rep.sifted_count
        ok = sifted >= 20
        assert np.all(np.abs(qber[ok] - 0.05) < 0.02)

    def test_sparse_windows_are_nan(self, default_source):
        src = default_source
        seq = make_sequence(4096, seed=2, p_z=1.0)
        src = SourceConfig(sequence=seq)
        arr = sample_arrivals(200e3, 0.01, seed=3)
        enc, truth = encode_sequence(arr, src, 0.0, seed=4)
        dec = demodulate(enc, src.pulse_line_hz, src)
        # 10 us windows hold ~2 tags each, far below min_sifted
        _, qber, sifted = qber_timeline(dec, truth.sequence, 0, 10_000_000,
                                        min_sifted=20)
        assert np.isnan(qber[sifted < 20]).all()
