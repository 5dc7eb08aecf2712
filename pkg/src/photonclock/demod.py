"""Time-bin demodulation of a tag stream against a recovered clock.

Tags are folded at the qubit period implied by the recovered pulse-line
frequency, assigned to the nearest legal pulse slot (early/late), sifted by
a fixed acceptance window, aligned to the transmitter's repeating symbol
pattern by circular correlation, and scored as a qubit error ratio.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .tagstream import Channel, TagStream, fold, histogram, TagStreamError
from .recovery import DemodEstimate, EstimateStatus
from .simulator import SourceConfig, Z_EARLY, Z_LATE, X_SYMBOL

SIFT_WINDOW_DEFAULT_PS = 200.0
BASIS_Z, BASIS_X = 0, 1
MIN_ALIGN_RECORDS = 1000
MIN_AGREEMENT = 0.6


class AlignmentError(RuntimeError):
    """Sequence alignment could not be established."""


@dataclass(frozen=True)
class DecodedStream:
    """Per-tag demodulation outcome.

    ``qubit_index`` counts qubit periods from t = 0 under the demodulation
    clock; ``bit`` is the decoded slot (0 early, 1 late); ``basis`` follows
    the channel label (X detectors vs everything else); ``accepted`` marks
    tags whose residual to the chosen slot fits the sift window.
    """

    t_ps: np.ndarray
    qubit_index: np.ndarray
    bit: np.ndarray
    basis: np.ndarray
    accepted: np.ndarray
    residual_ps: np.ndarray
    frequency_hz: float
    qubit_period_ps: float
    phase_offset_ps: float
    sift_window_ps: float
    duration_ps: int

    def __len__(self) -> int:
        return int(self.t_ps.size)

    @property
    def accepted_z(self) -> np.ndarray:
        return self.accepted & (self.basis == BASIS_Z)

    @property
    def accepted_x(self) -> np.ndarray:
        return self.accepted & (self.basis == BASIS_X)


@dataclass(frozen=True)
class Alignment:
    """Result of matching decoded bits against the repeating pattern."""

    offset: int
    agreement: float
    n_used: int


@dataclass(frozen=True)
class QberReport:
    """Sifted counts and error ratio for one basis at one alignment."""

    basis: str
    sifted_count: int
    error_count: int
    qber: float
    offset: int
    detection_rate_hz: float
    note: str = ""

    @staticmethod
    def csv_header():
        return ["loss_db", "rate_hz", "qber", "sifted", "errors", "offset"]

    def csv_row(self, loss_db=None):
        loss = "" if loss_db is None else repr(float(loss_db))
        return [loss, repr(self.detection_rate_hz), repr(self.qber),
                self.sifted_count, self.error_count, self.offset]

    def to_dict(self) -> dict:
        return {"basis": self.basis, "sifted_count": self.sifted_count,
                "error_count": self.error_count, "qber": self.qber,
                "offset": self.offset,
                "detection_rate_hz": self.detection_rate_hz, "note": self.note}


def save_qber_csv(reports, path, loss_db=None) -> None:
    """Write one or more QBER reports as CSV rows (loss_db is a caller label)."""
    if not isinstance(reports, (list, tuple)):
        reports = [reports]
    if not isinstance(loss_db, (list, tuple)):
        loss_db = [loss_db] * len(reports)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(QberReport.csv_header())
        for rep, loss in zip(reports, loss_db):
            writer.writerow(rep.csv_row(loss))


def _auto_phase_offset(folded_values: np.ndarray, period_ps: float,
                       positions_ps: np.ndarray, sift_window_ps: float) -> float:
    """Circular offset that best aligns the pulse-slot template with the data.

    Correlates a binned occupancy template (slots widened to the sift window)
    against the folded histogram; parabolic refinement of the peak gives a
    sub-bin offset.
    """
    n_bins = max(64, min(1024, int(period_ps / 4.0)))
    width = period_ps / n_bins
    counts = np.bincount(
        np.clip((folded_values / width).astype(np.int64), 0, n_bins - 1),
        minlength=n_bins).astype(np.float64)
    template = np.zeros(n_bins)
    centers = (np.arange(n_bins) + 0.5) * width
    for p in positions_ps:
        d = np.abs((centers - p + period_ps / 2.0) % period_ps - period_ps / 2.0)
        template[d <= sift_window_ps / 2.0] = 1.0
    counts -= counts.mean()
    template -= template.mean()
    corr = np.fft.irfft(np.conj(np.fft.rfft(template)) * np.fft.rfft(counts),
                        n=n_bins)
    k = int(np.argmax(corr))
    cm, c0, cp = corr[(k - 1) % n_bins], corr[k], corr[(k + 1) % n_bins]
    denom = cm - 2.0 * c0 + cp
    frac = 0.5 * (cm - cp) / denom if denom < 0.0 else 0.0
    offset = (k + frac) * width
    return float((offset + period_ps / 2.0) % period_ps - period_ps / 2.0)


def demodulate(stream: TagStream, estimate, src: SourceConfig,
               sift_window_ps: float = SIFT_WINDOW_DEFAULT_PS,
               phase_offset="auto", window=None) -> DecodedStream:
    """Decode every tag in ``window`` against the recovered clock.

    ``estimate`` is a :class:`DemodEstimate` (must not be Failed) or a plain
    pulse-line frequency in Hz. The qubit period is pulses-per-qubit over
    that frequency. ``phase_offset`` aligns the slot template with the data:
    'auto' fits it from the folded histogram, a number fixes it (ps).
    """
    if isinstance(estimate, DemodEstimate):
        if estimate.status is EstimateStatus.FAILED:
            raise TagStreamError("cannot demodulate with a failed estimate")
        f_line = estimate.frequency_hz
    else:
        f_line = float(estimate)
    if not (f_line > 0.0):
        raise TagStreamError("demodulation frequency must be positive")
    if window is None:
        window = (0, stream.duration_ps)
    lo, hi = stream.window_indices(int(window[0]), int(window[1]))
    t = stream.t[lo:hi]
    channel = stream.channel[lo:hi]
    if t.size == 0:
        raise TagStreamError("no tags in the demodulation window")
    period = src.pulses_per_qubit * 1e12 / f_line
    f_qubit = f_line / src.pulses_per_qubit
    folded = fold(t, f_qubit)
    positions = np.asarray(src.pulse_positions_ps, dtype=np.float64)
    if isinstance(phase_offset, str):
        if phase_offset != "auto":
            raise TagStreamError("phase_offset must be 'auto' or a number")
        offset = _auto_phase_offset(folded.values, period, positions,
                                    sift_window_ps)
    else:
        offset = float(phase_offset)
    slots = (positions + offset) % period
    diff = folded.values[:, None] - slots[None, :]
    diff = (diff + period / 2.0) % period - period / 2.0
    choice = np.argmin(np.abs(diff), axis=1)
    residual = diff[np.arange(diff.shape[0]), choice]
    accepted = np.abs(residual) <= sift_window_ps / 2.0
    # qubit counter from the chosen slot: t = q*period + slot + offset +
    # residual with |residual| <= period/2, so rounding recovers q even for
    # slots sitting on the period boundary (a plain floor would split their
    # jitter across two qubit indices)
    work = np.longdouble if (t.size and int(t.max()) > 2**45) else np.float64
    base = t.astype(work) - work(offset) - positions.astype(work)[choice]
    qubit = np.round(base / work(period)).astype(np.int64)
    basis = np.where(channel == int(Channel.X), BASIS_X, BASIS_Z).astype(np.uint8)
    return DecodedStream(
        t_ps=t.copy(), qubit_index=qubit, bit=choice.astype(np.int8),
        basis=basis, accepted=accepted, residual_ps=residual,
        frequency_hz=f_line, qubit_period_ps=period, phase_offset_ps=offset,
        sift_window_ps=sift_window_ps, duration_ps=stream.duration_ps)


def _circular_corr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """c[k] = sum_j a[j] * b[(j + k) mod n], computed via FFT."""
    n = a.size
    return np.fft.irfft(np.conj(np.fft.rfft(a)) * np.fft.rfft(b), n=n)


def align_sequence(decoded: DecodedStream, reference: np.ndarray,
                   min_records: int = MIN_ALIGN_RECORDS,
                   min_agreement: float = MIN_AGREEMENT) -> Alignment:
    """Find the pattern shift mapping detected qubit indices to the reference.

    Maximizes, over all circular offsets, the fraction of accepted Z records
    whose decoded bit matches the reference symbol at (qubit index + offset);
    only reference positions holding Z symbols are scored. Ties break toward
    the smallest offset. Fails when fewer than ``min_records`` accepted Z
    records exist or the best agreement is below ``min_agreement``.
    """
    reference = np.ascontiguousarray(reference, dtype=np.uint8)
    n_seq = reference.size
    if n_seq < 1 or (n_seq & (n_seq - 1)) != 0:
        raise TagStreamError("reference length must be a power of two")
    mask = decoded.accepted_z
    q = decoded.qubit_index[mask] % n_seq
    bits = decoded.bit[mask]
    n_used = int(q.size)
    if n_used < min_records:
        raise AlignmentError(
            f"need {min_records} accepted Z records to align, got {n_used}")
    c0 = np.bincount(q[bits == 0].astype(np.intp), minlength=n_seq).astype(np.float64)
    c1 = np.bincount(q[bits == 1].astype(np.intp), minlength=n_seq).astype(np.float64)
    z0 = (reference == Z_EARLY).astype(np.float64)
    z1 = (reference == Z_LATE).astype(np.float64)
    agree = _circular_corr(c0, z0) + _circular_corr(c1, z1)
    total = _circular_corr(c0 + c1, z0 + z1)
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(total > 0.5, agree / total, 0.0)
    frac = np.round(frac, 9)   # kill FFT noise so ties resolve to the first index
    best = int(np.argmax(frac))
    agreement = float(frac[best])
    if agreement < min_agreement:
        raise AlignmentError(
            f"best agreement {agreement:.3f} below {min_agreement:.2f}; "
            "alignment failed")
    return Alignment(best, agreement, n_used)


def compute_qber(decoded: DecodedStream, reference: np.ndarray, offset: int,
                 basis: str = "Z") -> QberReport:
    """Error ratio of sifted records against the aligned reference pattern.

    Z: accepted Z records at reference positions holding Z symbols; an error
    is a decoded bit differing from the reference bit. X: accepted X-labeled
    records at X positions are counted, with no error model (interference is
    not simulated), and the report is flagged accordingly.
    """
    reference = np.ascontiguousarray(reference, dtype=np.uint8)
    n_seq = reference.size
    offset = int(offset) % n_seq
    rate = (len(decoded) / (decoded.duration_ps * 1e-12)
            if decoded.duration_ps else 0.0)
    if basis.upper() == "Z":
        mask = decoded.accepted_z
        ref = reference[((decoded.qubit_index[mask] + offset) % n_seq).astype(np.intp)]
        at_z = ref != X_SYMBOL
        sifted = int(at_z.sum())
        if sifted == 0:
            raise TagStreamError("no sifted Z records at this alignment")
        errors = int(np.sum(decoded.bit[mask][at_z] != ref[at_z]))
        return QberReport("Z", sifted, errors, errors / sifted, offset, rate)
    if basis.upper() == "X":
        mask = decoded.accepted_x
        ref = reference[((decoded.qubit_index[mask] + offset) % n_seq).astype(np.intp)]
        at_x = ref == X_SYMBOL
        sifted = int(at_x.sum())
        return QberReport("X", sifted, 0, 0.0, offset, rate,
                          note="X errors not simulated; label counts only")
    raise TagStreamError(f"unknown basis {basis!r}")


def qber_timeline(decoded: DecodedStream, reference: np.ndarray, offset: int,
                  window_ps: int, t_start_ps=None, t_end_ps=None,
                  min_sifted: int = 20):
    """Windowed Z-basis QBER over time.

    Returns (window centers ps, qber, sifted counts); windows with fewer than
    ``min_sifted`` accepted records report NaN (not enough data to judge).
    """
    reference = np.ascontiguousarray(reference, dtype=np.uint8)
    n_seq = reference.size
    offset = int(offset) % n_seq
    window_ps = int(window_ps)
    if window_ps <= 0:
        raise TagStreamError("window must be positive")
    if t_start_ps is None:
        t_start_ps = int(decoded.t_ps[0]) if len(decoded) else 0
    if t_end_ps is None:
        t_end_ps = decoded.duration_ps
    t_start_ps, t_end_ps = int(t_start_ps), int(t_end_ps)
    n_win = max(0, (t_end_ps - t_start_ps) // window_ps)
    if n_win == 0:
        raise TagStreamError("no complete window in the requested span")
    mask = decoded.accepted_z.copy()
    mask &= (decoded.t_ps >= t_start_ps) & (decoded.t_ps < t_start_ps + n_win * window_ps)
    q = decoded.qubit_index[mask]
    ref = reference[((q + offset) % n_seq).astype(np.intp)]
    at_z = ref != X_SYMBOL
    t = decoded.t_ps[mask][at_z]
    err = (decoded.bit[mask][at_z] != ref[at_z]).astype(np.int64)
    idx = ((t - t_start_ps) // window_ps).astype(np.intp)
    sifted = np.bincount(idx, minlength=n_win)
    errors = np.bincount(idx, weights=err, minlength=n_win)
    with np.errstate(divide="ignore", invalid="ignore"):
        qber = np.where(sifted >= min_sifted, errors / np.maximum(sifted, 1), np.nan)
    centers = t_start_ps + (np.arange(n_win) + 0.5) * window_ps
    return centers, qber, sifted
