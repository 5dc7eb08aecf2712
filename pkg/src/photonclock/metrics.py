"""Synchronization quality metrics.

Time-error series against a reference timeline, the half-period sync
criterion, a Monte-Carlo estimate of how long demodulation stays below the
QBER threshold under clock noise (coherence time), and the one-decoy
finite-key secret-key length.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .tagstream import TagStream, TagStreamError
from .simulator import (SourceConfig, ClockNoiseModel, sample_arrivals,
                        encode_sequence, apply_clock_noise, make_sequence,
                        SimulatorError)
from .recovery import (fft_coarse_estimate, optimize_detuning, EstimateStatus,
                       OptimizeOptions)
from .demod import demodulate

BB84_QBER_THRESHOLD = 0.11


@dataclass(frozen=True)
class TieSeries:
    """Sampled time error TE(t) = measured timeline minus reference timeline.

    ``t_ps`` are the reference sample times (sorted), ``te_ps`` the error at
    each sample. On simulated data the pre-noise tag times are the reference.
    """

    t_ps: np.ndarray
    te_ps: np.ndarray

    def __post_init__(self):
        t = np.ascontiguousarray(self.t_ps, dtype=np.float64)
        te = np.ascontiguousarray(self.te_ps, dtype=np.float64)
        if t.ndim != 1 or te.shape != t.shape:
            raise TagStreamError("t_ps and te_ps must be 1-d arrays of equal length")
        if t.size > 1 and np.any(np.diff(t) < 0):
            raise TagStreamError("sample times must be sorted")
        object.__setattr__(self, "t_ps", t)
        object.__setattr__(self, "te_ps", te)

    @classmethod
    def from_timelines(cls, measured_ps, reference_ps) -> "TieSeries":
        m = np.asarray(measured_ps, dtype=np.float64)
        r = np.asarray(reference_ps, dtype=np.float64)
        if m.shape != r.shape:
            raise TagStreamError("timelines must pair one measured time per reference")
        return cls(r, m - r)

    def __len__(self) -> int:
        return int(self.t_ps.size)

    def median_spacing_ps(self) -> float:
        if len(self) < 2:
            return 0.0
        return float(np.median(np.diff(self.t_ps)))


def _nearest_index(t: np.ndarray, target: float, tol: float) -> int:
    i = int(np.searchsorted(t, target))
    best, dist = -1, np.inf
    for j in (i - 1, i):
        if 0 <= j < t.size and abs(t[j] - target) < dist:
            best, dist = j, abs(t[j] - target)
    if best < 0 or dist > tol:
        raise TagStreamError(f"no sample within {tol:.3g} ps of t = {target:.6g} ps")
    return best


def tie(series: TieSeries, t_ps: float, tau_ps: float, tol_ps=None) -> float:
    """Time interval error TE(t + tau) - TE(t), nearest-sample lookup.

    ``tol_ps`` bounds how far the nearest sample may sit from the requested
    times (default: twice the median sample spacing).
    """
    if tol_ps is None:
        tol_ps = 2.0 * series.median_spacing_ps()
    i = _nearest_index(series.t_ps, float(t_ps), tol_ps)
    j = _nearest_index(series.t_ps, float(t_ps) + float(tau_ps), tol_ps)
    return float(series.te_ps[j] - series.te_ps[i])


def tie_profile(series: TieSeries, tau_ps: float):
    """TIE at lag tau for every sample where t + tau is still in range.

    Pairs each sample with the latest sample not beyond t + tau. Returns
    (t_ps, tie_ps).
    """
    t = series.t_ps
    te = series.te_ps
    if t.size == 0:
        return t.copy(), te.copy()
    j = np.searchsorted(t, t + float(tau_ps), side="right") - 1
    # starts whose lag target falls past the last sample would silently
    # evaluate a shorter interval; drop them instead
    valid = (j > np.arange(t.size)) & (t + float(tau_ps) <= t[-1])
    return t[valid], te[j[valid]] - te[valid]


def check_criterion(series: TieSeries, tau_ps: float, f_rx_hz: float):
    """Half-period sync test: |TIE_t(tau)| < 1/(2 f_rx) per start sample.

    Returns (t_ps, ok) where ok marks the starts keeping every pulse
    associated with its own period over the lag.
    """
    if not (f_rx_hz > 0.0):
        raise TagStreamError("receiver frequency must be positive")
    bound = 0.5e12 / f_rx_hz
    t, tie_vals = tie_profile(series, tau_ps)
    return t, np.abs(tie_vals) < bound


@dataclass(frozen=True)
class CoherenceConfig:
    """Monte-Carlo settings for the QBER-survival (coherence) estimate."""

    noise_fwhm_hz: float
    frame_len_s: float
    estimator: str = "optimized"        # "fft" or "optimized"
    rate_hz: float = 500e3
    runs: int = 200
    seed: int = 0
    duration_s: float = 5.0
    qber_window_s: float = 0.1
    threshold: float = BB84_QBER_THRESHOLD
    white_sigma_ps: float = 40.0
    sample_period_ps: int = 400
    min_tags: int = 100
    min_sifted: int = 20
    source: SourceConfig = None

    def __post_init__(self):
        if self.estimator not in ("fft", "optimized"):
            raise SimulatorError("estimator must be 'fft' or 'optimized'")
        if not (self.frame_len_s > 0 and self.duration_s > self.frame_len_s):
            raise SimulatorError("need duration > frame length > 0")


@dataclass(frozen=True)
class CoherenceResult:
    """Per-run coherence times plus summary statistics.

    A run's coherence is the elapsed time between the end of the estimation
    frame and the center of the first QBER window crossing the threshold.
    Runs that never cross are censored at the remaining duration; runs whose
    estimator fails score zero. Both are flagged.
    """

    config: CoherenceConfig
    coherence_s: np.ndarray
    censored: np.ndarray
    failed: np.ndarray

    @property
    def median_s(self) -> float:
        return float(np.median(self.coherence_s))

    @property
    def mean_s(self) -> float:
        return float(np.mean(self.coherence_s))

    @property
    def n_censored(self) -> int:
        return int(self.censored.sum())

    @property
    def n_failed(self) -> int:
        return int(self.failed.sum())

    def csv_row(self):
        return [repr(self.config.noise_fwhm_hz),
                repr(self.config.frame_len_s * 1e3),
                self.config.estimator, repr(self.median_s), repr(self.mean_s),
                int(self.coherence_s.size)]

    @staticmethod
    def csv_header():
        return ["noise_fwhm_hz", "frame_ms", "estimator", "median_s",
                "mean_s", "runs"]


def save_coherence_csv(results, path) -> None:
    if not isinstance(results, (list, tuple)):
        results = [results]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CoherenceResult.csv_header())
        for res in results:
            writer.writerow(res.csv_row())


def _run_coherence_once(cfg: CoherenceConfig, src: SourceConfig, run: int):
    """One Monte-Carlo run; returns (coherence_s, censored, failed)."""
    arrivals = sample_arrivals(cfg.rate_hz, cfg.duration_s,
                               seed=[cfg.seed, run, 0])
    encoded, truth = encode_sequence(arrivals, src, error_prob=0.0,
                                     seed=[cfg.seed, run, 1])
    noise = ClockNoiseModel(cfg.noise_fwhm_hz, cfg.white_sigma_ps,
                            seed=[cfg.seed, run, 2])
    noised = apply_clock_noise(encoded, noise, nominal_hz=src.pulse_line_hz)
    frame_ps = int(round(cfg.frame_len_s * 1e12))
    rest_s = cfg.duration_s - cfg.frame_len_s
    band = (src.pulse_line_hz * 0.99, src.pulse_line_hz * 1.01)
    est = fft_coarse_estimate(noised, cfg.frame_len_s, cfg.sample_period_ps,
                              band, cfg.min_tags)
    if est.status is EstimateStatus.FAILED:
        return 0.0, False, True
    if cfg.estimator == "optimized":
        est = optimize_detuning(noised, est.f0_hz, (0, frame_ps),
                                OptimizeOptions(min_tags=cfg.min_tags))
        if est.status is EstimateStatus.FAILED:
            return 0.0, False, True
    win_ps = int(round(cfg.qber_window_s * 1e12))
    # fit the slot phase on the first window only: late windows may already
    # be smeared by drift and would bias the template fit
    head = demodulate(noised, est.frequency_hz, src,
                      window=(frame_ps, min(frame_ps + win_ps,
                                            noised.duration_ps)))
    decoded = demodulate(noised, est.frequency_hz, src,
                         phase_offset=head.phase_offset_ps,
                         window=(frame_ps, noised.duration_ps))
    # truth rows line up with stream order: noise injection preserves order
    # for gaps far beyond the jitter scale
    lo, _hi = np.searchsorted(noised.t, [frame_ps, noised.duration_ps])
    true_bit = truth.bit[lo:lo + len(decoded)]
    mask = decoded.accepted_z & (true_bit >= 0)
    t_rel = decoded.t_ps[mask] - frame_ps
    err = decoded.bit[mask] != true_bit[mask]
    n_win = int(rest_s * 1e12) // win_ps
    if n_win == 0:
        raise SimulatorError("duration leaves no full QBER window after the frame")
    idx = (t_rel // win_ps).astype(np.intp)
    keep = idx < n_win
    sifted = np.bincount(idx[keep], minlength=n_win)
    errors = np.bincount(idx[keep], weights=err[keep].astype(float),
                         minlength=n_win)
    with np.errstate(invalid="ignore"):
        qber = np.where(sifted >= cfg.min_sifted,
                        errors / np.maximum(sifted, 1), np.nan)
    crossed = np.nonzero(np.nan_to_num(qber, nan=0.0) > cfg.threshold)[0]
    if crossed.size:
        return float((crossed[0] + 0.5) * cfg.qber_window_s), False, False
    return float(rest_s), True, False


def coherence_time(config: CoherenceConfig) -> CoherenceResult:
    """Monte-Carlo distribution of how long a one-shot frequency estimate
    keeps the windowed QBER below threshold under reference-clock noise.

    Each run simulates an acquisition, estimates the clock on the leading
    frame ('fft': spectral peak only; 'optimized': plus simplex refinement),
    demodulates the remainder at that fixed frequency, and reports the first
    threshold crossing. Deterministic per (seed, run index).
    """
    src = config.source or SourceConfig(sequence=make_sequence(seed=config.seed))
    out = [_run_coherence_once(config, src, r) for r in range(config.runs)]
    coh = np.array([o[0] for o in out])
    cen = np.array([o[1] for o in out], dtype=bool)
    fail = np.array([o[2] for o in out], dtype=bool)
    return CoherenceResult(config, coh, cen, fail)


# --- one-decoy finite-key secret-key length ---------------------------------

def binary_entropy(p: float) -> float:
    """h(p) in bits; 0 at both endpoints."""
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return float(-p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p))


def _hoeffding(n: float, eps: float) -> float:
    return math.sqrt(0.5 * n * math.log(19.0 / eps))


def _gamma_term(a: float, b: float, c: float, d: float) -> float:
    """Finite-size phase-error correction term."""
    if c <= 0.0 or d <= 0.0:
        return math.inf
    b = min(max(b, 1e-15), 1.0 - 1e-15)
    inner = (c + d) / (c * d * b * (1.0 - b)) * (21.0 / a) ** 2
    if inner <= 1.0:
        return 0.0
    return math.sqrt((c + d) * (1.0 - b) * b / (c * d * math.log(2.0))
                     * math.log2(inner))


@dataclass(frozen=True)
class SkrReport:
    """Secret-key length and rate with the intermediate bounds that led there."""

    key_length_bits: float
    skr_hz: float
    feasible: bool
    qber_z: float
    phase_error: float
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"key_length_bits": self.key_length_bits, "skr_hz": self.skr_hz,
                "feasible": self.feasible, "qber_z": self.qber_z,
                "phase_error": self.phase_error, "detail": dict(self.detail)}


def skr(n_z_mu1: float, n_z_mu2: float, m_z_mu1: float, m_z_mu2: float,
        n_x_mu1: float, n_x_mu2: float, m_x_mu1: float, m_x_mu2: float,
        acq_time_s: float, mu1: float = 0.7, mu2: float = 0.3,
        p_mu1: float = 0.5, eps_sec: float = 1e-12, eps_cor: float = 1e-12,
        f_ec: float = 1.16) -> SkrReport:
    """One-decoy finite-key secret-key length and rate.

    Inputs are sifted counts (n) and error counts (m) per basis and pulse
    intensity, the acquisition time, intensities mu1 > mu2, the probability
    of sending mu1, and the security parameters. The key is carved from the
    Z basis; the X basis bounds the phase error. Statistical deviations use
    Hoeffding bounds at eps_sec; the vacuum contribution is lower-bounded by
    the decoy-intensity difference and upper-bounded through the error counts
    (vacuum detections are random, so errors double-count them).

    Infeasible statistics (no single-photon evidence, phase error at or past
    1/2, or a non-positive length) give skr 0 and feasible False.
    """
    if not (mu1 > mu2 > 0.0):
        raise SimulatorError("need mu1 > mu2 > 0")
    if not (0.0 < p_mu1 < 1.0):
        raise SimulatorError("p_mu1 must be in (0, 1)")
    if not (acq_time_s > 0.0):
        raise SimulatorError("acquisition time must be positive")
    if min(n_z_mu1, n_z_mu2, m_z_mu1, m_z_mu2,
           n_x_mu1, n_x_mu2, m_x_mu1, m_x_mu2) < 0:
        raise SimulatorError("counts must be non-negative")
    p = {mu1: p_mu1, mu2: 1.0 - p_mu1}
    tau0 = sum(p[k] * math.exp(-k) for k in (mu1, mu2))
    tau1 = sum(p[k] * math.exp(-k) * k for k in (mu1, mu2))

    def bounds(counts: dict, total: float):
        """Decoy-transformed Hoeffding upper/lower count estimates per intensity."""
        dev = _hoeffding(total, eps_sec)
        up = {k: math.exp(k) / p[k] * (counts[k] + dev) for k in counts}
        lo = {k: math.exp(k) / p[k] * max(counts[k] - dev, 0.0) for k in counts}
        return up, lo

    n_z = n_z_mu1 + n_z_mu2
    m_z = m_z_mu1 + m_z_mu2
    n_x = n_x_mu1 + n_x_mu2
    m_x = m_x_mu1 + m_x_mu2
    detail = {"tau0": tau0, "tau1": tau1, "n_z": n_z, "m_z": m_z,
              "n_x": n_x, "m_x": m_x}
    if n_z <= 0 or n_x <= 0:
        return SkrReport(0.0, 0.0, False, 0.0, 1.0,
                         {**detail, "reason": "no sifted detections"})
    qber_z = m_z / n_z

    nz_up, nz_lo = bounds({mu1: n_z_mu1, mu2: n_z_mu2}, n_z)
    mz_up, _ = bounds({mu1: m_z_mu1, mu2: m_z_mu2}, m_z)
    nx_up, nx_lo = bounds({mu1: n_x_mu1, mu2: n_x_mu2}, n_x)
    mx_up, mx_lo = bounds({mu1: m_x_mu1, mu2: m_x_mu2}, m_x)

    def vacuum_lower(lo, up, total):
        s = tau0 * (mu1 * lo[mu2] - mu2 * up[mu1]) / (mu1 - mu2)
        return min(max(s, 0.0), total)

    def vacuum_upper(err_up, total):
        return min(2.0 * tau0 * min(err_up[mu1], err_up[mu2]), total)

    def single_lower(lo, up, s0_up, total):
        s = (tau1 * mu1 / (mu2 * (mu1 - mu2))
             * (lo[mu2] - (mu2 ** 2 / mu1 ** 2) * up[mu1]
                - (mu1 ** 2 - mu2 ** 2) / mu1 ** 2 * s0_up / tau0))
        return min(max(s, 0.0), total)

    s_z0_low = vacuum_lower(nz_lo, nz_up, n_z)
    s_z0_up = vacuum_upper(mz_up, n_z)
    s_z1_low = single_lower(nz_lo, nz_up, s_z0_up, n_z)
    s_x0_up = vacuum_upper(mx_up, n_x)
    s_x1_low = single_lower(nx_lo, nx_up, s_x0_up, n_x)
    v_x1_up = max(tau1 * (mx_up[mu1] - mx_lo[mu2]) / (mu1 - mu2), 0.0)
    detail.update({"s_z0_low": s_z0_low, "s_z0_up": s_z0_up,
                   "s_z1_low": s_z1_low, "s_x1_low": s_x1_low,
                   "v_x1_up": v_x1_up, "qber_z": qber_z})
    if s_z1_low <= 0.0 or s_x1_low <= 0.0:
        return SkrReport(0.0, 0.0, False, qber_z, 1.0,
                         {**detail, "reason": "no single-photon evidence"})
    phi_x = min(v_x1_up / s_x1_low, 0.5)
    phase = phi_x + _gamma_term(eps_sec, phi_x, s_x1_low, s_z1_low)
    lambda_ec = n_z * f_ec * binary_entropy(qber_z)
    detail.update({"phi_x": phi_x, "phase_error": phase,
                   "lambda_ec": lambda_ec})
    if phase >= 0.5:
        return SkrReport(0.0, 0.0, False, qber_z, phase,
                         {**detail, "reason": "phase error bound reaches 1/2"})
    length = (s_z0_low + s_z1_low * (1.0 - binary_entropy(phase))
              - lambda_ec - 6.0 * math.log2(19.0 / eps_sec)
              - math.log2(2.0 / eps_cor))
    detail["key_length_raw"] = length
    if length <= 0.0:
        return SkrReport(0.0, 0.0, False, qber_z, phase,
                         {**detail, "reason": "finite-size costs exceed the bound"})
    return SkrReport(length, length / acq_time_s, True, qber_z, phase, detail)
