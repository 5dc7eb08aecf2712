"""Transmitter-clock recovery from a detection tag stream.

Pipeline: coarse spectral estimate of the pulse-repetition line, correction
of the estimate from the temporal drift of the folded histogram between
frames, optional simplex refinement of a histogram-variance cost, and
sliding-window drift tracking. No auxiliary sync signal is used; everything
is derived from the tag times themselves.
"""

import csv
import enum
from dataclasses import dataclass, replace

import numpy as np
from scipy import fft as sfft

from .tagstream import (TagStream, FoldedSet, fold, histogram, binarize,
                        default_bin_count, TagStreamError)

T_INT_DEFAULT_S = 5e-3
SAMPLE_PERIOD_DEFAULT_PS = 400
FRAME_DEFAULT_PS = 30_000_000_000      # 30 ms
OVERLAP_DEFAULT_PS = 20_000_000_000    # 20 ms
MIN_TAGS_DEFAULT = 100
PEAK_OVER_MEDIAN = 5.0
LOW_CONFIDENCE_RATIO = 1.2


class RecoveryError(RuntimeError):
    """A recovery stage could not produce a usable result."""


class EstimateStatus(str, enum.Enum):
    FFT_ONLY = "FFTOnly"
    OPTIMIZED = "Optimized"
    FAILED = "Failed"


@dataclass(frozen=True)
class DemodEstimate:
    """A demodulation-frequency estimate over a frame.

    ``f0_hz`` is the coarse anchor, ``detuning_hz`` the refinement on top of
    it; ``frequency_hz`` is their sum. ``cost`` is the folded-histogram
    variance cost at the estimate (lower is better, 0 means structureless).
    """

    f0_hz: float
    detuning_hz: float
    frame_ps: tuple
    cost: float
    status: EstimateStatus
    note: str = ""

    @property
    def frequency_hz(self) -> float:
        return self.f0_hz + self.detuning_hz

    def to_dict(self) -> dict:
        return {
            "f0_hz": self.f0_hz,
            "detuning_hz": self.detuning_hz,
            "frequency_hz": self.frequency_hz,
            "frame_ps": [int(self.frame_ps[0]), int(self.frame_ps[1])],
            "cost": self.cost,
            "status": self.status.value,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DemodEstimate":
        return cls(float(d["f0_hz"]), float(d["detuning_hz"]),
                   (int(d["frame_ps"][0]), int(d["frame_ps"][1])),
                   float(d["cost"]), EstimateStatus(d["status"]),
                   str(d.get("note", "")))


@dataclass(frozen=True)
class FrameDrift:
    """Temporal shift of the folded pattern between two frames."""

    delta_t_ps: float
    peak_ratio: float
    low_confidence: bool
    n_a: int
    n_b: int


@dataclass(frozen=True)
class DriftTrace:
    """Per-frame detuning trace relative to a fixed anchor frequency."""

    f0_hz: float
    frame_len_ps: int
    step_ps: int
    t_center_ps: np.ndarray
    detuning_hz: np.ndarray
    cost: np.ndarray
    status: tuple   # "ok" or "carried" per frame

    def __len__(self) -> int:
        return int(self.t_center_ps.size)

    def frequencies_hz(self) -> np.ndarray:
        return self.f0_hz + self.detuning_hz

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t_center_ps", "detuning_hz", "cost", "status"])
            for t, d, c, s in zip(self.t_center_ps, self.detuning_hz,
                                  self.cost, self.status):
                writer.writerow([int(t), repr(float(d)), repr(float(c)), s])

    @classmethod
    def load_csv(cls, path, f0_hz: float = 0.0, frame_len_ps: int = 0,
                 step_ps: int = 0) -> "DriftTrace":
        t, d, c, s = [], [], [], []
        with open(path, "r", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:4] != ["t_center_ps", "detuning_hz", "cost", "status"]:
                raise TagStreamError("not a drift-trace csv")
            for row in reader:
                if not row:
                    continue
                t.append(int(row[0]))
                d.append(float(row[1]))
                c.append(float(row[2]))
                s.append(row[3])
        return cls(f0_hz, frame_len_ps, step_ps,
                   np.asarray(t, dtype=np.int64), np.asarray(d), np.asarray(c),
                   tuple(s))


def _empty_trace(f0_hz: float, frame_len_ps: int = 0, step_ps: int = 0) -> DriftTrace:
    return DriftTrace(f0_hz, frame_len_ps, step_ps,
                      np.empty(0, dtype=np.int64), np.empty(0), np.empty(0), ())


def fft_coarse_estimate(stream: TagStream, t_int_s: float = T_INT_DEFAULT_S,
                        sample_period_ps: int = SAMPLE_PERIOD_DEFAULT_PS,
                        search_band_hz=None,
                        min_tags: int = MIN_TAGS_DEFAULT) -> DemodEstimate:
    """Coarse pulse-line frequency: largest non-DC peak of the FFT of the
    binarized first ``t_int_s`` of the stream.

    Resolution is one FFT bin, 1/t_int. Returns a Failed estimate when the
    interval holds fewer than ``min_tags`` tags or the best peak does not
    clear 5x the spectral median (no significant line).
    """
    t_int_ps = int(round(t_int_s * 1e12))
    if t_int_ps <= 0:
        raise TagStreamError("integration time must be positive")
    if t_int_ps > stream.duration_ps:
        raise TagStreamError("stream shorter than the integration time")
    frame = (0, t_int_ps)
    nyquist = 0.5e12 / float(sample_period_ps)
    if search_band_hz is not None:
        lo, hi = float(search_band_hz[0]), float(search_band_hz[1])
        if not (0.0 <= lo < hi):
            raise TagStreamError("search band must satisfy 0 <= lo < hi")
        if hi > nyquist:
            raise TagStreamError(
                f"search band exceeds the Nyquist frequency {nyquist:.4g} Hz "
                f"of a {sample_period_ps} ps sampling period")
    lo_i, hi_i = stream.window_indices(*frame)
    n_in_frame = hi_i - lo_i
    if n_in_frame < min_tags:
        return DemodEstimate(0.0, 0.0, frame, 0.0, EstimateStatus.FAILED,
                             f"only {n_in_frame} tags in the first "
                             f"{t_int_s:.4g} s (need {min_tags})")
    vec = binarize(stream, sample_period_ps, frame)
    # single precision and a 5-smooth padded length: the peak location only
    # needs the spectral shape, and full FFTs at this size dominate runtime
    n_fft = sfft.next_fast_len(vec.size, real=True)
    mag = np.abs(sfft.rfft(vec.astype(np.float32), n=n_fft, workers=-1))
    freqs = np.fft.rfftfreq(n_fft, d=float(sample_period_ps) * 1e-12)
    mag[0] = 0.0
    noise_floor = float(np.median(mag[1:]))
    if search_band_hz is not None:
        band = (freqs >= lo) & (freqs <= hi)
        band[0] = False
        if not np.any(band):
            raise TagStreamError("search band contains no FFT bins")
        idx = np.nonzero(band)[0]
        peak = int(idx[np.argmax(mag[idx])])
    else:
        peak = int(np.argmax(mag))
    if noise_floor > 0.0 and mag[peak] < PEAK_OVER_MEDIAN * noise_floor:
        return DemodEstimate(0.0, 0.0, frame, 0.0, EstimateStatus.FAILED,
                             "no spectral line above the noise floor "
                             f"(peak/median {mag[peak] / noise_floor:.2f} < "
                             f"{PEAK_OVER_MEDIAN:.1f})")
    f0 = float(freqs[peak])
    j = cost(fold(stream, f0, window=frame))
    return DemodEstimate(f0, 0.0, frame, j, EstimateStatus.FFT_ONLY)


def drift_offset(delta_t_ps: float, t_span_s: float, f_hz: float) -> float:
    """Frequency offset implied by a pattern shift delta_t over t_span:
    (delta_t / t_span) * f. A positive shift (pattern arriving later) means
    the demodulation frequency sits above the source by this amount.
    """
    if not (t_span_s > 0.0):
        raise TagStreamError("time span must be positive")
    if not (f_hz > 0.0):
        raise TagStreamError("frequency must be positive")
    return (float(delta_t_ps) * 1e-12 / float(t_span_s)) * float(f_hz)


def measure_frame_drift(stream: TagStream, f_hz: float, frame_a, frame_b,
                        n_bins=None, min_tags: int = MIN_TAGS_DEFAULT) -> FrameDrift:
    """Shift of frame_b's folded histogram relative to frame_a's, in ps.

    Both frames are folded at ``f_hz`` into histograms with shared binning;
    the circular cross-correlation peak, refined by parabolic interpolation,
    gives the shift, wrapped to [-period/2, period/2). A correlation whose
    peak is below 1.2x the best competitor outside the peak's own lobe
    (an eighth of the period on either side) is flagged ``low_confidence``.
    """
    fa = fold(stream, f_hz, window=frame_a)
    fb = fold(stream, f_hz, window=frame_b)
    if len(fa) < min_tags or len(fb) < min_tags:
        raise RecoveryError(
            f"need {min_tags} tags per frame, got {len(fa)} and {len(fb)}")
    if n_bins is None:
        n_bins = default_bin_count(fa.period_ps)
    ha = histogram(fa, n_bins).counts.astype(np.float64)
    hb = histogram(fb, n_bins).counts.astype(np.float64)
    ha -= ha.mean()
    hb -= hb.mean()
    corr = np.fft.irfft(np.conj(np.fft.rfft(ha)) * np.fft.rfft(hb), n=n_bins)
    k = int(np.argmax(corr))
    cm, c0, cp = corr[(k - 1) % n_bins], corr[k], corr[(k + 1) % n_bins]
    denom = cm - 2.0 * c0 + cp
    frac = 0.5 * (cm - cp) / denom if denom < 0.0 else 0.0
    period = fa.period_ps
    width = period / n_bins
    delta = (k + frac) * width
    delta = (delta + period / 2.0) % period - period / 2.0
    # competitor = best correlation outside the peak lobe; detector jitter
    # smears the pattern over several bins, so a fixed 1-bin exclusion would
    # flag every smooth (healthy) correlation as ambiguous
    guard = max(1, n_bins // 8)
    mask = np.ones(n_bins, dtype=bool)
    for off in range(-guard, guard + 1):
        mask[(k + off) % n_bins] = False
    competitor = float(corr[mask].max()) if np.any(mask) else 0.0
    if competitor <= 0.0:
        ratio = np.inf
    else:
        ratio = float(c0) / competitor
    return FrameDrift(float(delta), ratio, bool(ratio < LOW_CONFIDENCE_RATIO),
                      len(fa), len(fb))


def cost_from_counts(counts, n_values: int) -> float:
    """Histogram-variance cost from raw bin counts and the tag count."""
    if n_values <= 0:
        raise TagStreamError("cost needs a non-empty folded set")
    c = np.asarray(counts, dtype=np.float64)
    mu = c.mean()
    return -float(np.sum((c - mu) ** 2)) / float(n_values)


def cost(folded: FoldedSet, n_bins=None) -> float:
    """Negative spread of the folded histogram: J = -(1/N) sum_j (c_j - mu)^2
    with mu the mean bin count and N the number of folded tags.

    Always <= 0, and 0 exactly when every bin holds the same count (the
    folded set carries no timing structure at this frequency). More sharply
    peaked histograms give lower J, so minimizing J over the demodulation
    frequency locks onto the source period.
    """
    if len(folded) == 0:
        raise TagStreamError("cost needs a non-empty folded set")
    h = histogram(folded, n_bins)
    return cost_from_counts(h.counts, len(folded))


@dataclass(frozen=True)
class OptimizeOptions:
    """Knobs for the 1-D simplex refinement.

    The pre-scan evaluates the cost on a coarse grid around the seed and
    starts the simplex from the best point; it covers seeds that sit outside
    the central cost lobe (e.g. straight from a coarse FFT bin). Frames
    seeded from an already-converged neighbour can turn it off.
    """

    n_bins: int = None
    spread_hz: float = 50.0
    tol_hz: float = 1.0
    max_iter: int = 200
    min_tags: int = MIN_TAGS_DEFAULT
    prescan_span_hz: float = 240.0
    prescan_step_hz: float = None   # default 0.4 / frame length


DEFAULT_OPTIONS = OptimizeOptions()


def optimize_detuning(stream: TagStream, f_init_hz: float, frame_ps=None,
                      options: OptimizeOptions = DEFAULT_OPTIONS) -> DemodEstimate:
    """Refine a frequency estimate by minimizing the folded-histogram cost
    over one frame with a 1-D Nelder-Mead simplex.

    Simplex parameters: initial spread ``spread_hz``, reflection/expansion/
    contraction 1/2/0.5, shrink 0.5; converged when the simplex extent drops
    below ``tol_hz`` within ``max_iter`` iterations. The returned estimate
    keeps ``f_init_hz`` as f0 and reports the refinement as detuning; status
    is Failed when the simplex does not converge or does not improve on the
    seed cost (flat or structureless frame).
    """
    if frame_ps is None:
        frame_ps = (0, min(stream.duration_ps, FRAME_DEFAULT_PS))
    frame_ps = (int(frame_ps[0]), int(frame_ps[1]))
    if not (0 <= frame_ps[0] < frame_ps[1] <= stream.duration_ps):
        raise TagStreamError("frame must lie inside the stream")
    lo, hi = stream.window_indices(*frame_ps)
    times = stream.t[lo:hi]
    if times.size < options.min_tags:
        return DemodEstimate(f_init_hz, 0.0, frame_ps, 0.0, EstimateStatus.FAILED,
                             f"only {times.size} tags in frame "
                             f"(need {options.min_tags})")
    frame_len_s = (frame_ps[1] - frame_ps[0]) * 1e-12
    cache = {}

    def j(f: float) -> float:
        if f not in cache:
            cache[f] = cost(fold(times, f), options.n_bins)
        return cache[f]

    x0 = float(f_init_hz)
    spread = float(options.spread_hz)
    if options.prescan_span_hz and options.prescan_span_hz > 0.0:
        step = options.prescan_step_hz or 0.4 / frame_len_s
        offsets = np.arange(0.0, options.prescan_span_hz + 0.5 * step, step)
        grid = np.unique(np.concatenate([x0 - offsets[::-1], x0 + offsets]))
        grid = grid[grid > 0.0]
        if grid.size:
            x0 = float(min(grid, key=j))
            spread = min(spread, 0.5 * step)

    a, b = x0, x0 + spread
    ja, jb = j(a), j(b)
    converged = False
    for _ in range(int(options.max_iter)):
        if ja > jb:
            a, b, ja, jb = b, a, jb, ja
        if abs(a - b) < options.tol_hz:
            converged = True
            break
        xr = 2.0 * a - b          # reflection
        jr = j(xr)
        if jr < ja:
            xe = 3.0 * a - 2.0 * b    # expansion
            je = j(xe)
            b, jb = (xe, je) if je < jr else (xr, jr)
        elif jr < jb:
            xc = a + 0.5 * (xr - a)   # outside contraction
            jc = j(xc)
            if jc <= jr:
                b, jb = xc, jc
            else:
                b, jb = a + 0.5 * (b - a), j(a + 0.5 * (b - a))  # shrink
        else:
            xc = a + 0.5 * (b - a)    # inside contraction
            jc = j(xc)
            if jc < jb:
                b, jb = xc, jc
            else:
                b, jb = a + 0.5 * (b - a), j(a + 0.5 * (b - a))  # shrink
    best = min(cache, key=cache.get)
    j_best = cache[best]
    j_seed = j(float(f_init_hz))
    if not converged:
        status, note = EstimateStatus.FAILED, \
            f"simplex did not converge within {options.max_iter} iterations"
    elif j_best > j_seed:
        status, note = EstimateStatus.FAILED, "no improvement over the seed cost"
    else:
        status, note = EstimateStatus.OPTIMIZED, ""
    return DemodEstimate(float(f_init_hz), best - float(f_init_hz), frame_ps,
                         j_best, status, note)


def track_drift(stream: TagStream, f0_hz: float,
                frame_len_ps: int = FRAME_DEFAULT_PS,
                overlap_ps: int = OVERLAP_DEFAULT_PS,
                options: OptimizeOptions = DEFAULT_OPTIONS,
                t_start_ps: int = 0, t_end_ps=None) -> DriftTrace:
    """Per-frame detuning across the stream from overlapping sliding frames.

    Frames are ``frame_len_ps`` long, advancing by frame length minus
    overlap. The first frame is seeded with ``f0_hz`` (pre-scan active per
    ``options``); later frames are seeded with the previous converged result,
    pre-scan off, since they start inside the central cost lobe. A failed
    frame carries the previous detuning forward and is flagged 'carried';
    a failed first frame aborts the whole trace.
    """
    frame_len_ps = int(frame_len_ps)
    overlap_ps = int(overlap_ps)
    step = frame_len_ps - overlap_ps
    if frame_len_ps <= 0 or step <= 0:
        raise TagStreamError("need frame_len > overlap >= 0")
    if t_end_ps is None:
        t_end_ps = stream.duration_ps
    t_end_ps = int(t_end_ps)
    starts = range(int(t_start_ps), t_end_ps - frame_len_ps + 1, step)
    if not len(starts):
        raise TagStreamError("stream shorter than one frame")
    centers, detunings, costs, statuses = [], [], [], []
    seeded = replace(options)
    follow = replace(options, prescan_span_hz=0.0)
    f_seed = float(f0_hz)
    for i, start in enumerate(starts):
        frame = (start, start + frame_len_ps)
        est = optimize_detuning(stream, f_seed, frame,
                                seeded if i == 0 else follow)
        if est.status is EstimateStatus.OPTIMIZED:
            f_seed = est.frequency_hz
            detunings.append(est.frequency_hz - f0_hz)
            costs.append(est.cost)
            statuses.append("ok")
        else:
            if i == 0:
                raise RecoveryError(f"first tracking frame failed: {est.note}")
            detunings.append(detunings[-1])
            costs.append(np.nan)
            statuses.append("carried")
        centers.append(start + frame_len_ps // 2)
    return DriftTrace(float(f0_hz), frame_len_ps, step,
                      np.asarray(centers, dtype=np.int64),
                      np.asarray(detunings, dtype=np.float64),
                      np.asarray(costs, dtype=np.float64), tuple(statuses))


@dataclass(frozen=True)
class RecoverConfig:
    """End-to-end recovery settings (defaults follow the module constants)."""

    t_int_s: float = T_INT_DEFAULT_S
    sample_period_ps: int = SAMPLE_PERIOD_DEFAULT_PS
    search_band_hz: tuple = None
    n_bins: int = None
    min_tags: int = MIN_TAGS_DEFAULT
    frame_len_ps: int = FRAME_DEFAULT_PS
    overlap_ps: int = OVERLAP_DEFAULT_PS
    revalidate_interval_s: float = 1.0
    target_uncertainty_hz: float = 0.01
    max_rungs: int = 8
    track: bool = True
    optimize_options: OptimizeOptions = DEFAULT_OPTIONS


def recover(stream: TagStream, config: RecoverConfig = None):
    """Full clock recovery: spectral estimate, drift-based frequency
    correction, periodic re-validation, and (optionally) a drift trace.

    The correction step measures the folded-pattern shift between adjacent
    frames and converts it to a frequency offset, starting with frames short
    enough that the worst-case residual cannot wrap the pattern by half a
    period, then growing the frame span by a fixed factor per rung (each
    rung shrinks the frequency residual by that factor). Re-validation then
    compares frames one ``revalidate_interval_s`` apart and re-corrects
    whenever the predicted time error exceeds a quarter period.

    Returns ``(estimate, trace)``; on failure the estimate carries status
    Failed and the failing stage in its note, with an empty trace.
    """
    cfg = config or RecoverConfig()
    est = fft_coarse_estimate(stream, cfg.t_int_s, cfg.sample_period_ps,
                              cfg.search_band_hz, cfg.min_tags)
    if est.status is EstimateStatus.FAILED:
        return (replace(est, note=f"fft stage: {est.note}"),
                _empty_trace(est.f0_hz))
    f = est.f0_hz
    duration_s = stream.duration_ps * 1e-12
    rate = stream.detection_rate()
    # uncertainty after the FFT stage: one bin, with margin
    u = 1.2 / cfg.t_int_s
    min_span_s = 1.5 * cfg.min_tags / rate if rate > 0 else np.inf
    notes = []
    # first span keeps the worst-case FFT residual under a third of a
    # period; later spans grow by a fixed factor, so a shift estimate that
    # erred by eps ps wraps the next measurement only when 16*eps exceeds
    # half a period (tens of ps, far beyond the correlation peak's actual
    # error at min_tags counts)
    span = 0.3 / u
    if min_span_s > span:
        if min_span_s * u > 0.45:
            return (DemodEstimate(est.f0_hz, f - est.f0_hz, est.frame_ps,
                                  est.cost, EstimateStatus.FAILED,
                                  "drift stage: too few tags to bridge the "
                                  f"FFT uncertainty ({u:.3g} Hz) without "
                                  "pattern wrap"),
                    _empty_trace(est.f0_hz))
        span = min_span_s
    span_capped = span >= duration_s / 2.0
    span = min(span, duration_s / 2.0)
    span_ps = int(span * 1e12)
    for rung in range(cfg.max_rungs):
        span_ps = int(span * 1e12)
        try:
            fd = measure_frame_drift(stream, f, (0, span_ps),
                                     (span_ps, 2 * span_ps), cfg.n_bins,
                                     cfg.min_tags)
        except RecoveryError as exc:
            return (DemodEstimate(est.f0_hz, f - est.f0_hz, est.frame_ps,
                                  est.cost, EstimateStatus.FAILED,
                                  f"drift stage: {exc}"),
                    _empty_trace(est.f0_hz))
        if fd.low_confidence:
            return (DemodEstimate(est.f0_hz, f - est.f0_hz, est.frame_ps,
                                  est.cost, EstimateStatus.FAILED,
                                  "drift stage: ambiguous correlation "
                                  f"(peak ratio {fd.peak_ratio:.2f})"),
                    _empty_trace(est.f0_hz))
        f = f - drift_offset(fd.delta_t_ps, span, f)
        # residual: sub-bin interpolation is good to a fraction of a bin
        bin_ps = (1e12 / f) / (cfg.n_bins or default_bin_count(1e12 / f))
        u = drift_offset(max(2.0, bin_ps / 3.0), span, f)
        notes.append(f"rung {rung}: span {span * 1e3:.3g} ms, "
                     f"shift {fd.delta_t_ps:+.1f} ps, residual ~{u:.3g} Hz")
        if u <= cfg.target_uncertainty_hz or span_capped:
            break
        span *= 16.0
        if span >= duration_s / 2.0:
            span = duration_s / 2.0
            span_capped = True
    # periodic re-validation against the first frame
    reval_ps = int(cfg.revalidate_interval_s * 1e12)
    frame_len = min(span_ps, int(5e10))
    if reval_ps > 0:
        t_check = reval_ps
        while t_check + frame_len <= stream.duration_ps:
            try:
                fd = measure_frame_drift(stream, f, (0, frame_len),
                                         (t_check, t_check + frame_len),
                                         cfg.n_bins, cfg.min_tags)
            except RecoveryError:
                break
            quarter = 0.25e12 / f
            if abs(fd.delta_t_ps) > quarter and not fd.low_confidence:
                f = f - drift_offset(fd.delta_t_ps, t_check * 1e-12, f)
                notes.append(f"revalidate at {t_check * 1e-12:.3g} s: "
                             f"re-corrected {fd.delta_t_ps:+.1f} ps")
            t_check += reval_ps
    if cfg.track:
        trace = track_drift(stream, f, cfg.frame_len_ps, cfg.overlap_ps,
                            cfg.optimize_options)
    else:
        trace = _empty_trace(f, cfg.frame_len_ps,
                             cfg.frame_len_ps - cfg.overlap_ps)
    frame = (0, stream.duration_ps)
    j = cost(fold(stream, f, window=(0, min(cfg.frame_len_ps,
                                            stream.duration_ps))), cfg.n_bins)
    final = DemodEstimate(est.f0_hz, f - est.f0_hz, frame, j,
                          EstimateStatus.OPTIMIZED, "; ".join(notes))
    return final, trace
