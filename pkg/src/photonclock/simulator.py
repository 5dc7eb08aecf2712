"""Statistical tag-stream generator.

Three stages, each usable on its own: raw detection times from a beta
inter-arrival model, snapping to a repeating time-bin symbol sequence, and
reference-clock noise injection (frequency random walk plus white jitter).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .tagstream import Channel, TagStream, TagStreamError

DEFAULT_X0_S = 15e-9     # dead-time floor of the inter-arrival distribution
DEFAULT_SCALE_S = 1.0    # support width of the beta model
DEFAULT_QUBIT_RATE_HZ = 595e6
DEFAULT_PULSE_POSITIONS_PS = (0.0, 800.0)
DEFAULT_SEQUENCE_LENGTH = 4096
FWHM_TO_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))  # 2.3548...

Z_EARLY, Z_LATE, X_SYMBOL = 0, 1, 2


class SimulatorError(ValueError):
    """Invalid simulator parameters."""


@dataclass(frozen=True)
class BetaArrivalModel:
    """Beta-distributed inter-arrival gaps on (x0, x0 + s), times in seconds.

    alpha is fixed to 1 in practice, which makes the inverse CDF closed form:
    x = x0 + s * (1 - (1 - u)^(1/beta)).
    """

    beta: float
    alpha: float = 1.0
    x0: float = DEFAULT_X0_S
    s: float = DEFAULT_SCALE_S

    def __post_init__(self):
        if not (self.beta > 0 and self.alpha > 0 and self.s > 0 and self.x0 >= 0):
            raise SimulatorError("beta model needs alpha, beta, s > 0 and x0 >= 0")

    def mean_interarrival(self) -> float:
        """Model mean gap: x0 + s * alpha / (alpha + beta)."""
        return self.x0 + self.s * self.alpha / (self.alpha + self.beta)

    def pdf(self, x) -> np.ndarray:
        return beta_pdf(x, self)

    def sample(self, n: int, rng) -> np.ndarray:
        """Draw n gaps (seconds). alpha = 1 uses the closed-form inverse CDF."""
        if self.alpha == 1.0:
            u = rng.random(n)
            # 1 - (1-u)^(1/beta) via expm1/log1p to keep tiny gaps accurate
            frac = -np.expm1(np.log1p(-u) / self.beta)
            return self.x0 + self.s * frac
        return self.x0 + self.s * rng.beta(self.alpha, self.beta, size=n)


def beta_pdf(x, model: BetaArrivalModel) -> np.ndarray:
    """Density of the inter-arrival model, zero outside (x0, x0 + s).

    Evaluated in log space so large beta (narrow distributions) does not
    underflow. At x = x0 with alpha = 1 the limit beta / s is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    u = (x - model.x0) / model.s
    out = np.zeros_like(u)
    inside = (u >= 0.0) & (u < 1.0)
    if model.alpha == 1.0:
        lognorm = gammaln(model.alpha + model.beta) - gammaln(model.beta)
        with np.errstate(divide="ignore", invalid="ignore"):
            logpdf = lognorm + (model.beta - 1.0) * np.log1p(-u) - np.log(model.s)
        out[inside] = np.exp(logpdf[inside])
    else:
        lognorm = (gammaln(model.alpha + model.beta) - gammaln(model.alpha)
                   - gammaln(model.beta))
        strict = inside & (u > 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            logpdf = (lognorm + (model.alpha - 1.0) * np.log(u)
                      + (model.beta - 1.0) * np.log1p(-u) - np.log(model.s))
        out[strict] = np.exp(logpdf[strict])
    return out if out.ndim else float(out)


def fit_beta(samples, x0: float = DEFAULT_X0_S, s: float = DEFAULT_SCALE_S,
             min_samples: int = 1000) -> BetaArrivalModel:
    """Maximum-likelihood beta for alpha = 1: beta = N / sum(-ln(1 - u_i)).

    Rejects fewer than ``min_samples`` gaps (the fit is unstable) and any
    sample outside the support (x0, x0 + s).
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size < min_samples:
        raise SimulatorError(f"need at least {min_samples} samples, got {x.size}")
    u = (x - x0) / s
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise SimulatorError("samples must lie strictly inside (x0, x0 + s)")
    beta = x.size / float(np.sum(-np.log1p(-u)))
    return BetaArrivalModel(beta=beta, x0=x0, s=s)


def beta_for_rate(rate_hz: float, x0: float = DEFAULT_X0_S,
                  s: float = DEFAULT_SCALE_S, slope: float = None) -> BetaArrivalModel:
    """Model for a target detection rate via the linear map beta = rate * s.

    The map is a line through the origin (slope defaults to s); the model mean
    x0 + s/(1 + beta) then matches 1/rate to better than x0 * rate, i.e. under
    1% for rates up to ~660 kHz with the 15 ns floor. Rates at or above the
    dead-time ceiling 1/x0 are rejected.
    """
    rate = float(rate_hz)
    if not (rate > 0.0):
        raise SimulatorError("rate must be positive")
    if x0 > 0 and rate >= 1.0 / x0:
        raise SimulatorError(
            f"rate {rate:.3g} Hz at or above the dead-time ceiling {1.0 / x0:.3g} Hz")
    if slope is None:
        slope = s
    return BetaArrivalModel(beta=rate * slope, x0=x0, s=s)


def calibrate_beta_slope(traces, x0: float = DEFAULT_X0_S,
                         s: float = DEFAULT_SCALE_S) -> float:
    """Refit the beta-vs-rate slope from measured gap traces.

    ``traces`` is an iterable of (rate_hz, gap_samples). Each trace is fitted
    by :func:`fit_beta`; the slope is the least-squares line through the
    origin of fitted beta against rate.
    """
    rates, betas = [], []
    for rate, samples in traces:
        rates.append(float(rate))
        betas.append(fit_beta(samples, x0=x0, s=s).beta)
    rates = np.asarray(rates)
    betas = np.asarray(betas)
    if rates.size == 0:
        raise SimulatorError("no traces to calibrate from")
    return float(np.sum(rates * betas) / np.sum(rates * rates))


def sample_arrivals(rate_hz: float, duration_s: float, seed=None,
                    x0: float = DEFAULT_X0_S, s: float = DEFAULT_SCALE_S) -> TagStream:
    """Unlabeled detection times over [0, duration) at the requested mean rate.

    Gaps are drawn from :func:`beta_for_rate`, so consecutive tags always
    differ by more than the dead-time floor. Deterministic for a given seed.
    """
    if not (duration_s > 0.0):
        raise SimulatorError("duration must be positive")
    model = beta_for_rate(rate_hz, x0=x0, s=s)
    rng = np.random.default_rng(seed)
    mean = model.mean_interarrival()
    times = []
    total = 0.0
    remaining = duration_s
    while remaining > 0.0:
        n = int(remaining / mean * 1.02 + 10.0 * math.sqrt(remaining / mean) + 100)
        gaps = model.sample(n, rng)
        chunk = total + np.cumsum(gaps)
        times.append(chunk)
        total = float(chunk[-1])
        remaining = duration_s - total
    t_s = np.concatenate(times) if len(times) > 1 else times[0]
    duration_ps = int(round(duration_s * 1e12))
    t_ps = np.round(t_s * 1e12).astype(np.int64)
    t_ps = t_ps[t_ps < duration_ps]
    channel = np.full(t_ps.size, int(Channel.UNKNOWN), dtype=np.uint8)
    meta = {"nominal_rate_hz": repr(rate_hz), "generator": "beta"}
    return TagStream(t_ps, channel, duration_ps, meta)


def make_sequence(length: int = DEFAULT_SEQUENCE_LENGTH, seed=None,
                  p_z: float = 0.5) -> np.ndarray:
    """Random repeating symbol pattern of {Z-early, Z-late, X}.

    Z symbols occur with probability p_z (split evenly between early and
    late); length must be a power of two.
    """
    if length < 1 or (length & (length - 1)) != 0:
        raise SimulatorError("sequence length must be a power of two")
    if not (0.0 <= p_z <= 1.0):
        raise SimulatorError("p_z must be in [0, 1]")
    rng = np.random.default_rng(seed)
    u = rng.random(length)
    seq = np.full(length, X_SYMBOL, dtype=np.uint8)
    z_mask = u < p_z
    bits = rng.integers(0, 2, size=length)
    seq[z_mask] = bits[z_mask]
    return seq


@dataclass(frozen=True)
class SourceConfig:
    """Transmitter description: qubit rate, intra-qubit pulse slots, pattern.

    ``pulse_fwhm_ps`` is descriptive (the optical pulse width is part of what
    the white jitter term models); ``mu_signal``/``mu_decoy`` are carried for
    key-rate reporting, photon statistics are not simulated.
    """

    qubit_rate_hz: float = DEFAULT_QUBIT_RATE_HZ
    pulse_positions_ps: tuple = DEFAULT_PULSE_POSITIONS_PS
    sequence: np.ndarray = None
    pulse_fwhm_ps: float = 100.0
    mu_signal: float = 0.7
    mu_decoy: float = 0.3

    def __post_init__(self):
        if not (self.qubit_rate_hz > 0):
            raise SimulatorError("qubit rate must be positive")
        pos = tuple(float(p) for p in self.pulse_positions_ps)
        if len(pos) < 1 or any(b <= a for a, b in zip(pos, pos[1:])):
            raise SimulatorError("pulse positions must be strictly increasing")
        if pos[0] < 0.0 or pos[-1] >= self.qubit_period_ps:
            raise SimulatorError("pulse positions must lie inside one qubit period")
        object.__setattr__(self, "pulse_positions_ps", pos)
        seq = self.sequence
        if seq is None:
            seq = make_sequence(DEFAULT_SEQUENCE_LENGTH, seed=0)
        seq = np.ascontiguousarray(seq, dtype=np.uint8)
        if seq.size < 1 or (seq.size & (seq.size - 1)) != 0:
            raise SimulatorError("sequence length must be a power of two")
        if np.any(seq > X_SYMBOL):
            raise SimulatorError("sequence symbols must be 0 (Z-early), 1 (Z-late), 2 (X)")
        seq.flags.writeable = False
        object.__setattr__(self, "sequence", seq)

    @property
    def qubit_period_ps(self) -> float:
        return 1e12 / self.qubit_rate_hz

    @property
    def pulses_per_qubit(self) -> int:
        return len(self.pulse_positions_ps)

    @property
    def pulse_line_hz(self) -> float:
        """Frequency of the dominant spectral line (pulses-per-qubit harmonic)."""
        return self.pulses_per_qubit * self.qubit_rate_hz


@dataclass(frozen=True)
class EncodeTruth:
    """Ground truth written alongside an encoded stream, one entry per tag."""

    qubit_index: np.ndarray   # absolute qubit counter
    symbol: np.ndarray        # transmitted symbol at that qubit
    bit: np.ndarray           # true Z bit, -1 for X symbols
    flipped: np.ndarray       # True where an error flip was injected
    sequence: np.ndarray      # the repeating pattern itself
    qubit_rate_hz: float
    pulse_positions_ps: tuple

    def to_dict(self) -> dict:
        return {
            "qubit_rate_hz": self.qubit_rate_hz,
            "pulse_positions_ps": list(self.pulse_positions_ps),
            "sequence": self.sequence.tolist(),
            "qubit_index": self.qubit_index.tolist(),
            "symbol": self.symbol.tolist(),
            "bit": self.bit.tolist(),
            "flipped": self.flipped.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncodeTruth":
        return cls(
            qubit_index=np.asarray(d["qubit_index"], dtype=np.int64),
            symbol=np.asarray(d["symbol"], dtype=np.uint8),
            bit=np.asarray(d["bit"], dtype=np.int8),
            flipped=np.asarray(d["flipped"], dtype=bool),
            sequence=np.asarray(d["sequence"], dtype=np.uint8),
            qubit_rate_hz=float(d["qubit_rate_hz"]),
            pulse_positions_ps=tuple(d["pulse_positions_ps"]),
        )


def _qubit_indices(t_ps: np.ndarray, period_ps: float) -> np.ndarray:
    """floor(t / period) with enough precision for the whole int64 range."""
    work = np.longdouble if (t_ps.size and int(t_ps.max()) > 2**45) else np.float64
    return np.floor(t_ps.astype(work) / work(period_ps)).astype(np.int64)


def encode_sequence(arrivals: TagStream, src: SourceConfig,
                    error_prob: float = 0.0, seed=None):
    """Snap raw arrivals onto the source's legal pulse positions.

    Each arrival selects the qubit containing it (floor(t / qubit period));
    the repeating sequence gives the symbol; the symbol gives the pulse slot.
    Z tags flip to the opposite slot with probability ``error_prob`` (channel
    label follows the measured, possibly flipped, slot; the truth record keeps
    the transmitted bit). X tags land in either slot and are labeled X.

    Returns (encoded stream, :class:`EncodeTruth`).
    """
    if not (0.0 <= error_prob <= 1.0):
        raise SimulatorError("error_prob must be in [0, 1]")
    if src.pulses_per_qubit != 2:
        raise SimulatorError("encoding needs a two-slot (early/late) source")
    rng = np.random.default_rng(seed)
    period = src.qubit_period_ps
    n = len(arrivals)
    k = _qubit_indices(arrivals.t, period)
    seq_len = src.sequence.size
    symbol = src.sequence[(k % seq_len).astype(np.intp)]

    bit = np.where(symbol == X_SYMBOL, -1, symbol).astype(np.int8)
    slot = np.empty(n, dtype=np.int8)
    x_mask = symbol == X_SYMBOL
    slot[x_mask] = rng.integers(0, 2, size=int(x_mask.sum()))
    z_mask = ~x_mask
    flipped = np.zeros(n, dtype=bool)
    flipped[z_mask] = rng.random(int(z_mask.sum())) < error_prob
    slot[z_mask] = np.where(flipped[z_mask], 1 - symbol[z_mask], symbol[z_mask])

    positions = np.asarray(src.pulse_positions_ps)
    t_out = np.round(k.astype(np.float64) * period
                     + positions[slot.astype(np.intp)]).astype(np.int64)
    if n > 1 and np.any(np.diff(t_out) < 0):
        # cannot happen while gaps exceed several qubit periods; refuse rather
        # than silently reorder truth rows
        raise SimulatorError("arrival gaps too small to encode monotonically")
    channel = np.empty(n, dtype=np.uint8)
    channel[x_mask] = int(Channel.X)
    channel[z_mask] = np.where(slot[z_mask] == 0, int(Channel.Z0), int(Channel.Z1))

    duration = max(arrivals.duration_ps, int(t_out[-1]) if n else 0)
    meta = dict(arrivals.meta)
    meta.update({
        "qubit_rate_hz": repr(src.qubit_rate_hz),
        "nominal_pulse_hz": repr(src.pulse_line_hz),
        "encoded": "true",
    })
    stream = TagStream(t_out, channel, duration, meta)
    truth = EncodeTruth(qubit_index=k, symbol=symbol.astype(np.uint8), bit=bit,
                        flipped=flipped, sequence=src.sequence,
                        qubit_rate_hz=src.qubit_rate_hz,
                        pulse_positions_ps=src.pulse_positions_ps)
    return stream, truth


@dataclass(frozen=True)
class ClockNoiseModel:
    """Reference-clock imperfection: frequency random walk + white jitter.

    ``rw_fwhm_hz`` is the FWHM of the demodulation-line frequency offset
    after 1 s of walking (step variance per second = (fwhm / 2.3548)^2);
    ``white_sigma_ps`` is i.i.d. Gaussian jitter per tag.
    """

    rw_fwhm_hz: float = 0.0
    white_sigma_ps: float = 40.0
    seed: object = None

    def __post_init__(self):
        if self.rw_fwhm_hz < 0 or self.white_sigma_ps < 0:
            raise SimulatorError("noise magnitudes must be non-negative")


def sample_clock_noise(t_ps: np.ndarray, noise: ClockNoiseModel,
                       nominal_hz: float, rng=None):
    """Per-tag displacement (ps) and the underlying frequency-offset path (Hz).

    ``nu_hz`` is the offset of the apparent line frequency: it performs a
    Gaussian random walk sampled at tag times (variance rate
    (rw_fwhm/2.3548)^2 per second, starting at 0 at t = 0). A clock running
    fast by nu emits its pulses early, so the displacement is minus the Euler
    time integral of nu over the nominal line frequency, plus white jitter.
    Returns (displacement_ps, nu_hz).
    """
    if rng is None:
        rng = np.random.default_rng(noise.seed)
    t_s = np.asarray(t_ps, dtype=np.float64) * 1e-12
    n = t_s.size
    disp_ps = np.zeros(n)
    nu = np.zeros(n)
    if n and noise.rw_fwhm_hz > 0.0:
        if not (nominal_hz > 0):
            raise SimulatorError("random-walk noise needs the nominal line frequency")
        sigma_f = noise.rw_fwhm_hz / FWHM_TO_SIGMA
        gaps = np.diff(t_s, prepend=0.0)
        steps = rng.standard_normal(n) * sigma_f * np.sqrt(np.maximum(gaps, 0.0))
        nu = np.cumsum(steps)
        # Euler integral with the left endpoint: W_i = sum nu_{i-1} * gap_i,
        # so successive differences recover nu exactly
        nu_prev = np.concatenate(([0.0], nu[:-1]))
        w_s = np.cumsum(nu_prev * gaps) / nominal_hz
        disp_ps = -w_s * 1e12
    if n and noise.white_sigma_ps > 0.0:
        disp_ps = disp_ps + rng.standard_normal(n) * noise.white_sigma_ps
    return disp_ps, nu


def apply_clock_noise(stream: TagStream, noise: ClockNoiseModel,
                      nominal_hz: float = None) -> TagStream:
    """Jitter a stream with the given noise model (deterministic per seed).

    ``nominal_hz`` (the demodulated line frequency the random walk refers to)
    defaults to the stream's ``nominal_pulse_hz`` meta entry. Zero noise
    returns identical tag times. Output is re-sorted if jitter reorders
    closely spaced tags and clamped at t = 0.
    """
    if nominal_hz is None:
        nominal_hz = float(stream.meta.get("nominal_pulse_hz", 0.0) or 0.0)
    rng = np.random.default_rng(noise.seed)
    disp, _ = sample_clock_noise(stream.t, noise, nominal_hz, rng)
    t = np.round(stream.t + disp).astype(np.int64)
    np.maximum(t, 0, out=t)
    ch = stream.channel.copy()
    if t.size > 1 and np.any(np.diff(t) < 0):
        order = np.argsort(t, kind="stable")
        t, ch = t[order], ch[order]
    duration = max(stream.duration_ps, int(t[-1]) if t.size else 0)
    meta = dict(stream.meta)
    meta.update({"rw_fwhm_hz": repr(noise.rw_fwhm_hz),
                 "white_sigma_ps": repr(noise.white_sigma_ps)})
    return TagStream(t, ch, duration, meta)


def inject_dark_counts(stream: TagStream, dark_rate_hz: float, seed=None) -> TagStream:
    """Merge uniform background tags into a stream (default model: none).

    Darks are uniform in time; labels follow a 50:50 basis split (Z darks get
    a random slot label, since the Z detector does not know the bit).
    """
    if dark_rate_hz < 0:
        raise SimulatorError("dark rate must be non-negative")
    if dark_rate_hz == 0:
        return stream
    rng = np.random.default_rng(seed)
    duration = stream.duration_ps
    n = rng.poisson(dark_rate_hz * duration * 1e-12)
    if n == 0:
        return stream
    t_dark = np.sort(rng.integers(0, duration, size=n, dtype=np.int64))
    ch_dark = rng.choice(
        [int(Channel.Z0), int(Channel.Z1), int(Channel.X)],
        size=n, p=[0.25, 0.25, 0.5]).astype(np.uint8)
    t = np.concatenate([stream.t, t_dark])
    ch = np.concatenate([stream.channel, ch_dark])
    order = np.argsort(t, kind="stable")
    meta = dict(stream.meta)
    meta["dark_rate_hz"] = repr(dark_rate_hz)
    return TagStream(t[order], ch[order], duration, meta)
