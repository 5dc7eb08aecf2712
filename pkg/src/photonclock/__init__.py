"""Clock analysis and recovery from single-photon detection time tags.

Subpackages:

- ``tagstream``: tag data model, file I/O, binarization, folding, histograms
- ``simulator``: statistical tag generator (beta inter-arrival model, time-bin
  source encoding, reference-clock noise injection)
- ``recovery``: FFT coarse estimate, drift measurement, histogram-variance
  cost, 1-D simplex refinement, sliding-window tracking, full pipeline
- ``demod``: time-bin demodulation, sequence alignment, QBER
- ``metrics``: time-error series, sync criterion, coherence-time Monte Carlo,
  one-decoy finite-key secret-key rate
- ``cli``: command-line front end
"""

from . import tagstream, simulator, recovery, demod, metrics
from .tagstream import (
    Channel, TimeTag, TagStream, FoldedSet, Histogram,
    load_tags, save_tags, binarize, fold, histogram, default_bin_count,
)
from .simulator import (
    BetaArrivalModel, SourceConfig, ClockNoiseModel,
    beta_pdf, fit_beta, beta_for_rate, sample_arrivals, make_sequence,
    encode_sequence, apply_clock_noise,
)
from .recovery import (
    EstimateStatus, DemodEstimate, DriftTrace, OptimizeOptions, RecoverConfig,
    fft_coarse_estimate, drift_offset, measure_frame_drift, cost,
    optimize_detuning, track_drift, recover, RecoveryError,
)
from .demod import DecodedStream, QberReport, demodulate, align_sequence, compute_qber
from .metrics import (
    TieSeries, CoherenceConfig, CoherenceResult, SkrReport,
    tie, check_criterion, coherence_time, skr,
)

__version__ = "0.1.0"
