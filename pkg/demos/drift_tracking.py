#!/usr/bin/env python3
"""Track a random-walking clock and compare the trace to the injected walk.

The reference clock wanders with a 30 Hz FWHM random walk. recover() anchors
the frequency and track_drift() follows the residual per sliding frame; the
same noise seed lets us regenerate the exact injected frequency path, so the
script can score the tracker against the truth. Writes drift_trace.csv with
both columns; pass --plot for a PNG.
"""

import argparse
import csv
import os

import numpy as np

from photonclock.simulator import (SourceConfig, make_sequence, sample_arrivals,
                                   encode_sequence, ClockNoiseModel,
                                   apply_clock_noise, sample_clock_noise)
from photonclock.recovery import recover, RecoverConfig

RATE_HZ = 500e3
DURATION_S = 3.0
RW_FWHM_HZ = 30.0
SEED = 9

here = os.path.dirname(os.path.abspath(__file__))

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--plot", action="store_true", help="save drift.png")
args = parser.parse_args()

src = SourceConfig(sequence=make_sequence(seed=SEED))
arrivals = sample_arrivals(RATE_HZ, DURATION_S, seed=[SEED, 0])
encoded, _ = encode_sequence(arrivals, src, error_prob=0.0, seed=[SEED, 1])
noise = ClockNoiseModel(RW_FWHM_HZ, 40.0, seed=[SEED, 2])
stream = apply_clock_noise(encoded, noise, nominal_hz=src.pulse_line_hz)
print(f"{len(stream)} tags over {DURATION_S} s, random walk "
      f"{RW_FWHM_HZ:g} Hz FWHM at 1 s")

estimate, trace = recover(stream, RecoverConfig(track=True))
print(f"anchor frequency {estimate.frequency_hz!r} Hz ({estimate.status.value})")
n_frames = len(trace.t_center_ps)
print(f"trace: {n_frames} frames of {trace.frame_len_ps / 1e9:g} ms "
      f"every {trace.step_ps / 1e9:g} ms")

# regenerate the injected frequency path at the same tag times; the apparent
# line the tracker sees is nominal + nu, so its detuning from the anchor is
# nu + (nominal - anchor)
disp, nu = sample_clock_noise(encoded.t, noise, src.pulse_line_hz,
                              rng=np.random.default_rng(noise.seed))
nu_at_frame = np.interp(trace.t_center_ps, encoded.t.astype(np.float64), nu)
expected = nu_at_frame + (src.pulse_line_hz - estimate.frequency_hz)

ok = np.array([s == "ok" for s in trace.status])
err = trace.detuning_hz[ok] - expected[ok]
rms = float(np.sqrt(np.mean(err ** 2)))
corr = float(np.corrcoef(trace.detuning_hz[ok], expected[ok])[0, 1])
print(f"tracker vs injected walk over {int(ok.sum())} good frames: "
      f"rms {rms:.2f} Hz, correlation {corr:.4f}")
print(f"walk span during the run: {nu.min():+.1f} .. {nu.max():+.1f} Hz")

out = os.path.join(here, "drift_trace.csv")
with open(out, "w", newline="") as fh:
    writer = csv.writer(fh)
    writer.writerow(["t_center_s", "tracked_detuning_hz", "true_offset_hz",
                     "status"])
    for t, d, e, s in zip(trace.t_center_ps, trace.detuning_hz, expected,
                          trace.status):
        writer.writerow([repr(t * 1e-12), repr(float(d)), repr(float(e)), s])
print(f"wrote {out}")

if args.plot:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t_s = trace.t_center_ps * 1e-12
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(t_s, expected, label="injected walk", lw=2)
    ax.plot(t_s[ok], trace.detuning_hz[ok], ".", ms=4, label="tracked")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("frequency offset from anchor [Hz]")
    ax.legend()
    fig.tight_layout()
    png = os.path.join(here, "drift.png")
    fig.savefig(png, dpi=120)
    print(f"saved {png}")
