"""Command-line interface.

Subcommands::

    simulate    synthesize an encoded, clock-noisy tag stream plus ground truth
    recover     full frequency recovery on a tag file
    track       sliding-frame drift trace around an anchor frequency
    qber        demodulate, align against the truth pattern, report QBER
    coherence   Monte-Carlo sweep of QBER survival time under clock noise
    skr         one-decoy finite-key secret-key rate from sifted counts

Most options can also come from ``--config FILE`` holding ``key = value``
lines (``#`` starts a comment); keys match the long flag names with
underscores, unknown keys are rejected, and explicit flags win over the
file. Exit codes: 0 success, 2 bad input or configuration, 3 processing
failure (recovery, alignment, or a quality gate), 4 file I/O.
"""

import argparse
import csv
import json
import sys

import numpy as np

from .tagstream import TagStreamError, load_tags, save_tags
from .simulator import (SourceConfig, ClockNoiseModel, SimulatorError,
                        sample_arrivals, make_sequence, encode_sequence,
                        apply_clock_noise, inject_dark_counts)
from .recovery import (RecoveryError, RecoverConfig, OptimizeOptions,
                       DemodEstimate, EstimateStatus, recover, track_drift)
from .demod import (AlignmentError, demodulate, align_sequence, compute_qber,
                    qber_timeline, save_qber_csv)
from .metrics import CoherenceConfig, coherence_time, save_coherence_csv, skr

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_PROCESSING = 3
EXIT_IO = 4


class CliError(Exception):
    """Processing failure that should map to exit code 3."""


def _boolean(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file into a string dict."""
    out = {}
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise TagStreamError(
                    f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _merge_config(args: argparse.Namespace, casters: dict) -> dict:
    """Defaults, then config file, then explicit flags; returns typed dict."""
    merged = {k: default for k, (_, default) in casters.items()}
    if getattr(args, "config", None):
        for key, text in read_config(args.config).items():
            if key not in casters:
                raise TagStreamError(f"unknown config key {key!r}")
            merged[key] = casters[key][0](text)
    for key, (cast, _) in casters.items():
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = cast(value)
    return merged


def _tag_format(path, override=None) -> str:
    if override:
        return override
    return "csv" if str(path).endswith(".csv") else "binary"


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _load_reference(path):
    with open(path, "r") as fh:
        doc = json.load(fh)
    truth = doc.get("truth", doc)
    if "sequence" not in truth:
        raise TagStreamError(f"{path}: no 'sequence' entry")
    return np.asarray(truth["sequence"], dtype=np.uint8), doc


# --- simulate ----------------------------------------------------------------

SIMULATE_KEYS = {
    "rate_hz": (float, 500e3),
    "duration_s": (float, 1.0),
    "seed": (int, 0),
    "error_prob": (float, 0.0),
    "qubit_rate_hz": (float, None),
    "sequence_length": (int, 4096),
    "sequence_seed": (int, 0),
    "p_z": (float, 0.5),
    "encode": (_boolean, True),
    "rw_fwhm_hz": (float, 0.0),
    "white_sigma_ps": (float, 40.0),
    "dark_rate_hz": (float, 0.0),
}


def _cmd_simulate(args) -> int:
    cfg = _merge_config(args, SIMULATE_KEYS)
    stream = sample_arrivals(cfg["rate_hz"], cfg["duration_s"],
                             seed=[cfg["seed"], 0])
    truth = None
    src = None
    if cfg["encode"]:
        src_kwargs = {"sequence": make_sequence(cfg["sequence_length"],
                                                seed=cfg["sequence_seed"],
                                                p_z=cfg["p_z"])}
        if cfg["qubit_rate_hz"] is not None:
            src_kwargs["qubit_rate_hz"] = cfg["qubit_rate_hz"]
        src = SourceConfig(**src_kwargs)
        stream, truth = encode_sequence(stream, src, cfg["error_prob"],
                                        seed=[cfg["seed"], 1])
    if cfg["rw_fwhm_hz"] > 0.0 or cfg["white_sigma_ps"] > 0.0:
        noise = ClockNoiseModel(cfg["rw_fwhm_hz"], cfg["white_sigma_ps"],
                                seed=[cfg["seed"], 2])
        nominal = src.pulse_line_hz if src is not None else cfg["rate_hz"]
        stream = apply_clock_noise(stream, noise, nominal_hz=nominal)
    if cfg["dark_rate_hz"] > 0.0:
        stream = inject_dark_counts(stream, cfg["dark_rate_hz"],
                                    seed=[cfg["seed"], 3])
    save_tags(stream, args.out, _tag_format(args.out, args.format))
    if args.truth:
        if truth is None:
            raise TagStreamError("--truth requires encode = true")
        _write_json(args.truth, {"params": cfg, "truth": truth.to_dict()})
    print(f"wrote {len(stream)} tags over {stream.duration_ps / 1e12:.6g} s "
          f"to {args.out}")
    return EXIT_OK


# --- recover -----------------------------------------------------------------

RECOVER_KEYS = {
    "t_int_s": (float, None),
    "sample_period_ps": (int, None),
    "band_lo_hz": (float, None),
    "band_hi_hz": (float, None),
    "n_bins": (int, None),
    "min_tags": (int, None),
    "frame_len_ms": (float, None),
    "overlap_ms": (float, None),
    "revalidate_interval_s": (float, None),
    "track": (_boolean, None),
    "spread_hz": (float, None),
    "tol_hz": (float, None),
    "max_iter": (int, None),
}


def _recover_config(cfg: dict) -> RecoverConfig:
    kwargs = {}
    for key in ("t_int_s", "sample_period_ps", "n_bins", "min_tags",
                "revalidate_interval_s", "track"):
        if cfg[key] is not None:
            kwargs[key] = cfg[key]
    if (cfg["band_lo_hz"] is None) != (cfg["band_hi_hz"] is None):
        raise TagStreamError("band_lo_hz and band_hi_hz must come together")
    if cfg["band_lo_hz"] is not None:
        kwargs["search_band_hz"] = (cfg["band_lo_hz"], cfg["band_hi_hz"])
    if cfg["frame_len_ms"] is not None:
        kwargs["frame_len_ps"] = int(round(cfg["frame_len_ms"] * 1e9))
    if cfg["overlap_ms"] is not None:
        kwargs["overlap_ps"] = int(round(cfg["overlap_ms"] * 1e9))
    opt = {}
    for key, name in (("spread_hz", "spread_hz"), ("tol_hz", "tol_hz"),
                      ("max_iter", "max_iter")):
        if cfg[key] is not None:
            opt[name] = cfg[key]
    if cfg["min_tags"] is not None:
        opt["min_tags"] = cfg["min_tags"]
    if cfg["n_bins"] is not None:
        opt["n_bins"] = cfg["n_bins"]
    if opt:
        kwargs["optimize_options"] = OptimizeOptions(**opt)
    return RecoverConfig(**kwargs)


def _cmd_recover(args) -> int:
    cfg = _merge_config(args, RECOVER_KEYS)
    stream = load_tags(args.tags, _tag_format(args.tags, args.format))
    estimate, trace = recover(stream, _recover_config(cfg))
    if args.estimate:
        _write_json(args.estimate, estimate.to_dict())
    if args.trace and len(trace.t_center_ps):
        trace.save_csv(args.trace)
    if estimate.status is EstimateStatus.FAILED:
        print(f"recovery failed: {estimate.note}", file=sys.stderr)
        return EXIT_PROCESSING
    print(f"frequency {estimate.frequency_hz!r} Hz "
          f"(coarse {estimate.f0_hz!r} Hz, detuning {estimate.detuning_hz:+.6g} Hz, "
          f"status {estimate.status.value})")
    return EXIT_OK


# --- track -------------------------------------------------------------------

TRACK_KEYS = {
    "frame_len_ms": (float, 30.0),
    "overlap_ms": (float, 20.0),
    "min_tags": (int, 100),
    "n_bins": (int, None),
}


def _cmd_track(args) -> int:
    cfg = _merge_config(args, TRACK_KEYS)
    if (args.f0 is None) == (args.estimate is None):
        raise TagStreamError("need exactly one of --f0 or --estimate")
    if args.estimate is not None:
        with open(args.estimate, "r") as fh:
            est = DemodEstimate.from_dict(json.load(fh))
        if est.status is EstimateStatus.FAILED:
            raise CliError("estimate file records a failed recovery")
        f0 = est.frequency_hz
    else:
        f0 = float(args.f0)
    stream = load_tags(args.tags, _tag_format(args.tags, args.format))
    options = OptimizeOptions(min_tags=cfg["min_tags"], n_bins=cfg["n_bins"])
    trace = track_drift(stream, f0,
                        frame_len_ps=int(round(cfg["frame_len_ms"] * 1e9)),
                        overlap_ps=int(round(cfg["overlap_ms"] * 1e9)),
                        options=options)
    trace.save_csv(args.out)
    print(f"wrote {len(trace.t_center_ps)} frames to {args.out}")
    return EXIT_OK


# --- qber --------------------------------------------------------------------

QBER_KEYS = {
    "sift_window_ps": (float, 200.0),
    "qubit_rate_hz": (float, None),
    "min_align_records": (int, 1000),
    "min_agreement": (float, 0.6),
    "window_ms": (float, None),
    "max_qber": (float, None),
    "loss_db": (float, None),
}


def _cmd_qber(args) -> int:
    cfg = _merge_config(args, QBER_KEYS)
    if (args.f0 is None) == (args.estimate is None):
        raise TagStreamError("need exactly one of --f0 or --estimate")
    stream = load_tags(args.tags, _tag_format(args.tags, args.format))
    reference, doc = _load_reference(args.truth)
    truth = doc.get("truth", doc)
    src_kwargs = {"sequence": reference}
    if cfg["qubit_rate_hz"] is not None:
        src_kwargs["qubit_rate_hz"] = cfg["qubit_rate_hz"]
    elif "qubit_rate_hz" in truth:
        src_kwargs["qubit_rate_hz"] = float(truth["qubit_rate_hz"])
    if "pulse_positions_ps" in truth:
        src_kwargs["pulse_positions_ps"] = tuple(truth["pulse_positions_ps"])
    src = SourceConfig(**src_kwargs)
    if args.estimate is not None:
        with open(args.estimate, "r") as fh:
            frequency = DemodEstimate.from_dict(json.load(fh))
    else:
        frequency = float(args.f0)
    decoded = demodulate(stream, frequency, src,
                         sift_window_ps=cfg["sift_window_ps"])
    alignment = align_sequence(decoded, reference,
                               min_records=cfg["min_align_records"],
                               min_agreement=cfg["min_agreement"])
    report = compute_qber(decoded, reference, alignment.offset)
    if args.out:
        save_qber_csv(report, args.out, loss_db=cfg["loss_db"])
    if args.windows:
        if cfg["window_ms"] is None:
            raise TagStreamError("--windows needs window_ms")
        centers, qber, sifted = qber_timeline(
            decoded, reference, alignment.offset,
            int(round(cfg["window_ms"] * 1e9)))
        with open(args.windows, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t_center_ps", "qber", "sifted"])
            for t, q, n in zip(centers, qber, sifted):
                writer.writerow([int(t), repr(float(q)), int(n)])
    print(f"qber {report.qber:.6f} ({report.error_count}/{report.sifted_count} "
          f"sifted, pattern offset {alignment.offset}, "
          f"agreement {alignment.agreement:.4f})")
    if cfg["max_qber"] is not None and report.qber > cfg["max_qber"]:
        print(f"qber {report.qber:.6f} exceeds limit {cfg['max_qber']:.6f}",
              file=sys.stderr)
        return EXIT_PROCESSING
    return EXIT_OK


# --- coherence ---------------------------------------------------------------

COHERENCE_KEYS = {
    "noise_fwhm_hz": (str, "3.0"),
    "frame_ms": (str, "30.0"),
    "estimators": (str, "optimized"),
    "rate_hz": (float, 500e3),
    "runs": (int, 20),
    "seed": (int, 0),
    "duration_s": (float, 5.0),
    "qber_window_s": (float, 0.1),
    "threshold": (float, 0.11),
    "white_sigma_ps": (float, 40.0),
}


def _float_list(text):
    return [float(tok) for tok in str(text).split(",") if tok.strip()]


def _cmd_coherence(args) -> int:
    cfg = _merge_config(args, COHERENCE_KEYS)
    estimators = [tok.strip() for tok in cfg["estimators"].split(",")
                  if tok.strip()]
    results = []
    for noise in _float_list(cfg["noise_fwhm_hz"]):
        for frame_ms in _float_list(cfg["frame_ms"]):
            for estimator in estimators:
                res = coherence_time(CoherenceConfig(
                    noise_fwhm_hz=noise, frame_len_s=frame_ms * 1e-3,
                    estimator=estimator, rate_hz=cfg["rate_hz"],
                    runs=cfg["runs"], seed=cfg["seed"],
                    duration_s=cfg["duration_s"],
                    qber_window_s=cfg["qber_window_s"],
                    threshold=cfg["threshold"],
                    white_sigma_ps=cfg["white_sigma_ps"]))
                results.append(res)
                print(f"noise {noise:g} Hz, frame {frame_ms:g} ms, "
                      f"{estimator}: median {res.median_s:.3f} s, "
                      f"mean {res.mean_s:.3f} s "
                      f"({res.n_censored} censored, {res.n_failed} failed)")
    if args.out:
        save_coherence_csv(results, args.out)
    return EXIT_OK


# --- skr ---------------------------------------------------------------------

SKR_KEYS = {
    "n_z_mu1": (float, None), "n_z_mu2": (float, None),
    "m_z_mu1": (float, None), "m_z_mu2": (float, None),
    "n_x_mu1": (float, None), "n_x_mu2": (float, None),
    "m_x_mu1": (float, None), "m_x_mu2": (float, None),
    "acq_time_s": (float, None),
    "mu1": (float, 0.7), "mu2": (float, 0.3), "p_mu1": (float, 0.5),
    "eps_sec": (float, 1e-12), "eps_cor": (float, 1e-12),
    "f_ec": (float, 1.16),
}


def _cmd_skr(args) -> int:
    cfg = _merge_config(args, SKR_KEYS)
    missing = [k for k in ("n_z_mu1", "n_z_mu2", "m_z_mu1", "m_z_mu2",
                           "n_x_mu1", "n_x_mu2", "m_x_mu1", "m_x_mu2",
                           "acq_time_s") if cfg[k] is None]
    if missing:
        raise TagStreamError("missing required values: " + ", ".join(missing))
    report = skr(cfg["n_z_mu1"], cfg["n_z_mu2"], cfg["m_z_mu1"],
                 cfg["m_z_mu2"], cfg["n_x_mu1"], cfg["n_x_mu2"],
                 cfg["m_x_mu1"], cfg["m_x_mu2"], cfg["acq_time_s"],
                 mu1=cfg["mu1"], mu2=cfg["mu2"], p_mu1=cfg["p_mu1"],
                 eps_sec=cfg["eps_sec"], eps_cor=cfg["eps_cor"],
                 f_ec=cfg["f_ec"])
    if args.out:
        _write_json(args.out, report.to_dict())
    if report.feasible:
        print(f"key length {report.key_length_bits:.1f} bits, "
              f"rate {report.skr_hz:.3f} bit/s "
              f"(qber {report.qber_z:.4f}, phase error {report.phase_error:.4f})")
    else:
        print(f"no secure key: {report.detail.get('reason', 'infeasible')} "
              f"(qber {report.qber_z:.4f})")
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def _add_common(sub, config=True, tags=False, fmt=False):
    if config:
        sub.add_argument("--config", help="key = value options file")
    if tags:
        sub.add_argument("tags", help="tag file (binary, or csv by extension)")
    if fmt:
        sub.add_argument("--format", choices=("binary", "csv"),
                         help="force the tag file format")


def _add_keys(sub, casters, skip=()):
    for key, (cast, _) in casters.items():
        if key in skip:
            continue
        flag = "--" + key.replace("_", "-")
        if cast is _boolean:
            sub.add_argument(flag, type=_boolean, metavar="BOOL")
        else:
            sub.add_argument(flag, type=str)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="photonclock",
        description="clock recovery and QKD timing analysis for photon time tags")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("simulate", help="generate a synthetic tag stream")
    _add_common(p, tags=False, fmt=True)
    p.add_argument("--out", required=True, help="tag file to write")
    p.add_argument("--truth", help="ground-truth JSON to write")
    _add_keys(p, SIMULATE_KEYS)
    p.set_defaults(func=_cmd_simulate)

    p = subs.add_parser("recover", help="recover the source clock frequency")
    _add_common(p, tags=True, fmt=True)
    p.add_argument("--estimate", help="estimate JSON to write")
    p.add_argument("--trace", help="drift-trace CSV to write")
    _add_keys(p, RECOVER_KEYS)
    p.set_defaults(func=_cmd_recover)

    p = subs.add_parser("track", help="sliding-frame drift trace")
    _add_common(p, tags=True, fmt=True)
    p.add_argument("--f0", type=float, help="anchor frequency in Hz")
    p.add_argument("--estimate", help="estimate JSON from 'recover'")
    p.add_argument("--out", required=True, help="trace CSV to write")
    _add_keys(p, TRACK_KEYS)
    p.set_defaults(func=_cmd_track)

    p = subs.add_parser("qber", help="demodulate and score against the truth")
    _add_common(p, tags=True, fmt=True)
    p.add_argument("--truth", required=True, help="ground-truth JSON")
    p.add_argument("--f0", type=float, help="demodulation frequency in Hz")
    p.add_argument("--estimate", help="estimate JSON from 'recover'")
    p.add_argument("--out", help="report CSV to write")
    p.add_argument("--windows", help="windowed QBER timeline CSV to write")
    _add_keys(p, QBER_KEYS)
    p.set_defaults(func=_cmd_qber)

    p = subs.add_parser("coherence", help="QBER survival-time Monte Carlo")
    _add_common(p)
    p.add_argument("--out", help="summary CSV to write")
    _add_keys(p, COHERENCE_KEYS)
    p.set_defaults(func=_cmd_coherence)

    p = subs.add_parser("skr", help="finite-key secret-key rate")
    _add_common(p)
    p.add_argument("--out", help="report JSON to write")
    _add_keys(p, SKR_KEYS)
    p.set_defaults(func=_cmd_skr)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:          # includes TagStreamError, SimulatorError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except (RecoveryError, AlignmentError, CliError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROCESSING
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
