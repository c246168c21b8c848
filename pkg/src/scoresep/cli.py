"""``scoresep`` command line: toygen, train, separate, evaluate, denoise, roll."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

EXIT_CODES = """exit codes:
  0  success
  1  usage error (bad or inconsistent flags)
  2  data or I/O error (unreadable/invalid files, layout mismatch)
  3  numerical failure (NaN/Inf loss)"""

log = logging.getLogger("scoresep")


class UsageError(Exception):
    pass


class DataIOError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sub(subparsers, name, help_text):
    return subparsers.add_parser(
        name, help=help_text, description=help_text, epilog=EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="scoresep",
        description="Score-informed music source separation toolkit.",
        epilog=EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--config", help="JSON file of flag defaults (flags override it)")
    parser.add_argument("--threads", type=int, help="cap numeric worker threads (fallback: $SSEP_THREADS)")
    parser.add_argument("--deterministic", action="store_true", help="force single-threaded numerics")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = _sub(sub, "toygen", "Synthesise a toy dataset (stems, mixture, aligned notes) and its manifest.")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--songs", type=int, default=4, help="number of songs (default 4)")
    p.add_argument("--duration-sec", type=float, default=30.0, help="song length in seconds (>= 12, default 30)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--sr", type=int, default=44100, help="sample rate in Hz (default 44100)")
    p.add_argument("--profile", choices=["default", "overlap"], default="default",
                   help="instrument set: disjoint (default) or overlapping pitch ranges")

    p = _sub(sub, "train", "Train one separation model (one instrument family or an explicit list).")
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--variant", required=True, metavar="{baseline,score-informed,score-only}",
                   choices=["baseline", "score-informed", "score-only", "score_informed", "score_only"],
                   help="architecture: audio only, audio plus score, or score only")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--family", choices=["strings", "woodwinds", "brass", "percussion"],
                       help="train on this family's instruments present in the dataset")
    group.add_argument("--instruments", help="comma-separated instrument list (branch order)")
    p.add_argument("--epochs", type=int, default=5, help="epochs (default 5)")
    p.add_argument("--steps-per-epoch", type=int, default=20, help="optimiser steps per epoch (default 20)")
    p.add_argument("--batch-size", type=int, default=4, help="segments per step (default 4)")
    p.add_argument("--segment-sec", type=float, default=6.0, help="training segment length (default 6)")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default 1e-3)")
    p.add_argument("--lambda", dest="lam", type=float, default=10.0, help="time-domain loss weight (default 10)")
    p.add_argument("--seed", type=int, default=0, help="seed (default 0)")
    p.add_argument("--window", type=int, default=4096, help="STFT window (default 4096)")
    p.add_argument("--hop", type=int, default=1024, help="STFT hop (default 1024)")
    p.add_argument("--precision", choices=["float32", "float64"], default="float64",
                   help="floating-point width for parameters and activations (default float64)")
    p.add_argument("--profile", choices=["desk", "full"], default="desk", help="model size profile")
    p.add_argument("--time-budget-sec", type=float, help="stop early after this much wall time")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="JSON-lines training log (default: stderr)")
    p.add_argument("--figure", help="write a loss-curve PNG here")

    p = _sub(sub, "separate", "Separate a mixture (or every song of a manifest) with a checkpoint.")
    p.add_argument("--model", required=True, help="checkpoint file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--mix", help="mixture WAV")
    src.add_argument("--data", help="manifest.json; writes OUT/<song>/<instrument>.wav")
    p.add_argument("--score", help="note CSV (required for score variants with --mix)")
    p.add_argument("--window", type=int, help="STFT window (default: the checkpoint's, else 4096)")
    p.add_argument("--hop", type=int, help="STFT hop (default: the checkpoint's, else 1024)")
    p.add_argument("--out", required=True, help="output directory")

    p = _sub(sub, "evaluate", "Frame-wise SDR with silence zeroing and median-of-medians aggregation.")
    p.add_argument("--est", required=True, help="estimates: <dir>/<song>/<instrument>.wav")
    p.add_argument("--ref", required=True, help="references: same layout, or a dataset manifest.json")
    p.add_argument("--silence-threshold", type=float, default=0.01, help="silent-window threshold (default 0.01)")
    p.add_argument("--frame-sec", type=float, default=1.0, help="evaluation frame length (default 1)")
    p.add_argument("--report", help="report JSON path (default: stdout)")
    p.add_argument("--table", help="also write instrument medians as CSV")
    p.add_argument("--figure", help="write a per-instrument SDR bar chart PNG")

    p = _sub(sub, "denoise", "Wiener-denoise a recording using noise statistics from its silent regions.")
    p.add_argument("--in", dest="input", required=True, help="input WAV")
    p.add_argument("--out", required=True, help="output WAV")
    p.add_argument("--threshold", type=float, default=0.01, help="silence threshold (default 0.01)")
    p.add_argument("--noise", help="explicit noise-only WAV instead of silent-region search")

    p = _sub(sub, "roll", "Rasterise a note CSV into a frames x 128 piano-roll CSV.")
    p.add_argument("--score", required=True, help="canonical note CSV")
    p.add_argument("--frames", type=int, required=True, help="number of frames")
    p.add_argument("--sr", type=int, default=44100, help="sample rate (default 44100)")
    p.add_argument("--hop", type=int, default=1024, help="hop size (default 1024)")
    p.add_argument("--instrument", help="only this instrument (default: union of all)")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--figure", help="write a piano-roll PNG")
    p.add_argument("--audio", help="with --figure: add this WAV's spectrogram below the roll")
    return parser


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataIOError(f"cannot read config {args.config}: {exc}") from exc
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        args = parser.parse_args(argv)
    return args


def _thread_limit(args):
    threads = args.threads
    if threads is None and os.environ.get("SSEP_THREADS"):
        threads = int(os.environ["SSEP_THREADS"])
    if args.deterministic:
        threads = 1
    if threads is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_toygen(args):
    from .data import PROFILES, DataError, ToySpec, synthesize_toy

    spec = ToySpec(args.songs, args.duration_sec, args.sr, PROFILES[args.profile], args.seed)
    try:
        synthesize_toy(spec, args.out)
    except (DataError, OSError) as exc:
        raise DataIOError(str(exc)) from exc
    print(Path(args.out) / "manifest.json")


def cmd_train(args):
    from . import train as T
    from .data import FAMILIES, load_manifest, manifest_instruments

    entries = load_manifest(args.data)
    available = manifest_instruments(entries)
    if args.instruments:
        instruments = [s.strip() for s in args.instruments.split(",") if s.strip()]
    elif args.family:
        instruments = [i for i in FAMILIES[args.family] if i in available]
        if not instruments:
            raise UsageError(
                f"no {args.family} instruments in this dataset ({', '.join(available)}); "
                "pass --instruments explicitly"
            )
    else:
        raise UsageError("one of --family or --instruments is required")
    if len(instruments) < 2:
        raise UsageError("at least two instruments are needed for the combination loss")
    cfg = T.TrainConfig(
        variant=args.variant, instruments=instruments, family=args.family, epochs=args.epochs,
        steps_per_epoch=args.steps_per_epoch, batch_size=args.batch_size,
        segment_sec=args.segment_sec, lr=args.lr, lam=args.lam, seed=args.seed,
        window_size=args.window, hop_size=args.hop, precision=args.precision, profile=args.profile,
    )
    records = []
    sink = open(args.log, "w", encoding="utf-8") if args.log else sys.stderr
    try:
        def log_fn(rec):
            records.append(rec)
            sink.write(json.dumps(rec, sort_keys=True) + "\n")
            sink.flush()

        ckpt = T.train(entries, cfg, log_fn=log_fn, time_budget_sec=args.time_budget_sec)
    finally:
        if args.log:
            sink.close()
    T.save(ckpt, args.out)
    if args.figure and records:
        from .plotting import plot_loss_curve

        plot_loss_curve(records, args.figure)
    print(args.out)


def cmd_separate(args):
    from . import dsp, train as T
    from .data import load_manifest
    from .model import ModelError, separate
    from .score import read_notes_csv

    ckpt = T.load(args.model)
    variant = ckpt.model.config.variant
    trained = ckpt.metadata.get("train_config", {})
    window = args.window or trained.get("window_size", 4096)
    hop = args.hop or trained.get("hop_size", 1024)
    jobs = []
    if args.mix:
        if args.score and variant == "baseline":
            log.warning("baseline model ignores --score")
        if variant != "baseline" and not args.score:
            raise UsageError(f"{variant} checkpoint needs --score")
        jobs.append((Path(args.out), args.mix, args.score if variant != "baseline" else None))
    else:
        for e in load_manifest(args.data):
            if variant != "baseline" and e.notes is None:
                raise DataIOError(f"song {e.song_id} has no note CSV")
            jobs.append((Path(args.out) / e.song_id, e.mixture, e.notes if variant != "baseline" else None))
    for out_dir, mix_path, score_path in jobs:
        mix = dsp.read_wav(mix_path)
        score = read_notes_csv(score_path) if score_path else None
        try:
            stems = separate(ckpt.model, mix, score, window, hop)
        except ModelError as exc:
            raise UsageError(str(exc)) from exc
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, clip in stems.items():
            dsp.write_wav(out_dir / f"{name}.wav", clip)
    print(args.out)


def cmd_evaluate(args):
    from .evaluation import evaluate

    report = evaluate(args.est, args.ref, args.silence_threshold, args.frame_sec)
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
        print(args.report)
    else:
        print(text)
    if args.table:
        lines = ["instrument,median_sdr_db"]
        lines += [f"{k},{v!r}" for k, v in sorted(report.instrument_medians.items())]
        lines.append(f"MEAN,{report.overall_mean!r}")
        Path(args.table).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.figure:
        from .plotting import plot_sdr_report

        plot_sdr_report(report, args.figure)


def cmd_denoise(args):
    from . import dsp

    clip = dsp.read_wav(args.input)
    noise = dsp.read_wav(args.noise) if args.noise else None
    out = dsp.wiener_denoise(clip, args.threshold, noise=noise)
    dsp.write_wav(args.out, out)
    print(args.out)


def cmd_roll(args):
    from .score import PianoRoll, ScoreTrack, normalize_instrument, rasterize, read_notes_csv, roll_to_csv

    if args.frames <= 0:
        raise UsageError("--frames must be positive")
    tracks = read_notes_csv(args.score)
    if args.instrument:
        name = normalize_instrument(args.instrument)
        tracks = [t for t in tracks if t.instrument == name]
    data = np.zeros((args.frames, 128), dtype=np.uint8)
    for t in tracks:
        data |= rasterize(t, args.frames, args.sr, args.hop).data
    roll = PianoRoll(data, args.hop, args.sr)
    Path(args.out).write_text(roll_to_csv(roll), encoding="utf-8")
    if args.figure:
        from .plotting import plot_roll

        mag = None
        if args.audio:
            from . import dsp

            clip = dsp.read_wav(args.audio)
            mag = np.abs(dsp.stft_array(clip.samples, 4 * args.hop, args.hop))[: args.frames]
        plot_roll(roll, args.figure, mag=mag)
    print(args.out)


COMMANDS = {
    "toygen": cmd_toygen,
    "train": cmd_train,
    "separate": cmd_separate,
    "evaluate": cmd_evaluate,
    "denoise": cmd_denoise,
    "roll": cmd_roll,
}


def main(argv=None) -> int:
    from .data import DataError
    from .dsp import DspError
    from .evaluation import EvalError
    from .model import ModelError
    from .score import ScoreError
    from .train import CheckpointError, NumericalError, TrainError

    try:
        args = _parse(argv)
    except DataIOError as exc:
        print(f"scoresep: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit(args):
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"scoresep {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"scoresep {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataIOError, DataError, DspError, EvalError, ScoreError, CheckpointError,
            TrainError, ModelError, OSError, json.JSONDecodeError) as exc:
        print(f"scoresep {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
