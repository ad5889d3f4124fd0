"""Thin command-line client for the decoding service.

Each subcommand builds the same request model the HTTP API accepts and
either executes it in-process (default) or posts it to a running service
(``--server http://host:port``). Flag values override config-file values,
which override the built-in defaults.

Exit codes: 0 success, 1 runtime/numerical failure, 2 usage/config error.
``CORTEXDEC_SEED`` is the fallback when ``--seed`` is omitted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from pydantic import ValidationError

from . import __version__
from .errors import ConfigError, DataFormatError
from .runtime import tune_allocator
from .service import schemas as sch

_SEED_ENV = "CORTEXDEC_SEED"


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    raw = os.environ.get(_SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{_SEED_ENV} must be an integer, got {raw!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cortexdec",
        description="EEG word-decoding pipeline: synthesize, preprocess, train, "
                    "evaluate, ablate, report.",
        epilog="Precedence for every setting: command-line flag, then config file "
               "(preprocess only), then the built-in defaults.")
    parser.add_argument("--version", action="version", version=f"cortexdec {__version__}")
    parser.add_argument("--server", metavar="URL", default=None,
                        help="POST to a running cortexdec service instead of running in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus (CDT1)")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--trials-per-class", type=int, default=10)
    p.add_argument("--channels", type=int, default=10)
    p.add_argument("--samples", type=int, default=1500)
    p.add_argument("--sample-rate", type=float, default=1000.0)
    p.add_argument("--noise-exponent", type=float, default=1.0)
    p.add_argument("--snr", type=float, default=1.0, help="class-signature amplitude")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--manifest", default=None, help="append a corpus manifest line to this file")

    p = sub.add_parser("preprocess", help="band-pass, epoch and baseline-correct a CDR1 recording")
    p.add_argument("--input", required=True, help="raw recording (CDR1)")
    p.add_argument("--out", required=True, help="output dataset path (CDT1)")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--order", type=int, default=None, help="filter order (default 5)")
    p.add_argument("--low", type=float, default=None, help="low edge Hz (default 0.5)")
    p.add_argument("--high", type=float, default=None, help="high edge Hz (default 120)")
    p.add_argument("--trial-seconds", type=float, default=None, help="default 1.5")
    p.add_argument("--baseline-seconds", type=float, default=None, help="default 0.5")
    p.add_argument("--channels", type=_str_list, default=None,
                   help="comma-separated channel names (default: the 10 speech-area channels)")
    p.add_argument("--causal", action="store_true",
                   help="single forward pass instead of zero-phase forward-backward")

    def add_train_settings(p: argparse.ArgumentParser) -> None:
        p.add_argument("--folds", type=int, default=5)
        p.add_argument("--grouping", choices=["subject", "trial"], default="subject")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=128)
        p.add_argument("--max-epochs", type=int, default=2000)
        p.add_argument("--validate-every", type=int, default=10)
        p.add_argument("--patience", type=int, default=10)
        p.add_argument("--val-fraction", type=float, default=0.1)
        p.add_argument("--lr", type=float, default=1e-4)
        p.add_argument("--blocks", type=int, default=5)
        p.add_argument("--features", type=int, default=64)
        p.add_argument("--kernel", type=int, default=11)
        p.add_argument("--dropout", type=float, default=0.5)
        p.add_argument("--hidden", type=int, default=128)
        p.add_argument("--no-skip", action="store_true", help="disable the shortcut connections")
        p.add_argument("--skip-blocks", type=_int_list, default=None,
                       help="restrict skips to these blocks, e.g. 2,3")
        p.add_argument("--jobs", type=int, default=1, help="train folds in parallel threads")

    p = sub.add_parser("train", help="subject-grouped cross-validated training")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    add_train_settings(p)

    p = sub.add_parser("eval", help="score a checkpoint over a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="write the metrics CSV here")

    p = sub.add_parser("ablate", help="paired skip vs no-skip comparison")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="results CSV path")
    p.add_argument("--seeds", type=_int_list, required=True, help="e.g. 1,2,3,4,5")
    add_train_settings(p)

    p = sub.add_parser("report", help="render a metrics CSV as a confusion matrix")
    p.add_argument("--metrics", required=True)
    p.add_argument("--percent", action="store_true", help="row-normalize to percentages")
    return parser


def _train_settings_kwargs(args: argparse.Namespace) -> dict:
    return dict(
        folds=args.folds, grouping=args.grouping, seed=_resolve_seed(args.seed),
        batch_size=args.batch_size, max_epochs=args.max_epochs,
        validate_every=args.validate_every, patience=args.patience,
        val_fraction=args.val_fraction, lr=args.lr,
        blocks=args.blocks, features=args.features, kernel=args.kernel,
        dropout=args.dropout, hidden=args.hidden, skip=not args.no_skip,
        skip_blocks=args.skip_blocks, jobs=args.jobs)


def _build_request(args: argparse.Namespace):
    if args.command == "synth":
        return "/synth", sch.SynthRequest(
            out=args.out, subjects=args.subjects, trials_per_class=args.trials_per_class,
            channels=args.channels, samples=args.samples, sample_rate=args.sample_rate,
            noise_exponent=args.noise_exponent, signature_snr=args.snr,
            seed=_resolve_seed(args.seed), manifest=args.manifest)
    if args.command == "preprocess":
        return "/preprocess", sch.PreprocessRequest(
            input=args.input, out=args.out, config_file=args.config,
            filter_order=args.order, low_hz=args.low, high_hz=args.high,
            trial_seconds=args.trial_seconds, baseline_seconds=args.baseline_seconds,
            channels=args.channels, zero_phase=False if args.causal else None)
    if args.command == "train":
        return "/train", sch.TrainRequest(
            data=args.data, out_dir=args.out_dir, **_train_settings_kwargs(args))
    if args.command == "eval":
        return "/eval", sch.EvalRequest(data=args.data, checkpoint=args.checkpoint, out=args.out)
    if args.command == "ablate":
        return "/ablate", sch.AblateRequest(
            data=args.data, out=args.out, seeds=args.seeds, **_train_settings_kwargs(args))
    if args.command == "report":
        return "/report", sch.ReportRequest(metrics=args.metrics, percent=args.percent)
    raise ConfigError(f"unknown command {args.command!r}")


def _run_local(path: str, request):
    from .service import handlers

    runner = {
        "/synth": handlers.run_synth,
        "/preprocess": handlers.run_preprocess,
        "/train": handlers.run_train,
        "/eval": handlers.run_eval,
        "/ablate": handlers.run_ablate,
        "/report": handlers.run_report,
    }[path]
    return runner(request).model_dump()


def _run_remote(server: str, path: str, request) -> dict:
    import httpx

    reply = httpx.post(server.rstrip("/") + path, json=request.model_dump(), timeout=None)
    if reply.status_code in (400, 422):
        raise ConfigError(f"service rejected the request: {reply.text}")
    if reply.status_code != 200:
        raise RuntimeError(f"service failed ({reply.status_code}): {reply.text}")
    return reply.json()


def _print_result(command: str, result: dict) -> None:
    if command == "report":
        sys.stdout.write(result["text"])
        return
    if command == "eval":
        s = result["summary"]
        print(f"evaluated {result['n_trials']} trials: "
              f"accuracy {100 * s['accuracy']:.2f}, precision {100 * s['macro_precision']:.2f}, "
              f"recall {100 * s['macro_recall']:.2f}, f1 {100 * s['macro_f1']:.2f}")
        if result["metrics_csv"]:
            print(f"metrics csv: {result['metrics_csv']}")
        return
    if command == "train":
        for f in result["folds"]:
            print(f"fold {f['fold']}: test accuracy {100 * f['accuracy']:.2f}  "
                  f"checkpoint {f['checkpoint']}")
        s = result["pooled"]
        print(f"pooled: accuracy {100 * s['accuracy']:.2f}, "
              f"precision {100 * s['macro_precision']:.2f}, "
              f"recall {100 * s['macro_recall']:.2f}, f1 {100 * s['macro_f1']:.2f}")
        print(f"metrics csv: {result['metrics_csv']}")
        return
    if command == "ablate":
        for p in result["pairs"]:
            print(f"seed {p['seed']}: skip {100 * p['skip_accuracy']:.2f}  "
                  f"no-skip {100 * p['noskip_accuracy']:.2f}")
        print(f"mean paired difference: {100 * result['mean_difference']:.2f}")
        print(f"results csv: {result['out']}")
        return
    if command in ("synth", "preprocess"):
        shape = (f"{result['n_trials']} trials" if command == "synth"
                 else f"{result['n_trials']} x {result['n_channels']} x {result['n_samples']}")
        print(f"wrote {result['out']} ({shape}, payload sha256 {result['payload_sha256'][:12]}...)")
        return
    print(json.dumps(result, indent=2))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    tune_allocator()
    try:
        path, request = _build_request(args)
        if args.server:
            result = _run_remote(args.server, path, request)
        else:
            result = _run_local(path, request)
    except (ConfigError, DataFormatError, ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # divergence, malformed runtime data, service 5xx
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _print_result(args.command, result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
