"""Command execution behind the service routes and the CLI client.

Every run writes a JSON run-manifest next to its primary output (command,
resolved config, seed, paths, wall-clock duration, artifact checksums) so
results stay attributable; the manifest itself is metadata, not an
artifact, and is excluded from determinism comparisons.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import replace

import numpy as np

from .. import data as D
from .. import signal as S
from .. import training as TR
from ..errors import ConfigError
from ..model import EncoderConfig, load_model, save_model
from . import schemas as sch


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_run_manifest(command: str, request, seed: int, inputs: list[str],
                        outputs: list[str], started: float, manifest_path: str) -> None:
    record = {
        "command": command,
        "config": request.model_dump(),
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "duration_seconds": round(time.monotonic() - started, 3),
        "checksums": {p: _sha256_file(p) for p in outputs},
    }
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")


def run_synth(req: sch.SynthRequest) -> sch.SynthResponse:
    started = time.monotonic()
    config = D.SynthConfig(
        n_subjects=req.subjects,
        trials_per_class_per_subject=req.trials_per_class,
        n_channels=req.channels,
        n_samples=req.samples,
        sample_rate=req.sample_rate,
        noise_exponent=req.noise_exponent,
        signature_snr=req.signature_snr,
        seed=req.seed,
    )
    trials = D.synth_generate(config)
    D.write_dataset(trials, req.out)
    line = D.append_manifest(req.manifest, req.out) if req.manifest else None
    _write_run_manifest("synth", req, req.seed, [], [req.out], started, req.out + ".run.json")
    return sch.SynthResponse(
        out=req.out, n_trials=trials.n_trials,
        n_subjects=int(np.unique(trials.subject_ids).size),
        payload_sha256=D.payload_sha256(req.out), manifest_line=line)


def _resolve_preprocess_config(req: sch.PreprocessRequest) -> S.PreprocessConfig:
    if req.config_file is not None:
        with open(req.config_file, "r", encoding="utf-8") as f:
            config = S.parse_preprocess_config(f.read())
    else:
        config = S.PreprocessConfig()
    overrides = {}
    for name in ("filter_order", "low_hz", "high_hz", "trial_seconds", "baseline_seconds",
                 "zero_phase"):
        value = getattr(req, name)
        if value is not None:
            overrides[name] = value
    if req.channels is not None:
        overrides["channels"] = tuple(req.channels)
    return replace(config, **overrides) if overrides else config


def run_preprocess(req: sch.PreprocessRequest) -> sch.PreprocessResponse:
    started = time.monotonic()
    config = _resolve_preprocess_config(req)
    recording = D.read_recording(req.input)
    trials = S.preprocess(recording, config)
    D.write_dataset(trials, req.out)
    _write_run_manifest("preprocess", req, 0, [req.input], [req.out], started,
                        req.out + ".run.json")
    return sch.PreprocessResponse(
        out=req.out, n_trials=trials.n_trials, n_channels=trials.data.shape[1],
        n_samples=trials.data.shape[2], payload_sha256=D.payload_sha256(req.out))


def _model_config(settings: sch.ModelSettings, trials: S.TrialSet) -> EncoderConfig:
    return EncoderConfig(
        input_channels=trials.data.shape[1],
        input_samples=trials.data.shape[2],
        n_blocks=settings.blocks,
        feature_channels=settings.features,
        kernel_size=settings.kernel,
        pool_kernel=settings.pool_kernel,
        pool_stride=settings.pool_stride,
        dropout_p=settings.dropout,
        skip_enabled=settings.skip,
        skip_blocks=tuple(settings.skip_blocks) if settings.skip_blocks else None,
        n_classes=settings.classes,
        head_hidden=settings.hidden,
    )


def _train_config(settings: sch.TrainSettings) -> TR.TrainConfig:
    return TR.TrainConfig(
        batch_size=settings.batch_size,
        max_epochs=settings.max_epochs,
        validate_every=settings.validate_every,
        patience=settings.patience,
        val_fraction=settings.val_fraction,
        seed=settings.seed,
        lr=settings.lr,
        beta1=settings.beta1,
        beta2=settings.beta2,
    )


def _summary(metrics: TR.Metrics) -> sch.MetricsSummary:
    return sch.MetricsSummary(
        accuracy=metrics.accuracy, macro_precision=metrics.macro_precision,
        macro_recall=metrics.macro_recall, macro_f1=metrics.macro_f1)


def run_train(req: sch.TrainRequest) -> sch.TrainResponse:
    started = time.monotonic()
    trials = D.read_dataset(req.data)
    result = TR.cross_validate(trials, _model_config(req, trials), _train_config(req),
                               k=req.folds, grouping=req.grouping, jobs=req.jobs)
    os.makedirs(req.out_dir, exist_ok=True)
    outputs = []
    folds = []
    for fr in result.folds:
        ckpt = os.path.join(req.out_dir, f"fold{fr.fold}.ckpt")
        hist = os.path.join(req.out_dir, f"history_fold{fr.fold}.csv")
        save_model(fr.model, ckpt)
        with open(hist, "w", encoding="utf-8") as f:
            f.write(TR.history_to_csv(fr.history))
        outputs += [ckpt, hist]
        folds.append(sch.FoldSummary(
            fold=fr.fold, accuracy=fr.metrics.accuracy,
            best_val_accuracy=fr.best_val_accuracy, checkpoint=ckpt, history_csv=hist))
    metrics_csv = os.path.join(req.out_dir, "metrics.csv")
    n = result.pooled.confusion.shape[0]
    names = trials.class_names if n == len(trials.class_names) else tuple(
        f"class{i}" for i in range(n))
    with open(metrics_csv, "w", encoding="utf-8") as f:
        f.write(TR.metrics_to_csv(result.pooled, names))
    outputs.append(metrics_csv)
    _write_run_manifest("train", req, req.seed, [req.data], outputs, started,
                        os.path.join(req.out_dir, "run.json"))
    return sch.TrainResponse(out_dir=req.out_dir, metrics_csv=metrics_csv,
                             pooled=_summary(result.pooled), folds=folds)


def run_eval(req: sch.EvalRequest) -> sch.EvalResponse:
    started = time.monotonic()
    trials = D.read_dataset(req.data)
    model = load_model(req.checkpoint)
    metrics = TR.evaluate(model, trials, np.arange(trials.n_trials))
    out = None
    if req.out is not None:
        with open(req.out, "w", encoding="utf-8") as f:
            f.write(TR.metrics_to_csv(metrics, trials.class_names))
        _write_run_manifest("eval", req, 0, [req.data, req.checkpoint], [req.out],
                            started, req.out + ".run.json")
        out = req.out
    return sch.EvalResponse(metrics_csv=out, summary=_summary(metrics),
                            n_trials=trials.n_trials)


def run_ablate(req: sch.AblateRequest) -> sch.AblateResponse:
    started = time.monotonic()
    trials = D.read_dataset(req.data)
    result = TR.run_ablation(trials, _model_config(req, trials), _train_config(req),
                             k=req.folds, grouping=req.grouping, seeds=req.seeds,
                             jobs=req.jobs)
    with open(req.out, "w", encoding="utf-8") as f:
        f.write(TR.ablation_to_csv(result))
    _write_run_manifest("ablate", req, req.seed, [req.data], [req.out], started,
                        req.out + ".run.json")
    return sch.AblateResponse(
        out=req.out,
        pairs=[sch.AblationPairOut(seed=p.seed, skip_accuracy=p.skip_accuracy,
                                   noskip_accuracy=p.noskip_accuracy) for p in result.pairs],
        mean_difference=result.mean_difference)


def _percent_row(row: np.ndarray) -> list[str]:
    """Row percentages in hundredths, largest-remainder rounded to sum 100.00."""
    total = row.sum()
    if total == 0:
        return ["0.00"] * row.size
    exact = 10_000.0 * row / total
    floors = np.floor(exact).astype(np.int64)
    for i in np.argsort(exact - floors)[::-1][: 10_000 - floors.sum()]:
        floors[i] += 1
    return [f"{v / 100.0:.2f}" for v in floors]


def render_confusion(confusion: np.ndarray, names: tuple[str, ...], percent: bool) -> str:
    """Aligned text matrix, true labels on rows, predicted on columns."""
    if percent:
        cells = [_percent_row(np.asarray(row, dtype=np.float64)) for row in confusion]
    else:
        cells = [[str(int(v)) for v in row] for row in confusion]
    corner = "true\\pred"
    name_w = max(len(corner), max(len(n) for n in names))
    col_ws = [max(len(names[j]), max(len(cells[i][j]) for i in range(len(names))))
              for j in range(len(names))]
    lines = [" ".join([corner.rjust(name_w)] + [n.rjust(w) for n, w in zip(names, col_ws)])]
    for i, name in enumerate(names):
        lines.append(" ".join([name.rjust(name_w)]
                              + [cells[i][j].rjust(col_ws[j]) for j in range(len(names))]))
    return "\n".join(lines) + "\n"


def run_report(req: sch.ReportRequest) -> sch.ReportResponse:
    try:
        with open(req.metrics, "r", encoding="utf-8") as f:
            confusion, names, summary = TR.metrics_from_csv(f.read())
    except FileNotFoundError:
        raise
    except ConfigError as exc:
        # malformed CSV is a runtime failure for report, not a usage error
        raise ValueError(f"malformed metrics CSV: {exc}") from exc
    text = render_confusion(confusion, names, req.percent)
    footer = ", ".join(f"{k} {v:.2f}%" for k, v in summary.items())
    return sch.ReportResponse(text=text + footer + "\n")
