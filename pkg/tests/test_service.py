import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from cortexdec.data import read_dataset, write_dataset, write_recording
from cortexdec.service import create_app
from cortexdec.service.handlers import render_confusion
from cortexdec.signal import Event, PreprocessConfig, RawRecording, SPEECH_CHANNELS, preprocess
from cortexdec.training import Metrics, metrics_to_csv

from conftest import make_trialset


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app(), raise_server_exceptions=False)


def synth_payload(tmp_path, **kw):
    payload = dict(out=str(tmp_path / "corpus.cdt"), subjects=3, trials_per_class=1,
                   channels=4, samples=64, sample_rate=250.0, signature_snr=2.0, seed=5)
    payload.update(kw)
    return payload


def test_health(client):
    reply = client.get("/health")
    assert reply.status_code == 200
    assert reply.json()["status"] == "ok"


def test_synth_endpoint_writes_dataset(client, tmp_path):
    payload = synth_payload(tmp_path, manifest=str(tmp_path / "manifest.txt"))
    reply = client.post("/synth", json=payload)
    assert reply.status_code == 200
    body = reply.json()
    assert body["n_trials"] == 3 * 13
    trials = read_dataset(payload["out"])
    assert trials.data.shape == (39, 4, 64)
    assert (tmp_path / "manifest.txt").read_text().count("\n") == 1
    assert (tmp_path / "corpus.cdt.run.json").exists()
    manifest = json.loads((tmp_path / "corpus.cdt.run.json").read_text())
    assert manifest["command"] == "synth"
    assert payload["out"] in manifest["checksums"]


def test_synth_deterministic_checksum(client, tmp_path):
    a = client.post("/synth", json=synth_payload(tmp_path, out=str(tmp_path / "a.cdt"))).json()
    b = client.post("/synth", json=synth_payload(tmp_path, out=str(tmp_path / "b.cdt"))).json()
    assert a["payload_sha256"] == b["payload_sha256"]


def test_synth_validation_error(client, tmp_path):
    reply = client.post("/synth", json=synth_payload(tmp_path, subjects=0))
    assert reply.status_code == 422


def make_raw_recording(tmp_path, rng):
    names = SPEECH_CHANNELS + ("EXTRA",)
    rec = RawRecording(
        data=rng.normal(size=(11, 12_000)).astype(np.float32).astype(np.float64),
        sample_rate_hz=1000.0, channel_names=names,
        events=(Event(2000, 1, 0), Event(6000, 4, 1)),
    )
    path = tmp_path / "raw.cdr"
    write_recording(rec, path)
    return rec, path


def test_preprocess_endpoint_matches_library(client, tmp_path, rng):
    rec, raw_path = make_raw_recording(tmp_path, rng)
    out = tmp_path / "trials.cdt"
    reply = client.post("/preprocess", json={
        "input": str(raw_path), "out": str(out), "trial_seconds": 1.0,
        "baseline_seconds": 0.25, "channels": list(SPEECH_CHANNELS[:4])})
    assert reply.status_code == 200
    assert reply.json()["n_samples"] == 1000

    config = PreprocessConfig(trial_seconds=1.0, baseline_seconds=0.25,
                              channels=SPEECH_CHANNELS[:4])
    expected = preprocess(rec, config)
    got = read_dataset(out)
    assert got.data.tobytes() == expected.data.astype("<f4").tobytes()


def test_preprocess_unknown_channel_is_400(client, tmp_path, rng):
    _, raw_path = make_raw_recording(tmp_path, rng)
    reply = client.post("/preprocess", json={
        "input": str(raw_path), "out": str(tmp_path / "x.cdt"), "channels": ["AF3", "F9"]})
    assert reply.status_code == 400
    assert "F9" in reply.json()["detail"]


def test_preprocess_config_file_with_override(client, tmp_path, rng):
    _, raw_path = make_raw_recording(tmp_path, rng)
    cfg_file = tmp_path / "pre.cfg"
    cfg_file.write_text("trial_seconds = 0.5\nbaseline_seconds = 0.25\nchannels = AF3,F3\n")
    out = tmp_path / "y.cdt"
    reply = client.post("/preprocess", json={
        "input": str(raw_path), "out": str(out), "config_file": str(cfg_file),
        "trial_seconds": 1.0})  # flag beats file
    assert reply.status_code == 200
    assert reply.json()["n_samples"] == 1000
    assert reply.json()["n_channels"] == 2


def test_preprocess_missing_input_is_400(client, tmp_path):
    reply = client.post("/preprocess", json={
        "input": str(tmp_path / "absent.cdr"), "out": str(tmp_path / "z.cdt")})
    assert reply.status_code == 400


def test_bad_magic_is_400(client, tmp_path):
    bad = tmp_path / "bad.cdt"
    bad.write_bytes(b"JUNKJUNKJUNK")
    reply = client.post("/train", json={"data": str(bad), "out_dir": str(tmp_path / "run"),
                                        "folds": 2, "max_epochs": 1})
    assert reply.status_code == 400
    assert "magic" in reply.json()["detail"]


@pytest.fixture(scope="module")
def tiny_training_run(client, tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("train")
    data_path = tmp_path / "data.cdt"
    write_dataset(make_trialset(n_trials=52, n_channels=2, n_samples=32, n_subjects=4), data_path)
    out_dir = tmp_path / "run"
    reply = client.post("/train", json={
        "data": str(data_path), "out_dir": str(out_dir), "folds": 2, "grouping": "subject",
        "seed": 1, "batch_size": 16, "max_epochs": 2, "validate_every": 1, "patience": 1,
        "blocks": 2, "features": 4, "kernel": 3, "hidden": 8, "dropout": 0.0})
    assert reply.status_code == 200
    return tmp_path, data_path, out_dir, reply.json()


def test_train_endpoint_artifacts(tiny_training_run):
    _, _, out_dir, body = tiny_training_run
    assert len(body["folds"]) == 2
    for fold in body["folds"]:
        assert (out_dir / f"fold{fold['fold']}.ckpt").exists()
        assert (out_dir / f"history_fold{fold['fold']}.csv").exists()
    assert (out_dir / "metrics.csv").exists()
    assert (out_dir / "run.json").exists()
    header = (out_dir / "metrics.csv").read_text().splitlines()[0]
    assert header.split(",")[2] == "hello"


def test_eval_endpoint_and_formatting(client, tiny_training_run, tmp_path):
    _, data_path, out_dir, body = tiny_training_run
    out_csv = tmp_path / "metrics_eval.csv"
    reply = client.post("/eval", json={
        "data": str(data_path), "checkpoint": body["folds"][0]["checkpoint"],
        "out": str(out_csv)})
    assert reply.status_code == 200
    lines = out_csv.read_text().strip().splitlines()
    assert lines[-2] == "accuracy,macro_precision,macro_recall,macro_f1"
    for value in lines[-1].split(","):
        float(value)
        assert "." in value and len(value.split(".")[1]) == 2


def test_ablate_endpoint(client, tmp_path):
    data_path = tmp_path / "data.cdt"
    write_dataset(make_trialset(n_trials=52, n_channels=2, n_samples=32, n_subjects=4), data_path)
    out_csv = tmp_path / "ablation.csv"
    reply = client.post("/ablate", json={
        "data": str(data_path), "out": str(out_csv), "seeds": [1, 2], "folds": 2,
        "grouping": "subject", "batch_size": 16, "max_epochs": 1, "validate_every": 1,
        "patience": 1, "blocks": 2, "features": 4, "kernel": 3, "hidden": 8, "dropout": 0.0})
    assert reply.status_code == 200
    body = reply.json()
    assert len(body["pairs"]) == 2
    lines = out_csv.read_text().strip().splitlines()
    assert len(lines) == 1 + 4 + 1


def test_report_orientation(client, tmp_path):
    confusion = np.zeros((13, 13), dtype=np.int64)
    confusion[2, 5] = 3
    csv_path = tmp_path / "m.csv"
    csv_path.write_text(metrics_to_csv(Metrics.from_confusion(confusion),
                                       make_trialset().class_names))
    reply = client.post("/report", json={"metrics": str(csv_path)})
    assert reply.status_code == 200
    text = reply.json()["text"]
    row = next(line for line in text.splitlines() if line.strip().startswith("hello"))
    counts = row.split()[-13:]  # class names can contain spaces, cells cannot
    assert counts[5] == "3" and sum(v != "0" for v in counts) == 1
    header = text.splitlines()[0]
    assert header.startswith("true\\pred")
    # the predicted-label column holding the count is headed by class 5
    col = row.rindex("3")
    assert header[:col + 1].rstrip().endswith("pain")


def test_report_percent_rows_sum_100(client, tmp_path):
    r = np.random.default_rng(0)
    confusion = r.integers(1, 9, size=(13, 13))
    csv_path = tmp_path / "m.csv"
    csv_path.write_text(metrics_to_csv(Metrics.from_confusion(confusion),
                                       make_trialset().class_names))
    reply = client.post("/report", json={"metrics": str(csv_path), "percent": True})
    text = reply.json()["text"]
    for line in text.splitlines()[1:14]:
        values = [float(v) for v in line.split()[-13:]]
        assert sum(values) == pytest.approx(100.0, abs=0.01)


def test_report_malformed_csv_is_500(client, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    reply = client.post("/report", json={"metrics": str(bad)})
    assert reply.status_code == 500


def test_render_confusion_identity():
    text = render_confusion(np.diag([2, 3]), ("x", "y"), percent=False)
    lines = text.strip().splitlines()
    assert lines[1].split() == ["x", "2", "0"]
    assert lines[2].split() == ["y", "0", "3"]
