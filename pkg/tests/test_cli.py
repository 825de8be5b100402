import json

import pytest

from canfuse.cli import main
from canfuse.dataset import load_dataset


def run(capsys, *argv):
    status = main(list(argv))
    out, err = capsys.readouterr()
    return status, out, err


def test_unknown_subcommand(capsys):
    status, _, err = run(capsys, "fly")
    assert status != 0
    assert "usage:" in err
    assert json.loads(err.strip().splitlines()[-1])["error"] == "UnknownSubcommand"


def test_unknown_flag(capsys):
    status, _, err = run(capsys, "synth", "--bogus", "1")
    assert status != 0 and "usage:" in err


def test_domain_error_is_machine_readable(capsys, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("timestamp_ms,signal,value\n1,Speed\n")
    status, _, err = run(capsys, "decode", "--in", str(bad), "--out", str(tmp_path / "r.csv"))
    rec = json.loads(err.strip())
    assert status == 1 and rec["error"] == "MalformedLine" and rec["line_no"] == 2


def test_synth_train_eval_compare(capsys, tmp_path):
    d = tmp_path / "d.cfz"
    assert run(capsys, "synth", "--seed", "1", "--n", "10", "--out", str(d))[0] == 0
    assert len(load_dataset(d)) == 50

    model = tmp_path / "m.cfm"
    status, out, _ = run(capsys, "train", "--dataset", str(d), "--epochs", "1", "--no-can", "--out", str(model))
    assert status == 0 and json.loads(out)["variant"] == "vision_only"
    status, out, _ = run(capsys, "eval", "--model", str(model), "--dataset", str(d), "--groups", "5")
    assert status == 0 and json.loads(out)["samples"] == 10
    status, _, err = run(capsys, "eval", "--model", str(model), "--dataset", str(d), "--with-can")
    assert status == 1 and json.loads(err)["error"] == "VariantMismatch"

    status, out, _ = run(capsys, "compare", "--dataset", str(d), "--seed", "7", "--epochs", "1",
                         "--out", str(tmp_path / "run"))
    assert status == 0
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert {"vision_only", "fused"} <= set(report) and report["seed"] == 7
    for name in ("learning_curves.png", "rmse.png", "val_predictions.png"):
        assert (tmp_path / "run" / name).read_bytes()[:4] == b"\x89PNG"


def test_raw_recording_pipeline(capsys, tmp_path):
    raw = tmp_path / "raw"
    status, out, _ = run(capsys, "synth", "--seed", "2", "--raw", str(raw))
    truth = json.loads(out)["true_offsets_ms"]

    rows, unified = tmp_path / "rows.csv", tmp_path / "unified.csv"
    status, out, _ = run(capsys, "decode", "--in", str(raw / "can.csv"), "--out", str(rows))
    assert status == 0 and json.loads(out)["power_check_passed"]
    status, out, _ = run(capsys, "frames", "--manifest", str(raw / "manifest.csv"), "--out", str(unified))
    assert status == 0 and json.loads(out)["segments"] == 2

    ds_path = tmp_path / "synced.cfz"
    status, out, _ = run(capsys, "sync", "--rows", str(rows), "--frames", str(unified),
                         "--frames-dir", str(raw / "frames"), "--out", str(ds_path))
    assert status == 0
    rep = json.loads(out)
    assert set(rep) >= {"offset_ms", "matched", "dropped", "groups"}
    # rows are 1 ms ticks block-averaged by 25, so the first all-zero block
    # is centred 12..36 ms after the stop; frames hit the stop exactly
    factor, tick = 25, 1.0
    bound = (factor - 1) / 2 * tick + (factor - 1) * tick
    for gid, off in rep["group_offsets_ms"].items():
        assert abs(off - truth[gid]) <= bound
    assert rep["matched"] >= 0.99 * (rep["matched"] + rep["dropped"])
    ds = load_dataset(ds_path)
    assert ds.image_shape == (66, 200, 3) and len(ds) == rep["matched"]

    status, out, _ = run(capsys, "build-dataset", "--raw", str(raw), "--out", str(tmp_path / "b.cfz"))
    assert status == 0
    assert load_dataset(tmp_path / "b.cfz").equals(ds)
