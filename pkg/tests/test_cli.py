"""End-to-end command-line runs over a temporary workspace: the full
synth -> split -> train -> eval -> report chain, ingest over real EDF
files, manifests, append-only run directories, and exit codes."""

import json
import hashlib
from datetime import datetime
from pathlib import Path

import numpy as np
import pytest

from somnoscore.cli import main
from somnoscore.edf import Channel, EdfAnnotation, EdfHeader, Recording, SignalHeader, write_edf
from somnoscore.ingest import MONTAGE

TINY = ('model={"model_dim":8,"head_dim":8,"heads":2,"blocks":2,'
        '"mlp_hidden":16,"feature_dim":8}')


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """One trained pipeline shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    store = root / "epochs.ssep"
    split = root / "split.tsv"
    assert main(["synth", "--n-per-class", "12", "--seed", "2024",
                 "--out", str(store)]) == 0
    assert main(["split", "--store", str(store), "--seed", "2024",
                 "--out", str(split)]) == 0
    run = root / "run"
    assert main(["train", "--store", str(store), "--split-file", str(split),
                 "--run-dir", str(run),
                 "--override", TINY,
                 "--override", "lr=0.003", "--override", "batch_size=8",
                 "--override", "max_iterations=20",
                 "--override", "eval_every=10",
                 "--override", "seed=7"]) == 0
    return {"root": root, "store": store, "split": split, "run": run,
            "meta": store.with_suffix(".meta.jsonl"),
            "best": run / "checkpoints" / "best.ssck",
            "last": run / "checkpoints" / "last.ssck"}


class TestPipelineArtifacts:
    def test_synth_wrote_container_and_sidecar(self, work):
        assert work["store"].exists()
        assert work["meta"].exists()
        manifest = json.loads((work["root"] / "manifest.json").read_text())
        # the last command to write this manifest recorded its inputs
        assert manifest["version"]

    def test_split_file_covers_all_patients(self, work):
        lines = work["split"].read_text().splitlines()
        assert len(lines) == 20
        assert all(line.split("\t")[1] in ("train", "val", "test")
                   for line in lines)

    def test_train_run_dir_contents(self, work):
        run = work["run"]
        assert (run / "run_config.json").exists()
        assert (run / "train_log.jsonl").exists()
        assert work["best"].exists() and work["last"].exists()
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["config"]["model"]["model_dim"] == 8
        assert manifest["config"]["max_iterations"] == 20
        assert str(work["store"]) in manifest["inputs"]
        assert manifest["inputs"][str(work["store"])] == sha256(work["store"])
        config = json.loads((run / "run_config.json").read_text())
        assert config["seed"] == 7

    def test_train_log_records_evals(self, work):
        lines = [json.loads(l) for l in
                 (work["run"] / "train_log.jsonl").read_text().splitlines()]
        evals = [l for l in lines if l["kind"] == "eval"]
        (best,) = [l for l in lines if l["kind"] == "best"]
        assert [e["iteration"] for e in evals] == [10, 20]
        assert best["best_iteration"] in (10, 20)

    def test_second_train_gets_timestamped_sibling(self, work, capsys):
        before = set(work["root"].iterdir())
        assert main(["train", "--store", str(work["store"]),
                     "--split-file", str(work["split"]),
                     "--run-dir", str(work["run"]),
                     "--override", TINY,
                     "--override", "max_iterations=2",
                     "--override", "eval_every=2"]) == 0
        created = set(work["root"].iterdir()) - before
        assert len(created) == 1
        (sibling,) = created
        assert sibling.name.startswith("run-")
        # original run untouched
        assert json.loads((work["run"] / "manifest.json").read_text())[
            "config"]["max_iterations"] == 20

    def test_resume_extends_the_log(self, work):
        out = work["root"] / "resumed"
        assert main(["resume", "--from-run", str(work["run"]),
                     "--store", str(work["store"]),
                     "--split-file", str(work["split"]),
                     "--run-dir", str(out),
                     "--override", "max_iterations=30"]) == 0
        lines = [json.loads(l) for l in
                 (out / "train_log.jsonl").read_text().splitlines()]
        evals = [l for l in lines if l["kind"] == "eval"]
        assert [e["iteration"] for e in evals] == [10, 20, 30]
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "resume"
        assert str(work["last"]) in manifest["inputs"]

    def test_eval_writes_report_pair(self, work, capsys):
        out = work["root"] / "eval"
        assert main(["eval", "--checkpoint", str(work["best"]),
                     "--store", str(work["store"]),
                     "--split-file", str(work["split"]),
                     "--split", "test",
                     "--meta", str(work["meta"]),
                     "--out-dir", str(out)]) == 0
        printed = capsys.readouterr().out
        assert "accuracy" in printed and "kappa" in printed
        report = json.loads((out / "report.json").read_text())
        assert len(report["matrix"]) == 5
        assert set(report["strata"]) == {"age", "race", "sex"}
        tsv = (out / "report.tsv").read_text().splitlines()
        assert tsv[0] == "metric\tvalue"
        assert any(line.startswith("REM\t") for line in tsv)

    def test_predict_csv_layout(self, work):
        out = work["root"] / "preds.csv"
        assert main(["predict", "--checkpoint", str(work["best"]),
                     "--store", str(work["store"]),
                     "--split-file", str(work["split"]),
                     "--split", "val", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "patient_key,epoch_index,true_stage,predicted_stage"
        assert len(lines) > 1
        key, idx, t, p = lines[1].split(",")
        assert key.startswith("synth")
        assert t in ("W", "N1", "N2", "N3", "REM")

    def test_export_features_subsample(self, work):
        out = work["root"] / "features.csv"
        assert main(["export-features", "--checkpoint", str(work["best"]),
                     "--store", str(work["store"]),
                     "--subsample", "9", "--seed", "3",
                     "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 10
        assert lines[0].split(",")[:2] == ["f0", "f1"]
        assert lines[0].split(",")[-1] == "label"

    def test_export_hypnogram_with_figure(self, work):
        out = work["root"] / "night.csv"
        fig = work["root"] / "night.png"
        patient = work["split"].read_text().splitlines()[0].split("\t")[0]
        assert main(["export-hypnogram", "--checkpoint", str(work["best"]),
                     "--store", str(work["store"]),
                     "--patient", patient,
                     "--out", str(out), "--figure", str(fig)]) == 0
        assert out.read_text().startswith("epoch_index,true_stage,predicted_stage")
        assert fig.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_report_renders_figures(self, work):
        eval_dir = work["root"] / "eval"
        out = work["root"] / "figures"
        assert main(["report", "--eval-report", str(eval_dir / "report.json"),
                     "--hypnogram", str(work["root"] / "night.csv"),
                     "--out-dir", str(out)]) == 0
        summary = (out / "summary.tsv").read_text().splitlines()
        assert summary[0] == "metric\tvalue"
        assert len(summary) == 6
        for name in ("confusion.png", "stage_metrics.png",
                     "age_accuracy.png", "hypnogram.png"):
            assert (out / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n", name
        assert (out / "manifest.json").exists()

    def test_ablate_two_channels(self, work):
        out = work["root"] / "ablation"
        assert main(["ablate", "--store", str(work["store"]),
                     "--split-file", str(work["split"]),
                     "--run-dir", str(out),
                     "--channels", "F4-M1,CZ-O1", "--split", "val",
                     "--override", TINY,
                     "--override", "max_iterations=4",
                     "--override", "eval_every=4",
                     "--override", "batch_size=8"]) == 0
        lines = (out / "ablation.csv").read_text().splitlines()
        assert lines[0] == "channel,W,N1,N2,N3,REM,overall"
        assert [l.split(",")[0] for l in lines[1:]] == ["F4-M1", "CZ-O1"]
        assert (out / "checkpoints" / "ablate-F4-M1" / "best.ssck").exists()


def montage_recording(patient, seconds=120, labels=("W", "N2", "N2", "R"),
                      drop=()):
    channels = []
    rng = np.random.default_rng(hash(patient) % 2**32)
    for name in MONTAGE:
        if name in drop:
            continue
        header = SignalHeader(label=f"EEG {name}", physical_dim="uV",
                              physical_min=-1000, physical_max=1000,
                              digital_min=-32768, digital_max=32767,
                              samples_per_record=128)
        channels.append(Channel(header,
                                rng.normal(size=128 * seconds) * 30, 128.0))
    annotations = [EdfAnnotation(30.0 * i, 30.0, f"Sleep stage {s}")
                   for i, s in enumerate(labels)]
    header = EdfHeader(patient_id=patient,
                       start_datetime=datetime(2022, 3, 4, 21, 0, 0),
                       record_duration_s=1.0)
    return Recording(header=header, channels=channels, annotations=annotations)


class TestIngest:
    def test_mixed_directory(self, tmp_path, capsys):
        edf_dir = tmp_path / "edf"
        edf_dir.mkdir()
        (edf_dir / "a.edf").write_bytes(write_edf(montage_recording("kidA")))
        (edf_dir / "b.edf").write_bytes(write_edf(montage_recording("kidB")))
        (edf_dir / "broken.edf").write_bytes(
            write_edf(montage_recording("kidC", drop=("O2-M1",))))
        out = tmp_path / "cohort.ssep"
        assert main(["ingest", "--edf-dir", str(edf_dir),
                     "--out", str(out)]) == 0
        report = json.loads((tmp_path / "cohort.report.json").read_text())
        assert report["rejected_files"] == ["broken.edf"]
        assert report["total_epochs"] == 8        # 4 scored epochs x 2 files
        assert report["class_counts"]["N2"] == 4
        assert report["duration_hours"]["n"] == 2
        by_file = {e["file"]: e for e in report["files"]}
        assert by_file["a.edf"]["patient_key"] == "kidA"
        assert "MissingChannel" in by_file["broken.edf"]["error"]
        assert "broken.edf" in capsys.readouterr().out

    def test_rerun_digest_is_identical(self, tmp_path):
        edf_dir = tmp_path / "edf"
        edf_dir.mkdir()
        (edf_dir / "a.edf").write_bytes(write_edf(montage_recording("kidA")))
        one, two = tmp_path / "one.ssep", tmp_path / "two.ssep"
        assert main(["ingest", "--edf-dir", str(edf_dir), "--out", str(one)]) == 0
        assert main(["ingest", "--edf-dir", str(edf_dir), "--out", str(two)]) == 0
        assert sha256(one) == sha256(two)

    def test_empty_directory_is_a_data_error(self, tmp_path, capsys):
        empty = tmp_path / "none"
        empty.mkdir()
        assert main(["ingest", "--edf-dir", str(empty),
                     "--out", str(tmp_path / "x.ssep")]) == 2
        assert "no .edf files" in capsys.readouterr().err


class TestExitCodes:
    def test_unknown_override_key_is_user_error(self, tmp_path, capsys):
        code = main(["train", "--store", "irrelevant", "--split-file", "x",
                     "--run-dir", str(tmp_path / "r"),
                     "--override", "momentum=0.9"])
        assert code == 1
        assert "momentum" in capsys.readouterr().err

    def test_missing_store_is_user_error(self, tmp_path, capsys):
        code = main(["split", "--store", str(tmp_path / "ghost.ssep"),
                     "--out", str(tmp_path / "s.tsv")])
        assert code == 1

    def test_corrupt_store_is_data_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.ssep"
        bad.write_bytes(b"not a container")
        code = main(["split", "--store", str(bad),
                     "--out", str(tmp_path / "s.tsv")])
        assert code == 2
        assert "data error" in capsys.readouterr().err

    def test_malformed_eval_report_is_data_error(self, tmp_path):
        bad = tmp_path / "report.json"
        bad.write_text("{nope")
        assert main(["report", "--eval-report", str(bad),
                     "--out-dir", str(tmp_path / "figs")]) == 2

    def test_bad_override_syntax(self, tmp_path, capsys):
        code = main(["train", "--store", "s", "--split-file", "f",
                     "--run-dir", str(tmp_path / "r"),
                     "--override", "just-a-word"])
        assert code == 1
