"""End-to-end runs of the command-line interface via main(argv)."""

import json
import struct

import numpy as np
import pytest

from osvit.cli import main
from osvit.volume_io import Volume, read_metadata_csv, read_rvol, write_rvol


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert run("synth", "--subjects", 6, "--seed", 7, "--out", d) == 0
    return d


@pytest.fixture(scope="module")
def train_dir(tmp_path_factory, synth_dir):
    d = tmp_path_factory.mktemp("run")
    rc = run("train", "--data", synth_dir, "--csv", synth_dir / "metadata.csv",
             "--out", d, "--batch", 4, "--max-epochs", 2, "--seed", 5,
             "--val-fraction", 0.0, "--deterministic")
    assert rc == 0
    return d


class TestSynth:
    def test_writes_four_volumes_per_subject_plus_metadata(self, synth_dir):
        rvols = sorted(p.name for p in synth_dir.glob("*.rvol"))
        assert len(rvols) == 24
        assert "synth000_flair.rvol" in rvols and "synth005_t2.rvol" in rvols
        records = read_metadata_csv(synth_dir / "metadata.csv")
        assert len(records) == 6

    def test_manifest_written_with_ok_status(self, synth_dir):
        doc = json.loads((synth_dir / "manifest.json").read_text())
        assert doc["status"] == "ok"
        assert doc["command"] == "synth"
        assert doc["seed"] == 7
        assert doc["config"]["subjects"] == 6
        assert doc["finished"] is not None

    def test_rerun_is_bitwise_identical_except_manifest(self, synth_dir, tmp_path):
        assert run("synth", "--subjects", 6, "--seed", 7, "--out", tmp_path) == 0
        for p in sorted(synth_dir.iterdir()):
            if p.name == "manifest.json":
                continue  # carries wall-clock timestamps
            assert (tmp_path / p.name).read_bytes() == p.read_bytes(), p.name

    def test_too_few_subjects_is_config_error(self, tmp_path):
        assert run("synth", "--subjects", 2, "--out", tmp_path / "x") == 1


class TestPreprocess:
    @pytest.fixture()
    def raw_dir(self, tmp_path):
        d = tmp_path / "raw"
        d.mkdir()
        rng = np.random.default_rng(3)
        write_rvol(Volume(rng.uniform(0, 90, size=(9, 11, 13)).astype(np.float32)),
                   d / "a.rvol")
        # minimal float32 single-file volume in the medical interchange layout
        nx, ny, nz = 12, 10, 8
        hdr = bytearray(348)
        struct.pack_into("<i", hdr, 0, 348)
        struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
        struct.pack_into("<h", hdr, 70, 16)
        struct.pack_into("<f", hdr, 108, 352.0)
        struct.pack_into("<f", hdr, 112, 1.0)
        payload = rng.uniform(0, 100, size=(nx, ny, nz)).astype(np.float32)
        hdr[344:348] = b"n+1\x00"
        (d / "b.nii").write_bytes(bytes(hdr) + b"\x00" * 4 + payload.tobytes(order="F"))
        return d

    def test_converts_both_container_formats(self, raw_dir, tmp_path):
        out = tmp_path / "out"
        assert run("preprocess", "--in", raw_dir, "--out", out,
                   "--target", "5x6x6") == 0
        for name in ("a.rvol", "b.rvol"):
            v = read_rvol(out / name)
            assert v.dims == (5, 6, 6)
            assert v.dtype == np.uint8

    def test_empty_input_dir_reports_no_volumes(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        rc = run("preprocess", "--in", tmp_path / "empty", "--out", tmp_path / "o")
        assert rc == 1
        assert "no volumes found" in capsys.readouterr().err

    def test_continues_past_bad_file_and_exits_nonzero(self, raw_dir, tmp_path):
        (raw_dir / "broken.rvol").write_bytes(b"NOPE" + b"\x00" * 30)
        out = tmp_path / "out"
        rc = run("preprocess", "--in", raw_dir, "--out", out, "--target", "5x6x6")
        assert rc == 2
        assert (out / "a.rvol").exists() and (out / "b.rvol").exists()
        doc = json.loads((out / "manifest.json").read_text())
        assert doc["status"] == "failed"
        assert len(doc["file_errors"]) == 1
        assert "broken.rvol" in doc["file_errors"][0]["file"]

    def test_bad_target_syntax_is_config_error(self, raw_dir, tmp_path):
        assert run("preprocess", "--in", raw_dir, "--out", tmp_path / "o",
                   "--target", "50x64") == 1


class TestTrain:
    def test_writes_all_artifacts(self, train_dir):
        for name in ("manifest.json", "split.txt", "trainlog.jsonl",
                     "best.osvt", "last.osvt", "metrics.json"):
            assert (train_dir / name).exists(), name

    def test_manifest_echoes_resolved_config(self, train_dir):
        doc = json.loads((train_dir / "manifest.json").read_text())
        assert doc["status"] == "ok"
        assert doc["config"]["train"]["learning_rate"] == pytest.approx(1e-4)
        assert doc["config"]["train"]["batch_size"] == 4
        assert doc["config"]["train"]["deterministic_mode"] is True
        assert doc["config"]["model"]["input_dims"] == [50, 64, 64]
        assert doc["seed"] == 5

    def test_split_covers_every_subject_once(self, train_dir):
        lines = (train_dir / "split.txt").read_text().splitlines()
        assert len(lines) == 6
        sids = [line.split(",")[0] for line in lines]
        assert sids == sorted(sids)
        parts = {line.split(",")[1] for line in lines}
        assert parts == {"train", "test"}

    def test_metrics_cover_both_partitions(self, train_dir):
        doc = json.loads((train_dir / "metrics.json").read_text())
        assert set(doc) == {"train", "test"}
        for partition in ("train", "test"):
            assert doc[partition]["partition"] == partition
            assert doc[partition]["samples"] > 0
            assert len(doc[partition]["confusion_matrix"]) == 3

    def test_trainlog_is_one_json_object_per_epoch(self, train_dir):
        rows = [json.loads(line) for line in
                (train_dir / "trainlog.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in rows] == [1, 2]
        assert all("train_loss" in r and "elapsed_ms" in r for r in rows)

    def test_deterministic_rerun_reproduces_artifacts_bitwise(
            self, synth_dir, train_dir, tmp_path):
        rc = run("train", "--data", synth_dir, "--csv", synth_dir / "metadata.csv",
                 "--out", tmp_path, "--batch", 4, "--max-epochs", 2, "--seed", 5,
                 "--val-fraction", 0.0, "--deterministic")
        assert rc == 0
        for name in ("best.osvt", "metrics.json", "split.txt"):
            assert (tmp_path / name).read_bytes() == \
                (train_dir / name).read_bytes(), name

    def test_cohort_below_two_subjects_is_config_error(self, synth_dir, tmp_path):
        csv_path = tmp_path / "thin.csv"
        lines = (synth_dir / "metadata.csv").read_text().splitlines()
        csv_path.write_text("\n".join(lines[:2]) + "\n")
        rc = run("train", "--data", synth_dir, "--csv", csv_path,
                 "--out", tmp_path / "run")
        assert rc == 1
        doc = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert doc["status"] == "failed"
        assert "cohort" in doc["error"]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exits_3_and_keeps_best_checkpoint(self, synth_dir, tmp_path):
        rc = run("train", "--data", synth_dir, "--csv", synth_dir / "metadata.csv",
                 "--out", tmp_path, "--batch", 4, "--max-epochs", 3,
                 "--lr", 1e12, "--val-fraction", 0.0)
        assert rc == 3
        assert (tmp_path / "best.osvt").exists()
        doc = json.loads((tmp_path / "manifest.json").read_text())
        assert doc["status"] == "failed"
        assert "diverged" in doc["error"]


class TestEval:
    def test_split_partition_report(self, synth_dir, train_dir, capsys):
        rc = run("eval", "--model", train_dir / "best.osvt", "--data", synth_dir,
                 "--csv", synth_dir / "metadata.csv",
                 "--split", train_dir / "split.txt")
        assert rc == 0
        out = capsys.readouterr().out
        assert "partition: test" in out
        assert "accuracy:" in out
        assert "confusion matrix" in out

    def test_all_selector_uses_every_sample(self, synth_dir, train_dir, capsys):
        rc = run("eval", "--model", train_dir / "best.osvt", "--data", synth_dir,
                 "--csv", synth_dir / "metadata.csv", "--all", "--format", "json")
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["partition"] == "all"
        assert doc["samples"] == 24

    def test_missing_selector_is_usage_error(self, synth_dir, train_dir, capsys):
        rc = run("eval", "--model", train_dir / "best.osvt", "--data", synth_dir,
                 "--csv", synth_dir / "metadata.csv")
        assert rc == 1
        assert "--split" in capsys.readouterr().err

    def test_repeat_evaluation_is_identical(self, synth_dir, train_dir, capsys):
        argv = ["eval", "--model", str(train_dir / "best.osvt"), "--data",
                str(synth_dir), "--csv", str(synth_dir / "metadata.csv"), "--all"]
        assert main(argv) == 0
        first = capsys.readouterr().out
        assert main(argv) == 0
        assert capsys.readouterr().out == first

    def test_out_dir_receives_report_and_manifest(self, synth_dir, train_dir, tmp_path):
        rc = run("eval", "--model", train_dir / "best.osvt", "--data", synth_dir,
                 "--csv", synth_dir / "metadata.csv", "--all",
                 "--format", "json", "--out", tmp_path)
        assert rc == 0
        report = json.loads((tmp_path / "report_all.json").read_text())
        assert report["samples"] == 24
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["status"] == "ok"


class TestPredict:
    def test_prints_code_name_and_probabilities(self, synth_dir, train_dir, capsys):
        rc = run("predict", "--model", train_dir / "best.osvt",
                 "--volume", synth_dir / "synth000_t1.rvol", "--age", 61.5)
        assert rc == 0
        out = capsys.readouterr().out.strip()
        assert out.startswith("class=")
        assert any(name in out for name in ("Long", "Medium", "Short"))
        probs = [float(p) for p in
                 out.split("probs=[")[1].rstrip("]").split(",")]
        assert len(probs) == 3
        assert sum(probs) == pytest.approx(1.0, abs=1e-5)

    def test_non_positive_age_is_config_error(self, synth_dir, train_dir, capsys):
        rc = run("predict", "--model", train_dir / "best.osvt",
                 "--volume", synth_dir / "synth000_t1.rvol", "--age", 0)
        assert rc == 1
        assert "age" in capsys.readouterr().err

    def test_unpreprocessed_dims_point_at_preprocess_step(
            self, train_dir, tmp_path, capsys):
        small = tmp_path / "small.rvol"
        write_rvol(Volume(np.zeros((10, 8, 8), dtype=np.uint8)), small)
        rc = run("predict", "--model", train_dir / "best.osvt",
                 "--volume", small, "--age", 50)
        assert rc == 1
        err = capsys.readouterr().err
        assert "50x64x64" in err
        assert "preprocess" in err


class TestExitCodes:
    def test_usage_error_exits_1(self):
        with pytest.raises(SystemExit) as exc_info:
            main(["train", "--nonsense"])
        assert exc_info.value.code == 1

    def test_missing_model_file_is_io_error(self, synth_dir, tmp_path):
        rc = run("predict", "--model", tmp_path / "missing.osvt",
                 "--volume", synth_dir / "synth000_t1.rvol", "--age", 50)
        assert rc == 2

    def test_thread_env_var_must_be_positive_integer(
            self, synth_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("OSVIT_THREADS", "zero")
        rc = run("preprocess", "--in", synth_dir, "--out", tmp_path / "o")
        assert rc == 1
