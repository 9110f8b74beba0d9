import json
import csv

import pytest

from mitodet import cli


def run(argv, capsys):
    code = cli.main(argv)
    captured = capsys.readouterr()
    events = [json.loads(line) for line in captured.out.splitlines() if line.strip()]
    return code, events, captured.err


FAST_FLAGS = [
    "--set", "data.patch_size=48",
    "--set", "data.patches_per_case=2",
    "--set", "train.epochs=1",
    "--set", "train.batch_size=8",
    "--set", "train.learning_rate=1e-3",
    "--set", "model.fpn_channels=16",
    "--set", "model.head_hidden=32",
    "--set", "model.head_convs=1",
    "--set", "anchors.strides=[8]",
    "--set", "anchors.base_sizes=[12]",
    "--set", "anchors.scales=[1.0]",
    "--set", "anchors.aspect_ratios=[1.0]",
    "--set", "augment.crop_size=40",
]


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_ds")
    code = cli.main(["synth", "--out-dir", str(root), "--cases", "12",
                     "--image-size", "64", "--seed", "4"])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def trained_run(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    code = cli.main(["train", "--manifest", str(dataset_dir / "manifest.json"),
                     "--output-dir", str(out), *FAST_FLAGS])
    assert code == 0
    return out


class TestSynth:
    def test_emits_manifest_and_hash(self, tmp_path, capsys):
        code, events, _ = run(["synth", "--out-dir", str(tmp_path / "d"),
                               "--cases", "6", "--image-size", "48"], capsys)
        assert code == 0
        done = events[-1]
        assert done["event"] == "done"
        assert done["n_cases"] == 6
        assert len(done["dataset_hash"]) == 64
        assert (tmp_path / "d" / "manifest.json").is_file()

    def test_round_robin_two_per_type(self, tmp_path, capsys):
        from mitodet import data as D
        code, _, _ = run(["synth", "--out-dir", str(tmp_path / "d"),
                          "--cases", "12", "--image-size", "48"], capsys)
        assert code == 0
        m = D.load_dataset(tmp_path / "d" / "manifest.json")
        for t in D.DEFAULT_TUMOR_TYPES:
            assert sum(c.tumor_type == t for c in m.cases) == 2

    def test_rejects_bad_count(self, tmp_path, capsys):
        code, _, err = run(["synth", "--out-dir", str(tmp_path / "d"),
                            "--cases", "0"], capsys)
        assert code == 1
        assert "synth-invalid" in err


class TestTrain:
    def test_epoch_rows_and_report(self, dataset_dir, trained_run, capsys):
        # one epoch row + done row were already emitted by the fixture;
        # re-run against the same output dir to capture them here
        out = trained_run
        code, events, _ = run(
            ["train", "--manifest", str(dataset_dir / "manifest.json"),
             "--output-dir", str(out), *FAST_FLAGS], capsys)
        assert code == 0
        kinds = [e["event"] for e in events]
        assert kinds[0] == "train-start"
        assert "epoch" in kinds
        assert kinds[-1] == "done"
        epoch_rows = [e for e in events if e["event"] == "epoch"]
        assert {"det_cls", "det_reg", "tumor_ce", "fg_focal", "total"} <= set(epoch_rows[0])
        assert (out / "report.json").is_file()
        assert (out / "config.json").is_file()

    def test_missing_manifest_fails(self, tmp_path, capsys):
        code, _, err = run(["train", "--manifest", str(tmp_path / "no.json"),
                            "--output-dir", str(tmp_path / "o")], capsys)
        assert code == 1
        assert "dataset-invalid" in err

    def test_no_manifest_configured(self, tmp_path, capsys):
        code, _, err = run(["train", "--output-dir", str(tmp_path / "o")], capsys)
        assert code == 1
        assert "config-invalid" in err

    def test_unknown_key_fails(self, dataset_dir, tmp_path, capsys):
        code, _, err = run(
            ["train", "--manifest", str(dataset_dir / "manifest.json"),
             "--output-dir", str(tmp_path / "o"), "--set", "bogus=1"], capsys)
        assert code == 1
        assert "config-invalid" in err and "bogus" in err


class TestEvaluate:
    def test_happy_path_uses_checkpoint_config(self, dataset_dir, trained_run,
                                               tmp_path, capsys):
        report_path = tmp_path / "r.json"
        code, events, _ = run(
            ["evaluate", "--checkpoint", str(trained_run / "best.pt"),
             "--manifest", str(dataset_dir / "manifest.json"),
             "--out", str(report_path)], capsys)
        assert code == 0
        rep = events[-1]
        assert rep["event"] == "report"
        assert 0.0 <= rep["map"] <= 1.0
        assert json.loads(report_path.read_text())["map"] == rep["map"]

    def test_missing_checkpoint(self, tmp_path, capsys):
        code, _, err = run(["evaluate", "--checkpoint", str(tmp_path / "x.pt")],
                           capsys)
        assert code == 1
        assert "checkpoint-missing" in err

    def test_structural_mismatch_refused_with_diff(self, dataset_dir, trained_run,
                                                   capsys):
        code, _, err = run(
            ["evaluate", "--checkpoint", str(trained_run / "best.pt"),
             "--manifest", str(dataset_dir / "manifest.json"),
             "--set", "model.fpn_channels=99"], capsys)
        assert code == 1
        assert "config-mismatch" in err
        assert "model.fpn_channels" in err
        assert "99" in err

    def test_empty_split_for_absent_type(self, dataset_dir, trained_run, capsys):
        from mitodet import data as D
        doc = json.loads((dataset_dir / "manifest.json").read_text())
        doc["cases"] = [c for c in doc["cases"]
                        if c["tumor_type"] != "neuroendocrine_tumor"]
        trimmed = dataset_dir / "trimmed.json"
        trimmed.write_text(json.dumps(doc))
        code, _, err = run(
            ["evaluate", "--checkpoint", str(trained_run / "best.pt"),
             "--manifest", str(trimmed)], capsys)
        assert code == 1
        assert "empty-test-split" in err


class TestAblate:
    def test_eight_rows_and_csv(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "ab"
        code, events, _ = run(
            ["ablate", "--manifest", str(dataset_dir / "manifest.json"),
             "--output-dir", str(out), *FAST_FLAGS], capsys)
        assert code == 0
        rows = [e for e in events if e["event"] == "ablation-row"]
        assert len(rows) == 8
        flags = [(r["fg_head"], r["tumor_head"], r["augmentation"]) for r in rows]
        from mitodet.evaluation import ABLATION_ROW_ORDER
        assert flags == [tuple(t) for t in ABLATION_ROW_ORDER]
        with (out / "ablation.csv").open() as fh:
            table = list(csv.reader(fh))
        assert len(table) == 9
        assert (out / "ablation.json").is_file()


def test_output_root_env(dataset_dir, tmp_path, monkeypatch, capsys):
    from mitodet.config import OUTPUT_ROOT_ENV
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    code, events, _ = run(
        ["train", "--manifest", str(dataset_dir / "manifest.json"),
         "--output-dir", "nested/run", *FAST_FLAGS], capsys)
    assert code == 0
    assert (tmp_path / "nested/run/last.pt").is_file()
