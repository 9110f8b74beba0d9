import json

import pytest
import torch

from mitodet import config as C
from mitodet import data as D
from mitodet.train import TrainingDiverged, split_train_val, train_model


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_ds")
    return D.generate_synthetic_dataset(18, root, image_size=64, seed=2)


def run_config(out, **overrides) -> C.RunConfig:
    flat = {
        "data.patch_size": 48,
        "data.patches_per_case": 2,
        "train.epochs": 2,
        "train.batch_size": 8,
        "train.learning_rate": 1e-3,
        "train.pos_iou": 0.4,
        "train.neg_iou": 0.3,
        "model.fpn_channels": 16,
        "model.head_hidden": 32,
        "model.head_convs": 1,
        "anchors.strides": [8],
        "anchors.base_sizes": [12],
        "anchors.scales": [1.0],
        "anchors.aspect_ratios": [1.0],
        "augment.crop_size": 40,
        "output.dir": str(out),
    }
    flat.update(overrides)
    return C.from_flat(flat)


class TestSplit:
    def test_fraction_and_determinism(self, dataset):
        train, val = split_train_val(dataset.cases, 0.25, seed=3)
        assert len(val) == round(len(dataset.cases) * 0.25)
        assert len(train) + len(val) == len(dataset.cases)
        train2, val2 = split_train_val(dataset.cases, 0.25, seed=3)
        assert [c.case_id for c in val] == [c.case_id for c in val2]

    def test_zero_fraction(self, dataset):
        train, val = split_train_val(dataset.cases, 0.0, seed=0)
        assert val == []
        assert len(train) == len(dataset.cases)


class TestTrainModel:
    def test_history_and_files(self, dataset, tmp_path):
        out = tmp_path / "run"
        res = train_model(dataset, run_config(out))
        assert len(res.history) == 2
        for row in res.history:
            assert set(row) >= {"epoch", "det_cls", "det_reg", "tumor_ce",
                                "fg_focal", "total", "val_map"}
        assert (out / "config.json").is_file()
        assert (out / "last.pt").is_file()
        assert (out / "best.pt").is_file()
        log_rows = [json.loads(line)
                    for line in (out / "train_log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in log_rows] == [1, 2]

    def test_disabled_heads_log_exact_zero(self, dataset, tmp_path):
        cfg = run_config(tmp_path / "r", **{
            "model.use_tumor_head": False,
            "model.use_fg_head": False,
            "train.epochs": 1,
        })
        res = train_model(dataset, cfg)
        assert res.history[0]["tumor_ce"] == 0.0
        assert res.history[0]["fg_focal"] == 0.0
        assert res.history[0]["total"] > 0.0

    def test_zero_epochs_emits_initialized_checkpoint(self, dataset, tmp_path):
        out = tmp_path / "r0"
        res = train_model(dataset, run_config(out, **{"train.epochs": 0}))
        assert res.history == []
        assert (out / "last.pt").is_file()
        assert (out / "best.pt").is_file()
        assert res.best_val_map is None

    @staticmethod
    def _strip_timing(history):
        return [{k: v for k, v in row.items() if k != "seconds"} for row in history]

    def test_deterministic_repeat(self, dataset, tmp_path):
        res_a = train_model(dataset, run_config(tmp_path / "a"))
        res_b = train_model(dataset, run_config(tmp_path / "b"))
        assert self._strip_timing(res_a.history) == self._strip_timing(res_b.history)
        sa, sb = res_a.model.state_dict(), res_b.model.state_dict()
        assert set(sa) == set(sb)
        for k in sa:
            assert torch.equal(sa[k], sb[k]), k

    def test_seed_changes_trajectory(self, dataset, tmp_path):
        res_a = train_model(dataset, run_config(tmp_path / "a2"))
        res_c = train_model(dataset, run_config(tmp_path / "c", **{"train.seed": 1}))
        assert self._strip_timing(res_a.history) != self._strip_timing(res_c.history)

    def test_divergence_aborts_and_keeps_checkpoint(self, dataset, tmp_path):
        out = tmp_path / "boom"
        cfg = run_config(out, **{"train.learning_rate": 1e12, "train.epochs": 5})
        with pytest.raises(TrainingDiverged):
            train_model(dataset, cfg)
        # the last finite-state checkpoint is still loadable
        from mitodet.model import load_checkpoint
        model, sidecar = load_checkpoint(out / "last.pt")
        assert model is not None

    def test_empty_train_split_raises(self, dataset, tmp_path):
        # a manifest holding only the held-out type leaves nothing to train on
        only_held_out = tuple(c for c in dataset.cases if c.tumor_type == "lymphoma")
        manifest = D.Manifest(tumor_types=dataset.tumor_types, cases=only_held_out)
        cfg = run_config(tmp_path / "r", **{
            "data.held_out": "lymphoma", "data.val_fraction": 0.0})
        with pytest.raises(ValueError):
            train_model(manifest, cfg)

    def test_augmentation_disabled_uses_full_patch(self, dataset, tmp_path):
        cfg = run_config(tmp_path / "r", **{
            "augment.enabled": False, "train.epochs": 1})
        res = train_model(dataset, cfg)
        assert len(res.history) == 1
