import json

import pytest

from mitodet import config as C


class TestRoundTrip:
    def test_defaults_fixed_point(self):
        cfg = C.RunConfig()
        flat = C.to_flat(cfg)
        assert C.from_flat(flat) == cfg
        assert C.to_flat(C.from_flat(flat)) == flat

    def test_file_round_trip(self, tmp_path):
        cfg = C.RunConfig(epochs=5, learning_rate=3e-4, use_fg_head=False)
        p = C.save_config(cfg, tmp_path / "c.json")
        assert C.load_config(p) == cfg

    def test_partial_document(self):
        cfg = C.from_flat({"train.epochs": 7, "augment.hue": 0.05})
        assert cfg.epochs == 7
        assert cfg.augment.hue == 0.05
        assert cfg.batch_size == C.RunConfig().batch_size

    def test_anchor_keys_reshape_model(self):
        cfg = C.from_flat({
            "anchors.strides": [4, 8],
            "anchors.base_sizes": [10, 20],
            "anchors.scales": [1.0, 1.5],
            "anchors.aspect_ratios": [1.0],
        })
        assert len(cfg.anchors) == 2
        assert cfg.backbone.pyramid_strides == (4, 8)
        assert cfg.anchors[1].base_size == 20
        assert cfg.anchors[0].scales == (1.0, 1.5)

    def test_unknown_key_rejected(self):
        with pytest.raises(KeyError) as exc:
            C.from_flat({"train.epoch": 1})
        assert "train.epoch" in str(exc.value)

    def test_mismatched_anchor_lists_rejected(self):
        with pytest.raises(ValueError):
            C.from_flat({"anchors.strides": [4, 8], "anchors.base_sizes": [10]})


class TestValidation:
    def test_bad_values(self):
        for kw in (dict(epochs=-1), dict(batch_size=0), dict(learning_rate=0.0),
                   dict(val_fraction=1.0), dict(pos_iou=0.3, neg_iou=0.4),
                   dict(score_threshold=2.0), dict(max_detections=0)):
            with pytest.raises(ValueError):
                C.RunConfig(**kw)

    def test_anchor_stride_consistency_enforced(self):
        from mitodet.geometry import AnchorLevelConfig
        levels = (AnchorLevelConfig(stride=4, base_size=8, scales=(1.0,),
                                    aspect_ratios=(1.0,)),)
        with pytest.raises(ValueError):
            C.RunConfig(anchors=levels)  # backbone still at (8, 16, 32)


class TestOverrides:
    def test_apply(self):
        cfg = C.apply_overrides(C.RunConfig(), {"train.seed": 9, "output.dir": "x"})
        assert cfg.seed == 9 and cfg.output_dir == "x"

    def test_unknown_override_rejected(self):
        with pytest.raises(KeyError):
            C.apply_overrides(C.RunConfig(), {"nope": 1})

    def test_parse_override_json_and_bare(self):
        assert C.parse_override("train.epochs=5") == ("train.epochs", 5)
        assert C.parse_override("model.variant=tiny") == ("model.variant", "tiny")
        assert C.parse_override('anchors.strides=[4,8]') == ("anchors.strides", [4, 8])
        assert C.parse_override("augment.enabled=false") == ("augment.enabled", False)
        with pytest.raises(ValueError):
            C.parse_override("no-equals-sign")


class TestOutputRoot:
    def test_env_var_prefixes_relative(self, monkeypatch, tmp_path):
        monkeypatch.setenv(C.OUTPUT_ROOT_ENV, str(tmp_path))
        cfg = C.RunConfig(output_dir="runs/a")
        assert C.resolve_output_dir(cfg) == tmp_path / "runs/a"

    def test_absolute_untouched(self, monkeypatch, tmp_path):
        monkeypatch.setenv(C.OUTPUT_ROOT_ENV, str(tmp_path))
        cfg = C.RunConfig(output_dir="/abs/path")
        assert str(C.resolve_output_dir(cfg)) == "/abs/path"

    def test_unset_untouched(self, monkeypatch):
        monkeypatch.delenv(C.OUTPUT_ROOT_ENV, raising=False)
        cfg = C.RunConfig(output_dir="runs/b")
        assert str(C.resolve_output_dir(cfg)) == "runs/b"


def test_config_diff():
    a = C.RunConfig()
    b = C.RunConfig(epochs=3)
    d = C.config_diff(a, b)
    assert d == {"train.epochs": (10, 3)}


def test_load_rejects_non_object(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps([1, 2, 3]))
    with pytest.raises(ValueError):
        C.load_config(p)
    p.write_text("{ not json")
    with pytest.raises(ValueError):
        C.load_config(p)
