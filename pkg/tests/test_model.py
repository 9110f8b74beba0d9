import numpy as np
import pytest
import torch

from mitodet import geometry as G
from mitodet import model as M


def tiny_config(**kw):
    defaults = dict(fpn_channels=16, head_hidden=32, head_convs=1)
    defaults.update(kw)
    return M.BackboneConfig(variant="tiny", **defaults)


SMALL_LEVELS = tuple(
    G.AnchorLevelConfig(stride=s, base_size=2 * s, scales=(1.0,), aspect_ratios=(1.0,))
    for s in (8, 16, 32)
)


def small_model(**kw):
    torch.manual_seed(0)
    return M.MitosisDetector(tiny_config(), SMALL_LEVELS, num_tumor_classes=6, **kw)


class TestForwardShapes:
    def test_default_anchor_counts_on_128(self):
        torch.manual_seed(0)
        model = M.MitosisDetector(tiny_config())
        out = model(torch.rand(2, 3, 128, 128))
        counts = [t.shape[1] for t in out.cls_logits]
        assert counts == [2304, 576, 144]
        for cls_t, box_t, n in zip(out.cls_logits, out.box_deltas, counts):
            assert cls_t.shape == (2, n)
            assert box_t.shape == (2, n, 4)

    def test_matches_anchor_grid_on_odd_sizes(self):
        model = small_model()
        for size in ((96, 96), (100, 132), (72, 88)):
            out = model(torch.rand(1, 3, *size))
            anchors = G.generate_anchors(size, SMALL_LEVELS)
            assert tuple(t.shape[1] for t in out.cls_logits) == anchors.per_level_counts

    def test_aux_head_shapes(self):
        model = small_model()
        out = model(torch.rand(3, 3, 64, 64))
        assert out.tumor_logits.shape == (3, 6)
        assert out.fg_logit.shape == (3,)

    def test_aux_heads_optional(self):
        model = small_model(use_tumor_head=False, use_fg_head=False)
        out = model(torch.rand(1, 3, 64, 64))
        assert out.tumor_logits is None
        assert out.fg_logit is None
        assert model.tumor_head is None
        assert model.fg_head is None

    def test_rejects_bad_input(self):
        model = small_model()
        with pytest.raises(ValueError):
            model(torch.rand(3, 64, 64))
        with pytest.raises(ValueError):
            model(torch.rand(1, 3, 16, 16))  # smaller than deepest stride


def test_detection_init_identical_with_and_without_heads():
    """Auxiliary heads must not disturb the detection path's init draws."""
    a = small_model()
    b = small_model(use_tumor_head=False, use_fg_head=False)
    sa = a.state_dict()
    sb = b.state_dict()
    assert set(sb) <= set(sa)
    for k, v in sb.items():
        assert torch.equal(sa[k], v), k


def test_cls_head_bias_prior():
    # last-layer bias starts at the rare-foreground prior
    model = small_model()
    bias = model.cls_head.out.bias.detach()
    expected = -float(np.log((1 - 0.01) / 0.01))
    np.testing.assert_allclose(bias.numpy(), expected, rtol=1e-6)


class TestPredict:
    def test_impossible_threshold_gives_nothing(self):
        model = small_model()
        dets = M.predict(model, np.random.default_rng(0).uniform(size=(64, 64, 3)),
                         score_threshold=1.0)
        assert dets == []

    def test_detections_are_clipped_and_sorted(self):
        model = small_model()
        img = np.random.default_rng(1).uniform(size=(64, 64, 3)).astype(np.float32)
        dets = M.predict(model, img, score_threshold=0.0, max_detections=50)
        assert len(dets) <= 50
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)
        for d in dets:
            assert 0 <= d.box.x1 <= d.box.x2 <= 64
            assert 0 <= d.box.y1 <= d.box.y2 <= 64

    def test_max_detections_cap(self):
        model = small_model()
        img = np.zeros((64, 64, 3), dtype=np.float32)
        dets = M.predict(model, img, score_threshold=0.0, nms_threshold=1.0,
                         max_detections=5)
        assert len(dets) == 5


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = small_model()
        path = M.save_checkpoint(tmp_path / "ckpt.pt", model,
                                 class_names=["a", "b", "c", "d", "e", "f"],
                                 extra={"note": 1})
        loaded, sidecar = M.load_checkpoint(path)
        for k, v in model.state_dict().items():
            assert torch.equal(loaded.state_dict()[k], v), k
        assert sidecar["class_names"] == ["a", "b", "c", "d", "e", "f"]
        assert sidecar["extra"] == {"note": 1}

    def test_same_outputs_after_reload(self, tmp_path):
        model = small_model()
        M.save_checkpoint(tmp_path / "m.pt", model, class_names=list("abcdef"))
        loaded, _ = M.load_checkpoint(tmp_path / "m.pt")
        x = torch.rand(1, 3, 64, 64)
        model.eval()
        with torch.no_grad():
            a = model(x)
            b = loaded(x)
        assert torch.equal(a.cat_cls(), b.cat_cls())
        assert torch.equal(a.cat_deltas(), b.cat_deltas())

    def test_heads_flag_restored(self, tmp_path):
        model = small_model(use_tumor_head=False)
        M.save_checkpoint(tmp_path / "m.pt", model, class_names=list("abcdef"))
        loaded, _ = M.load_checkpoint(tmp_path / "m.pt")
        assert loaded.tumor_head is None
        assert loaded.fg_head is not None

    def test_missing_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            M.load_checkpoint(tmp_path / "nope.pt")


def test_config_validation():
    with pytest.raises(ValueError):
        M.BackboneConfig(variant="resnet18")
    with pytest.raises(ValueError):
        M.BackboneConfig(pyramid_strides=(8, 12))
    with pytest.raises(ValueError):
        M.BackboneConfig(pyramid_strides=(16, 8))
    with pytest.raises(ValueError):
        torch.manual_seed(0)
        # anchor strides must match the pyramid
        M.MitosisDetector(tiny_config(pyramid_strides=(8, 16)), SMALL_LEVELS)


def test_num_parameters_counts_trainable():
    n = M.num_parameters(tiny_config(), SMALL_LEVELS)
    model = small_model()
    assert n == sum(p.numel() for p in model.parameters() if p.requires_grad)
    assert n > 0
    # dropping the aux heads strictly shrinks the model
    n_det = M.num_parameters(tiny_config(), SMALL_LEVELS,
                             use_tumor_head=False, use_fg_head=False)
    assert n_det < n


def test_image_to_tensor():
    img = np.random.default_rng(0).uniform(size=(4, 6, 3)).astype(np.float32)
    t = M.image_to_tensor(img)
    assert t.shape == (3, 4, 6)
    np.testing.assert_allclose(t.permute(1, 2, 0).numpy(), img)
    with pytest.raises(ValueError):
        M.image_to_tensor(np.zeros((4, 6)))
