import json
import math

import numpy as np
import pytest

from acmixkit.anchors import URPC_ANCHORS
from acmixkit.boxes import BBox, Detection, iou_xyxy
from acmixkit.model import (BASE_WIDTHS, HeadOutput, ModelConfig, ModelError, build_model, decode_boxes, detect,
                            forward, load_weights, nms, save_weights)
from acmixkit.oracles import sigmoid_scalar
from acmixkit.tensor import ArchiveError, load_archive, save_archive

SMALL = dict(input_size=160, spp_pools=(1, 3, 5))


@pytest.fixture(scope="module")
def small_model():
    return build_model(ModelConfig(**SMALL, seed=5))


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(0).random((1, 3, 160, 160), dtype=np.float32)


class TestBuild:
    def test_deterministic_weights(self):
        a = build_model(ModelConfig(**SMALL, seed=11)).state()
        b = build_model(ModelConfig(**SMALL, seed=11)).state()
        c = build_model(ModelConfig(**SMALL, seed=12)).state()
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert any(not np.array_equal(a[k], c[k]) for k in a)

    def test_census(self, small_model):
        census = small_model.census()
        assert census["resnet_acmix"] >= 2
        assert census["sppcspc"] >= 1
        assert census["rep"] == 3
        assert census["ac_e_elan"] >= 1 and census["mp"] >= 3
        gams = small_model.layers_of("gam")
        assert any(n.startswith("backbone.") for n in gams) and any(n.startswith("head.") for n in gams)
        # one ResNet-ACmix right after the fourth CBS, one at the bottom of the backbone
        names = list(small_model.layers)
        assert names.index("backbone.resnet_acmix0") == names.index("backbone.stem3") + 1
        assert names.index("backbone.resnet_acmix1") == names.index("backbone.elan4") + 1

    def test_width_scaling(self):
        full = build_model(ModelConfig(**SMALL, width_multiple=1.0))
        quarter = build_model(ModelConfig(**SMALL, width_multiple=0.25))
        for name, layer in full.layers.items():
            q = quarter.layers[name]
            assert q.out_channels * 4 == layer.out_channels, name
            if name != "backbone.stem0":
                assert q.in_channels * 4 == layer.in_channels, name
        assert full.layers["backbone.stem0"].out_channels == BASE_WIDTHS["stem"][0]

    def test_invalid_width(self):
        with pytest.raises(ModelError):
            build_model(ModelConfig(**SMALL, width_multiple=0.1))
        with pytest.raises(ModelError):
            ModelConfig(input_size=100)
        with pytest.raises(ModelError, match="pool"):
            ModelConfig(input_size=160)  # 13 > 5
        with pytest.raises(ModelError):
            ModelConfig(input_size=640, spp_pools=(4, 9, 13))


class TestForward:
    def test_grid_law(self, small_model, image):
        heads = forward(small_model, image)
        assert [h.stride for h in heads] == [8, 16, 32]
        assert [h.grid for h in heads] == [(20, 20), (10, 10), (5, 5)]
        assert all(h.raw.shape[1] == 27 for h in heads)
        assert all(np.isfinite(h.raw).all() for h in heads)

    def test_num_classes_changes_channels(self, image):
        m = build_model(ModelConfig(**SMALL, num_classes=2))
        assert all(h.raw.shape[1] == 3 * 7 for h in m.forward(image))

    def test_batch_items_independent(self, small_model, image):
        pair = np.concatenate([image, image])
        heads = small_model.forward(pair)
        for h in heads:
            np.testing.assert_array_equal(h.raw[0], h.raw[1])
        single = small_model.forward(image)
        for h, s in zip(heads, single):
            np.testing.assert_array_equal(h.raw[:1], s.raw)

    def test_bad_input(self, small_model):
        with pytest.raises(ModelError):
            small_model.forward(np.zeros((1, 3, 128, 128), np.float32))
        bad = np.zeros((1, 3, 160, 160), np.float32)
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            small_model.forward(bad)

    def test_rep_fusion_preserves_output(self, image):
        m = build_model(ModelConfig(**SMALL, seed=2))
        before = m.forward(image)
        m.fuse()
        after = m.forward(image)
        for a, b in zip(before, after):
            np.testing.assert_allclose(a.raw, b.raw, atol=1e-4)


def decode_oracle(raw, stride, triple, thr, nc):
    out = []
    _, ch, gh, gw = raw.shape
    for a in range(3):
        for i in range(gh):
            for j in range(gw):
                t = [sigmoid_scalar(float(raw[0, a * (5 + nc) + f, i, j])) for f in range(5 + nc)]
                cx = (2 * t[0] - 0.5 + j) * stride
                cy = (2 * t[1] - 0.5 + i) * stride
                w = (2 * t[2]) ** 2 * triple[a].w
                h = (2 * t[3]) ** 2 * triple[a].h
                cls = max(range(nc), key=lambda c: t[5 + c])
                conf = t[4] * t[5 + cls]
                lim_x, lim_y = gw * stride, gh * stride
                box = (min(max(0, cx - w / 2), lim_x), min(max(0, cy - h / 2), lim_y),
                       min(max(0, cx + w / 2), lim_x), min(max(0, cy + h / 2), lim_y))
                if conf >= thr and box[2] > box[0] and box[3] > box[1]:
                    out.append((a, i, j, box, cls, conf))
    return out


class TestDecode:
    def test_zero_logits(self):
        # sigmoid(0) = 0.5: every box sits on its cell centre with exactly the anchor size
        raw = np.zeros((1, 27, 8, 8), np.float32)
        dets = decode_boxes([HeadOutput(32, (8, 8), raw)], URPC_ANCHORS, 0.0, image_size=(10_000, 10_000))
        assert len(dets) == 3 * 64
        assert all(d.confidence == 0.25 for d in dets)
        for n, d in enumerate(dets):
            a, cell = divmod(n, 64)
            i, j = divmod(cell, 8)
            anchor = URPC_ANCHORS.for_stride(32)[a]
            if (j + 0.5) * 32 < anchor.w / 2 or (i + 0.5) * 32 < anchor.h / 2:
                continue  # clipped at the left or top edge
            assert (d.bbox.x1 + d.bbox.x2) / 2 == (j + 0.5) * 32
            assert (d.bbox.y1 + d.bbox.y2) / 2 == (i + 0.5) * 32
            assert d.bbox.x2 - d.bbox.x1 == anchor.w and d.bbox.y2 - d.bbox.y1 == anchor.h

    def test_interior_cell_geometry(self):
        raw = np.zeros((1, 27, 20, 20), np.float32)
        dets = decode_boxes([HeadOutput(8, (20, 20), raw)], URPC_ANCHORS, 0.0)
        # cell (row 10, col 10), anchor 0: center (10.5 * 8, 10.5 * 8), size = anchor
        target = [d for d in dets if math.isclose(d.bbox.x1, 84 - 14) and math.isclose(d.bbox.y1, 84 - 12.5)]
        assert target
        b = target[0].bbox
        assert math.isclose(b.x2 - b.x1, 28) and math.isclose(b.y2 - b.y1, 25)

    def test_threshold_one_is_empty(self, rng):
        raw = rng.normal(0, 3, (1, 27, 5, 5)).astype(np.float32)
        assert decode_boxes([HeadOutput(8, (5, 5), raw)], URPC_ANCHORS, 1.0) == []

    def test_matches_scalar_oracle(self, rng):
        raw = rng.normal(0, 2, (1, 27, 6, 6)).astype(np.float32)
        dets = decode_boxes([HeadOutput(16, (6, 6), raw)], URPC_ANCHORS, 0.3)
        expected = decode_oracle(raw, 16, URPC_ANCHORS.for_stride(16), 0.3, 4)
        assert len(dets) == len(expected)
        for d, (_, _, _, box, cls, conf) in zip(dets, expected):
            assert d.class_id == cls
            assert abs(d.confidence - conf) <= 1e-6
            np.testing.assert_allclose(d.bbox, box, atol=1e-6 * 96)

    def test_anchor_stride_mismatch(self):
        with pytest.raises(ValueError):
            decode_boxes([HeadOutput(4, (2, 2), np.zeros((1, 27, 2, 2), np.float32))], URPC_ANCHORS, 0.5)

    def test_decoded_boxes_in_bounds(self, small_model, image):
        for d in decode_boxes(small_model.forward(image), URPC_ANCHORS, 0.0):
            assert 0 <= d.bbox.x1 < d.bbox.x2 <= 160 and 0 <= d.bbox.y1 < d.bbox.y2 <= 160
            assert 0 <= d.confidence <= 1


def det(x1, y1, x2, y2, conf, cls=0, img=0):
    return Detection(BBox(x1, y1, x2, y2), cls, conf, img)


class TestNms:
    def test_single(self):
        d = [det(0, 0, 1, 1, 0.5)]
        assert nms(d, 0.45) == d

    def test_identical_boxes(self):
        assert nms([det(0, 0, 10, 10, 0.8), det(0, 0, 10, 10, 0.9)], 0.45) == [det(0, 0, 10, 10, 0.9)]

    def test_iou_040_kept(self):
        a, b = det(0, 0, 10, 10, 0.9), det(0, 0, 10, 4, 0.8)
        assert math.isclose(iou_xyxy(a.bbox, b.bbox), 0.4)
        assert nms([a, b], 0.45) == [a, b]

    def test_classes_independent_and_ties(self):
        a, b = det(0, 0, 10, 10, 0.5, cls=0), det(0, 0, 10, 10, 0.5, cls=1)
        c = det(0, 0, 10, 10, 0.5, cls=0)
        assert nms([a, b, c], 0.45) == [a, b]

    def test_subset_and_no_overlap(self, rng):
        dets = []
        for _ in range(60):
            x, y = rng.uniform(0, 50, 2)
            w, h = rng.uniform(1, 20, 2)
            dets.append(det(x, y, x + w, y + h, float(rng.random()), int(rng.integers(3))))
        kept = nms(dets, 0.3)
        assert all(k in dets for k in kept)
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                if a.class_id == b.class_id:
                    assert iou_xyxy(a.bbox, b.bbox) <= 0.3


class TestWeights:
    def test_round_trip(self, tmp_path, image):
        m = build_model(ModelConfig(**SMALL, seed=9))
        save_weights(m, tmp_path / "w.bin")
        m2 = load_weights(tmp_path / "w.bin")
        assert m2.cfg == m.cfg
        for a, b in zip(m.forward(image), m2.forward(image)):
            np.testing.assert_array_equal(a.raw, b.raw)
        _, meta = load_archive(tmp_path / "w.bin")
        assert set(load_archive(tmp_path / "w.bin")[0]) == set(m.state())

    def test_tampered_shape(self, tmp_path):
        m = build_model(ModelConfig(**SMALL))
        tensors = dict(m.state())
        name = "head.gam0.mlp_w1"
        tensors[name] = np.zeros((3, 3), np.float32)
        save_archive(tmp_path / "w.bin", tensors, {"config": m.cfg.to_dict()})
        with pytest.raises(ArchiveError, match=name):
            load_weights(tmp_path / "w.bin")

    def test_unknown_tensor_warns(self, tmp_path, image):
        m = build_model(ModelConfig(**SMALL, seed=4))
        tensors = dict(m.state())
        tensors["future.extra"] = np.ones(2, np.float32)
        save_archive(tmp_path / "w.bin", tensors, {"config": m.cfg.to_dict()})
        with pytest.warns(UserWarning, match="future.extra"):
            m2 = load_weights(tmp_path / "w.bin")
        np.testing.assert_array_equal(m.forward(image)[2].raw, m2.forward(image)[2].raw)

    def test_missing_tensor(self, tmp_path):
        m = build_model(ModelConfig(**SMALL))
        tensors = dict(m.state())
        tensors.pop("predict.detect0.bias")
        save_archive(tmp_path / "w.bin", tensors, {"config": m.cfg.to_dict()})
        with pytest.raises(ArchiveError, match="missing"):
            load_weights(tmp_path / "w.bin")


def test_detect_pipeline(small_model, image):
    dets = detect(small_model, image)
    assert dets == detect(small_model, image)
    assert all(d.confidence >= 0.25 for d in dets)
    json.dumps([d.to_json() for d in dets])
