"""Containers, probability-map codec, and scene loading."""

from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halo.core_data import (
    BinaryMask,
    CameraModel,
    CodecError,
    ImageMetadata,
    ImageRecord,
    ProbMap,
    Rect,
    SceneFormatError,
    SceneManifest,
    binarize,
    decode_probmap,
    encode_probmap,
    load_scene,
    read_binary_mask,
    read_probmap,
    save_scene,
    write_binary_mask,
    write_probmap,
)


class TestRect:
    def test_half_open_dims(self):
        r = Rect(2, 3, 10, 8)
        assert r.width == 8 and r.height == 5

    def test_contains_rect(self):
        r = Rect(0, 0, 4, 4)
        assert r.contains(Rect(0, 0, 4, 4))
        assert r.contains(Rect(1, 1, 3, 3))
        assert not r.contains(Rect(1, 1, 5, 3))

    def test_clipped(self):
        r = Rect(-5, -2, 100, 50).clipped(10, 20)
        assert (r.x0, r.y0, r.x1, r.y1) == (0, 0, 10, 20)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            Rect(5, 0, 5, 10)
        with pytest.raises(ValueError):
            Rect(0, 9, 10, 3)


class TestCameraModel:
    def test_from_arrays_shapes(self):
        K = np.eye(3)
        pose = np.hstack([np.eye(3), np.zeros((3, 1))])
        cam = CameraModel.from_arrays(K, pose)
        assert cam.k.shape == (3, 3)
        assert np.allclose(cam.rotation, np.eye(3))
        assert np.allclose(cam.center, 0.0)

    def test_bad_shapes_rejected(self):
        with pytest.raises(ValueError):
            CameraModel.from_arrays(np.eye(2), np.zeros((3, 4)))
        with pytest.raises(ValueError):
            CameraModel.from_arrays(np.eye(3), np.zeros((4, 4)))

    def test_nonfinite_rejected(self):
        pose = np.hstack([np.eye(3), np.zeros((3, 1))])
        K = np.eye(3)
        K[0, 0] = np.nan
        with pytest.raises(ValueError):
            CameraModel.from_arrays(K, pose)


class TestProbMap:
    def test_accepts_unit_range(self):
        pm = ProbMap(np.array([[0.0, 0.5], [1.0, 0.25]], dtype=np.float32))
        assert pm.values.dtype == np.float32

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ProbMap(np.array([[1.5]], dtype=np.float32))
        with pytest.raises(ValueError):
            ProbMap(np.array([[-0.1]], dtype=np.float32))

    def test_rejects_non_2d(self):
        with pytest.raises(ValueError):
            ProbMap(np.zeros((2, 2, 3), dtype=np.float32))


class TestBinarize:
    def test_threshold_inclusive(self):
        pm = ProbMap(np.array([[0.2, 0.19], [0.9, 0.0]], dtype=np.float32))
        bits = binarize(pm, 0.2).bits
        assert bits.tolist() == [[True, False], [True, False]]

    def test_threshold_bounds(self):
        pm = ProbMap(np.zeros((2, 2), dtype=np.float32))
        for bad in (0.0, 1.0, -0.5, 1.5):
            with pytest.raises(ValueError):
                binarize(pm, bad)

    @given(
        st.integers(min_value=1, max_value=6),
        st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=30, deadline=None)
    def test_monotone_in_threshold(self, size, seed):
        vals = np.random.default_rng(seed).random((size, size)).astype(np.float32)
        pm = ProbMap(vals)
        lo = binarize(pm, 0.3).bits
        hi = binarize(pm, 0.7).bits
        assert not np.any(hi & ~lo)  # raising the threshold never adds pixels


class TestProbMapCodec:
    def test_quantized_values_round_trip_exactly(self):
        vals = (np.arange(256, dtype=np.float32) / 255.0).reshape(16, 16)
        out = decode_probmap(encode_probmap(ProbMap(vals))).values
        assert np.array_equal(out, vals)

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_error_bound(self, seed):
        vals = np.random.default_rng(seed).random((9, 7)).astype(np.float32)
        out = decode_probmap(encode_probmap(ProbMap(vals))).values
        assert np.max(np.abs(out - vals)) <= 1.0 / 510.0 + 1e-9

    def test_encoding_deterministic(self):
        vals = np.random.default_rng(3).random((12, 5)).astype(np.float32)
        assert encode_probmap(ProbMap(vals)) == encode_probmap(ProbMap(vals))

    def test_decode_rejects_junk(self):
        with pytest.raises(CodecError):
            decode_probmap(b"not a png at all")

    def test_decode_rejects_rgb_png(self):
        from io import BytesIO

        from PIL import Image

        buf = BytesIO()
        Image.new("RGB", (4, 4)).save(buf, format="PNG")
        with pytest.raises(CodecError):
            decode_probmap(buf.getvalue())

    def test_file_round_trip(self, tmp_path):
        vals = np.random.default_rng(1).random((6, 8)).astype(np.float32)
        path = tmp_path / "m.png"
        write_probmap(ProbMap(vals), path)
        out = read_probmap(path).values
        assert np.max(np.abs(out - vals)) <= 1.0 / 510.0 + 1e-9

    def test_binary_mask_round_trip(self, tmp_path):
        bits = np.random.default_rng(2).random((5, 9)) > 0.5
        path = tmp_path / "b.png"
        write_binary_mask(BinaryMask(bits, threshold=0.5), path)
        assert np.array_equal(read_binary_mask(path).bits, bits)


def _write_scene(tmp_path, lines):
    (tmp_path / "images").mkdir(parents=True, exist_ok=True)
    (tmp_path / "manifest.jsonl").write_text("\n".join(lines) + "\n")


def _record_line(image_id, width=4, height=3, caption="a view"):
    return json.dumps(
        {
            "id": image_id,
            "width": width,
            "height": height,
            "metadata": {"filename": image_id, "caption": caption, "wiki_categories": []},
        }
    )


def _touch_image(tmp_path, image_id, width=4, height=3):
    from PIL import Image

    Image.new("RGB", (width, height)).save(tmp_path / "images" / image_id)


class TestLoadScene:
    def test_round_trip(self, small_scene):
        root, spec, manifest = small_scene
        again = load_scene(root)
        assert again.landmark_name == manifest.landmark_name
        assert again.building_kind == manifest.building_kind
        assert [r.id for r in again.images] == [r.id for r in manifest.images]
        cam0 = again.images[0].camera
        assert np.allclose(cam0.k, manifest.images[0].camera.k)
        assert np.allclose(cam0.pose, manifest.images[0].camera.pose)

    def test_duplicate_ids_dropped_with_warning(self, tmp_path, caplog):
        _write_scene(
            tmp_path,
            [
                json.dumps({"scene": {"landmark_name": "X", "building_kind": "other"}}),
                _record_line("a.png"),
                _record_line("a.png"),
            ],
        )
        _touch_image(tmp_path, "a.png")
        with caplog.at_level("WARNING"):
            manifest = load_scene(tmp_path)
        assert len(manifest.images) == 1
        assert manifest.dedup_dropped == 1
        assert any("duplicate" in r.message for r in caplog.records)

    def test_bad_json_reports_line_number(self, tmp_path):
        _write_scene(tmp_path, [_record_line("a.png"), "{broken"])
        _touch_image(tmp_path, "a.png")
        with pytest.raises(SceneFormatError, match="line 2"):
            load_scene(tmp_path)

    def test_missing_image_file_named(self, tmp_path):
        _write_scene(tmp_path, [_record_line("ghost.png")])
        with pytest.raises(SceneFormatError, match="ghost.png"):
            load_scene(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(SceneFormatError, match="manifest"):
            load_scene(tmp_path)

    def test_missing_required_field_reports_line(self, tmp_path):
        _write_scene(tmp_path, [json.dumps({"id": "a.png", "width": 4})])
        with pytest.raises(SceneFormatError, match="line 1"):
            load_scene(tmp_path)


def _dummy_record():
    return ImageRecord(
        id="a.png", width=4, height=3, pixel_ref="a.png", metadata=ImageMetadata()
    )


class TestSceneManifest:
    def test_facade_prompt_known_kinds(self):
        for kind in ("cathedral", "mosque", "synagogue", "Cathedral"):
            m = SceneManifest(
                landmark_name="X", building_kind=kind, images=[_dummy_record()]
            )
            assert m.facade_prompt() == kind.lower()

    def test_facade_prompt_other_kind_passthrough(self):
        m = SceneManifest(
            landmark_name="X", building_kind="castle", images=[_dummy_record()]
        )
        assert m.facade_prompt() == "castle"

    def test_record_lookup(self, small_scene):
        _, _, manifest = small_scene
        rec = manifest.record(manifest.images[0].id)
        assert rec is manifest.images[0]
        with pytest.raises(KeyError):
            manifest.record("nope.png")

    def test_save_scene_round_trip_metadata(self, tmp_path):
        from PIL import Image

        (tmp_path / "images").mkdir()
        Image.new("RGB", (4, 3)).save(tmp_path / "images" / "a.png")
        rec = ImageRecord(
            id="a.png",
            width=4,
            height=3,
            pixel_ref=str(tmp_path / "images" / "a.png"),
            metadata=ImageMetadata(
                filename="a.png", caption="The west portal", wiki_categories=("B",)
            ),
        )
        save_scene(
            SceneManifest(landmark_name="B", building_kind="mosque", images=[rec]),
            tmp_path,
        )
        again = load_scene(tmp_path)
        assert again.building_kind == "mosque"
        assert again.images[0].metadata.caption == "The west portal"
        assert again.images[0].metadata.wiki_categories == ("B",)
