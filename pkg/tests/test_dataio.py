"""Persistence tests: splat PLY round trips, datasets, scripts, logs."""

from __future__ import annotations

import json
import os

import numpy as np
import pytest

from groupsplat.dataio import (
    classifier_sidecar_path,
    load_cameras,
    load_dataset,
    load_edit_script,
    load_image,
    load_mask,
    load_points,
    load_scene,
    save_dataset,
    save_image,
    save_mask,
    save_points,
    save_scene,
    write_training_log,
    _vertex_fields,
)
from groupsplat.gradcheck import random_scene
from groupsplat.synth import ring_cameras


def write_raw_ply(path, names, rows):
    """Handcraft a float32 binary PLY with the given property names."""
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(rows)}"]
    header += [f"property float {n}" for n in names]
    header += ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.asarray(rows, dtype="<f4").tobytes())


def splat_field_names(basis):
    return _vertex_fields(basis)


class TestScenePlyRoundTrip:
    def test_save_load_save_is_byte_identical(self, tmp_path):
        scene = random_scene(7, 3, seed=2, channels=5)
        p1, p2 = str(tmp_path / "a.ply"), str(tmp_path / "b.ply")
        save_scene(scene, p1)
        save_scene(load_scene(p1), p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()
        assert (open(classifier_sidecar_path(p1), "rb").read()
                == open(classifier_sidecar_path(p2), "rb").read())

    def test_loaded_arrays_match_float32_cast(self, tmp_path):
        scene = random_scene(5, 2, seed=3, channels=4)
        path = str(tmp_path / "scene.ply")
        save_scene(scene, path)
        loaded = load_scene(path)
        for name in ("positions", "log_scales", "rotations",
                     "opacity_logits", "sh", "identities"):
            np.testing.assert_array_equal(
                getattr(loaded, name),
                np.asarray(getattr(scene, name), dtype="<f4").astype(np.float64))
        # the classifier sidecar is JSON, hence exact float64
        np.testing.assert_array_equal(loaded.classifier.weights,
                                      scene.classifier.weights)
        np.testing.assert_array_equal(loaded.classifier.bias,
                                      scene.classifier.bias)
        assert loaded.sh_degree == scene.sh_degree

    def test_degree_three_record_is_78_floats(self, tmp_path):
        assert len(splat_field_names(16)) == 3 + 3 + 3 + 45 + 1 + 3 + 4 + 16 == 78
        scene = random_scene(1, 3, seed=0)
        path = str(tmp_path / "one.ply")
        save_scene(scene, path)
        raw = open(path, "rb").read()
        payload = raw.split(b"end_header\n", 1)[1]
        assert len(payload) == 78 * 4

    def test_sh_degree_inferred_from_rest_fields(self, tmp_path):
        for degree in (0, 1, 2, 3):
            scene = random_scene(3, degree, seed=degree)
            path = str(tmp_path / f"deg{degree}.ply")
            save_scene(scene, path)
            assert load_scene(path).sh_degree == degree

    def test_plain_point_ply_is_not_a_grouped_scene(self, tmp_path):
        path = str(tmp_path / "points.ply")
        save_points(path, np.zeros((4, 3)), np.full((4, 3), 0.5))
        with pytest.raises(ValueError, match="not a grouped scene"):
            load_scene(path)

    def test_missing_sidecar_rejected(self, tmp_path):
        scene = random_scene(2, 0, seed=1)
        path = str(tmp_path / "scene.ply")
        save_scene(scene, path)
        os.remove(classifier_sidecar_path(path))
        with pytest.raises(ValueError, match="missing classifier sidecar"):
            load_scene(path)

    def test_sidecar_channel_mismatch_rejected(self, tmp_path):
        scene = random_scene(2, 0, seed=1, channels=4)
        path = str(tmp_path / "scene.ply")
        save_scene(scene, path)
        sidecar = classifier_sidecar_path(path)
        blob = json.load(open(sidecar))
        blob["channels"] = 9
        json.dump(blob, open(sidecar, "w"))
        with pytest.raises(ValueError, match="channel count mismatch"):
            load_scene(path)

    def test_malformed_rest_count_rejected(self, tmp_path):
        names = (["x", "y", "z", "nx", "ny", "nz"]
                 + [f"f_dc_{i}" for i in range(3)]
                 + ["f_rest_0", "f_rest_1"]      # not divisible by 3
                 + ["opacity"] + [f"scale_{i}" for i in range(3)]
                 + [f"rot_{i}" for i in range(4)]
                 + [f"f_id_{i}" for i in range(16)])
        path = str(tmp_path / "bad.ply")
        write_raw_ply(path, names, np.zeros((2, len(names))))
        with pytest.raises(ValueError, match="malformed f_rest"):
            load_scene(path)

    def test_non_square_basis_rejected(self, tmp_path):
        names = (["x", "y", "z", "nx", "ny", "nz"]
                 + [f"f_dc_{i}" for i in range(3)]
                 + [f"f_rest_{i}" for i in range(6)]  # basis 3: no SH degree
                 + ["opacity"] + [f"scale_{i}" for i in range(3)]
                 + [f"rot_{i}" for i in range(4)]
                 + [f"f_id_{i}" for i in range(16)])
        path = str(tmp_path / "bad.ply")
        write_raw_ply(path, names, np.zeros((2, len(names))))
        with pytest.raises(ValueError, match="does not correspond"):
            load_scene(path)

    def test_not_a_ply_rejected(self, tmp_path):
        path = str(tmp_path / "nope.ply")
        open(path, "wb").write(b"hello\nworld\n")
        with pytest.raises(ValueError, match="not a PLY file"):
            load_scene(path)

    def test_truncated_payload_rejected(self, tmp_path):
        scene = random_scene(4, 0, seed=5)
        path = str(tmp_path / "trunc.ply")
        save_scene(scene, path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[: len(raw) - 40])
        with pytest.raises(ValueError, match="truncated"):
            load_scene(path)

    def test_ascii_ply_rejected(self, tmp_path):
        path = str(tmp_path / "ascii.ply")
        open(path, "wb").write(
            b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
        with pytest.raises(ValueError, match="little-endian"):
            load_scene(path)

    def test_non_vertex_element_rejected(self, tmp_path):
        path = str(tmp_path / "face.ply")
        open(path, "wb").write(
            b"ply\nformat binary_little_endian 1.0\nelement face 1\n"
            b"property float x\nend_header\n\x00\x00\x00\x00")
        with pytest.raises(ValueError, match="unsupported PLY element"):
            load_scene(path)


class TestPointsPly:
    def test_round_trip_with_byte_colors(self, tmp_path):
        rng = np.random.default_rng(4)
        points = rng.normal(size=(10, 3))
        colors = rng.uniform(0, 1, size=(10, 3))
        path = str(tmp_path / "pts.ply")
        save_points(path, points, colors)
        p, c = load_points(path)
        np.testing.assert_array_equal(p, points.astype("<f4").astype(np.float64))
        np.testing.assert_array_equal(
            c, np.clip(np.rint(colors * 255), 0, 255) / 255.0)

    def test_missing_colors_default_to_gray(self, tmp_path):
        path = str(tmp_path / "xyz.ply")
        write_raw_ply(path, ["x", "y", "z"], np.arange(9.0).reshape(3, 3))
        p, c = load_points(path)
        np.testing.assert_array_equal(p, np.arange(9.0).reshape(3, 3))
        np.testing.assert_array_equal(c, np.full((3, 3), 0.5))


class TestImagesAndMasks:
    def test_image_round_trip_is_exact_after_quantization(self, tmp_path):
        rng = np.random.default_rng(5)
        img = rng.uniform(0, 1, size=(9, 7, 3))
        path = str(tmp_path / "img.png")
        save_image(path, img)
        np.testing.assert_array_equal(load_image(path),
                                      np.rint(img * 255) / 255.0)

    def test_mask_round_trip_keeps_large_ids(self, tmp_path):
        mask = np.array([[0, 1], [40_000, 65_535]], dtype=np.int64)
        path = str(tmp_path / "mask.png")
        save_mask(path, mask)
        loaded = load_mask(path)
        assert loaded.dtype == np.uint16
        np.testing.assert_array_equal(loaded, mask)

    def test_mask_id_range_validated(self, tmp_path):
        path = str(tmp_path / "mask.png")
        with pytest.raises(ValueError, match="uint16"):
            save_mask(path, np.array([[-1]]))
        with pytest.raises(ValueError, match="uint16"):
            save_mask(path, np.array([[70_000]]))


class TestDataset:
    def make_dataset(self, tmp_path, with_masks=True, max_id=7):
        rng = np.random.default_rng(6)
        cameras = ring_cameras(3, 4.0, 1.5, 12, 10, 20.0)
        images = [rng.uniform(0, 1, size=(10, 12, 3)) for _ in cameras]
        masks = None
        if with_masks:
            masks = [rng.integers(0, 3, size=(10, 12)) for _ in cameras]
            masks[1][0, 0] = max_id
        points = rng.normal(size=(20, 3))
        save_dataset(str(tmp_path), cameras, images, masks=masks,
                     points=points, point_colors=np.full((20, 3), 0.3))
        return cameras, images, masks, points

    def test_round_trip_cameras_exact(self, tmp_path):
        cameras, images, masks, _ = self.make_dataset(tmp_path)
        meta, limg, lmask = load_dataset(str(tmp_path))
        assert len(meta.views) == 3
        for view, cam in zip(meta.views, cameras):
            got = view.camera
            assert (got.width, got.height) == (cam.width, cam.height)
            assert (got.fx, got.fy, got.cx, got.cy) == (cam.fx, cam.fy,
                                                        cam.cx, cam.cy)
            np.testing.assert_allclose(got.world_to_camera,
                                       cam.world_to_camera, atol=1e-7)
            assert (got.near, got.far) == (0.01, 1.0e6)
        for got, img in zip(limg, images):
            np.testing.assert_array_equal(got, np.rint(img * 255) / 255.0)
        for got, mask in zip(lmask, masks):
            np.testing.assert_array_equal(got, mask)

    def test_num_ids_is_global_max(self, tmp_path):
        self.make_dataset(tmp_path, max_id=7)
        meta, _, _ = load_dataset(str(tmp_path))
        assert meta.num_ids == 7

    def test_maskless_dataset(self, tmp_path):
        self.make_dataset(tmp_path, with_masks=False)
        meta, _, masks = load_dataset(str(tmp_path))
        assert meta.num_ids == 0
        assert all(m is None for m in masks)

    def test_with_masks_flag_skips_masks(self, tmp_path):
        self.make_dataset(tmp_path)
        meta, _, masks = load_dataset(str(tmp_path), with_masks=False)
        assert meta.num_ids == 0
        assert all(m is None for m in masks)

    def test_mask_size_mismatch_rejected(self, tmp_path):
        self.make_dataset(tmp_path)
        save_mask(str(tmp_path / "masks" / "000.png"), np.zeros((4, 4), int))
        with pytest.raises(ValueError, match="mask size mismatch"):
            load_dataset(str(tmp_path))

    def test_image_size_mismatch_rejected(self, tmp_path):
        self.make_dataset(tmp_path)
        save_image(str(tmp_path / "images" / "000.png"), np.zeros((4, 4, 3)))
        with pytest.raises(ValueError, match="image size mismatch"):
            load_dataset(str(tmp_path))

    def test_cameras_json_must_hold_a_list(self, tmp_path):
        path = tmp_path / "cameras.json"
        path.write_text('{"not": "a list"}')
        with pytest.raises(ValueError, match="list of views"):
            load_cameras(str(path))

    def test_points_round_trip_through_dataset(self, tmp_path):
        _, _, _, points = self.make_dataset(tmp_path)
        p, c = load_points(str(tmp_path / "points.ply"))
        np.testing.assert_array_equal(
            p, points.astype("<f4").astype(np.float64))


class TestEditScriptFile:
    def test_loads_operations_with_params(self, tmp_path):
        path = tmp_path / "edit.json"
        path.write_text(json.dumps({"operations": [
            {"op": "remove", "id": 2, "convex_hull": True},
            {"op": "swap", "id_a": 1, "id_b": 3},
            {"op": "recolor", "id": 1, "color": [0.9, 0.1, 0.1]},
        ]}))
        script = load_edit_script(str(path))
        kinds = [op.kind for op in script.operations]
        assert kinds == ["remove", "swap", "recolor"]
        assert script.operations[0].params == {"id": 2, "convex_hull": True}
        assert script.operations[2].params["color"] == [0.9, 0.1, 0.1]

    def test_requires_operations_list(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"steps": []}')
        with pytest.raises(ValueError, match="'operations' list"):
            load_edit_script(str(path))

    def test_each_operation_needs_a_kind(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"operations": [{"id": 1}]}')
        with pytest.raises(ValueError, match="'op' field"):
            load_edit_script(str(path))


class TestTrainingLog:
    def test_line_delimited_json(self, tmp_path):
        records = [{"iteration": 100, "l_rec": 0.5},
                   {"iteration": 200, "l_rec": 0.25}]
        path = str(tmp_path / "log.jsonl")
        write_training_log(path, records)
        lines = open(path).read().splitlines()
        assert [json.loads(line) for line in lines] == records
