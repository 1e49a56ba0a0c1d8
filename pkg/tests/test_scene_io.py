import json

import numpy as np
import pytest

from splatfield.errors import EmptySceneError, ParseError, ValidationError
from splatfield.scene_io import (
    FeatureMap,
    FeatureStore,
    PromptBank,
    SceneBundle,
    load_cameras,
    load_feature_map,
    load_feature_store,
    load_label_pgm,
    load_mask_pgm,
    load_ply,
    load_prompt_bank,
    save_cameras,
    save_feature_map,
    save_feature_store,
    save_label_pgm,
    save_mask_pgm,
    save_ply,
    save_prompt_bank,
)
from splatfield.splat_core import Camera
from splatfield.synthetic import orbit_cameras

from conftest import random_raw_ply_bytes


def write_ply(tmp_path, n=1, seed=0, **kw):
    p = tmp_path / "scene.ply"
    p.write_bytes(random_raw_ply_bytes(n, seed, **kw))
    return p


class TestPlyLoad:
    def test_sigmoid_opacity(self, tmp_path):
        data = random_raw_ply_bytes(1, 0)
        # overwrite the opacity column with raw 0 -> sigmoid(0) = 0.5
        p = tmp_path / "one.ply"
        header_end = data.index(b"end_header\n") + len(b"end_header\n")
        mat = np.frombuffer(data[header_end:], dtype="<f4").reshape(1, -1).copy()
        mat[0, -8] = 0.0   # opacity
        mat[0, -7:-4] = 0.0  # scales
        p.write_bytes(data[:header_end] + mat.tobytes())
        cloud = load_ply(p)
        assert cloud.opacities[0] == pytest.approx(0.5)
        np.testing.assert_allclose(cloud.scales[0], 1.0)

    def test_roundtrip_bitexact(self, tmp_path):
        p = write_ply(tmp_path, n=100, seed=42)
        original = p.read_bytes()
        cloud = load_ply(p)
        out = tmp_path / "back.ply"
        save_ply(cloud, out)
        assert out.read_bytes() == original

    def test_roundtrip_with_extra_properties(self, tmp_path):
        p = write_ply(tmp_path, n=10, seed=1, extra=("nx", "ny", "nz"))
        original = p.read_bytes()
        out = tmp_path / "back.ply"
        save_ply(load_ply(p), out)
        assert out.read_bytes() == original

    def test_sh_degree_inference(self, tmp_path):
        for rest, deg in [(0, 0), (9, 1), (24, 2), (45, 3)]:
            p = write_ply(tmp_path, n=4, seed=rest, sh_rest=rest)
            assert load_ply(p).sh_degree == deg

    def test_missing_property(self, tmp_path):
        data = random_raw_ply_bytes(2, 0).replace(b"property float opacity\n", b"")
        p = tmp_path / "bad.ply"
        p.write_bytes(data)
        with pytest.raises(ParseError, match="opacity"):
            load_ply(p)

    def test_truncated_payload(self, tmp_path):
        data = random_raw_ply_bytes(10, 0)
        p = tmp_path / "trunc.ply"
        p.write_bytes(data[:-17])
        with pytest.raises(ParseError, match="truncated"):
            load_ply(p)

    def test_malformed_header(self, tmp_path):
        p = tmp_path / "junk.ply"
        p.write_bytes(b"ply\nformat ascii 1.0\nend_header\n")
        with pytest.raises(ParseError):
            load_ply(p)

    def test_zero_gaussians(self, tmp_path):
        p = write_ply(tmp_path, n=0)
        with pytest.raises(EmptySceneError):
            load_ply(p)

    def test_nonfinite_rejected(self, tmp_path):
        data = random_raw_ply_bytes(3, 0)
        header_end = data.index(b"end_header\n") + len(b"end_header\n")
        mat = np.frombuffer(data[header_end:], dtype="<f4").reshape(3, -1).copy()
        mat[1, 0] = np.nan
        p = tmp_path / "nan.ply"
        p.write_bytes(data[:header_end] + mat.tobytes())
        with pytest.raises(ParseError, match="non-finite"):
            load_ply(p)

    def test_order_preserved(self, tmp_path):
        p = write_ply(tmp_path, n=20, seed=9)
        cloud = load_ply(p)
        raw = np.frombuffer(
            p.read_bytes()[p.read_bytes().index(b"end_header\n") + 11:], dtype="<f4"
        ).reshape(20, -1)
        np.testing.assert_array_equal(cloud.positions[:, 0], raw[:, 0].astype(np.float64))

    def test_save_programmatic_cloud(self, tmp_path):
        from splatfield.synthetic import random_cloud

        cloud = random_cloud(16, seed=5)
        p = tmp_path / "prog.ply"
        save_ply(cloud, p)
        back = load_ply(p)
        np.testing.assert_allclose(back.positions, cloud.positions, atol=1e-6)
        np.testing.assert_allclose(back.opacities, cloud.opacities, atol=1e-6)
        np.testing.assert_allclose(back.scales, cloud.scales, rtol=1e-5)

    def test_save_empty_cloud_rejected(self):
        from splatfield.splat_core import GaussianCloud

        empty = GaussianCloud(
            positions=np.zeros((0, 3)), rotations=np.zeros((0, 4)),
            scales=np.zeros((0, 3)), opacities=np.zeros(0), sh_coeffs=np.zeros((0, 1, 3)),
        )
        with pytest.raises(EmptySceneError):
            save_ply(empty, "/tmp/never.ply")


class TestFeatureMap:
    def test_zero_tensor(self, tmp_path):
        p = tmp_path / "z.ftn1"
        save_feature_map(FeatureMap(np.zeros((2, 2, 3), np.float32)), p)
        fm = load_feature_map(p)
        assert fm.values.shape == (2, 2, 3)
        assert not fm.values.any()

    def test_nan_names_index(self, tmp_path):
        vals = np.zeros((2, 2, 3), np.float32)
        vals[1, 0, 2] = np.nan
        p = tmp_path / "nan.ftn1"
        save_feature_map(FeatureMap(vals), p)
        with pytest.raises(ParseError, match=r"\(1, 0, 2\)"):
            load_feature_map(p)

    def test_large_roundtrip_byte_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        vals = rng.standard_normal((480, 640, 512), dtype=np.float32)
        p = tmp_path / "big.ftn1"
        save_feature_map(FeatureMap(vals), p)
        first = p.read_bytes()
        p2 = tmp_path / "big2.ftn1"
        save_feature_map(load_feature_map(p), p2)
        assert p2.read_bytes() == first

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ftn1"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ParseError, match="magic"):
            load_feature_map(p)

    def test_wrong_rank(self, tmp_path):
        from splatfield.scene_io import save_tensor

        p = tmp_path / "r2.ftn1"
        save_tensor(np.zeros((4, 4), np.float32), p)
        with pytest.raises(ParseError, match="3 dims"):
            load_feature_map(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.ftn1"
        save_feature_map(FeatureMap(np.ones((4, 4, 2), np.float32)), p)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(ParseError, match="truncated"):
            load_feature_map(p)

    def test_npy_accepted(self, tmp_path):
        p = tmp_path / "alt.npy"
        vals = np.random.default_rng(1).random((3, 5, 2)).astype(np.float32)
        np.save(p, vals)
        fm = load_feature_map(p)
        np.testing.assert_array_equal(fm.values, vals)


class TestCameras:
    def test_identity_pose_principal_ray(self, tmp_path):
        p = tmp_path / "cams.json"
        p.write_text(json.dumps([{
            "view": 0, "width": 100, "height": 100,
            "fx": 100.0, "fy": 100.0, "cx": 50.0, "cy": 50.0,
            "R": [1, 0, 0, 0, 1, 0, 0, 0, 1], "t": [0, 0, 0],
        }]))
        cam = load_cameras(p)[0]
        # a world point straight down +z projects to the principal point
        z = np.array([0.0, 0.0, 4.0])
        p_cam = cam.R @ z + cam.t
        assert p_cam[2] > 0
        u = cam.fx * p_cam[0] / p_cam[2] + cam.cx
        v = cam.fy * p_cam[1] / p_cam[2] + cam.cy
        assert (u, v) == (50.0, 50.0)

    def test_duplicate_view(self, tmp_path):
        rec = {"view": 3, "width": 10, "height": 10, "fx": 5.0, "fy": 5.0,
               "cx": 5.0, "cy": 5.0, "R": [1, 0, 0, 0, 1, 0, 0, 0, 1], "t": [0, 0, 0]}
        p = tmp_path / "dup.json"
        p.write_text(json.dumps([rec, dict(rec)]))
        with pytest.raises(ParseError, match="duplicate view index 3"):
            load_cameras(p)

    def test_reflection_rejected(self, tmp_path):
        p = tmp_path / "refl.json"
        p.write_text(json.dumps([{
            "view": 0, "width": 10, "height": 10, "fx": 5.0, "fy": 5.0,
            "cx": 5.0, "cy": 5.0,
            "R": [1, 0, 0, 0, 1, 0, 0, 0, -1], "t": [0, 0, 0],
        }]))
        with pytest.raises(ValidationError, match="determinant"):
            load_cameras(p)

    def test_missing_field(self, tmp_path):
        p = tmp_path / "mf.json"
        p.write_text(json.dumps([{"view": 0, "width": 10, "height": 10}]))
        with pytest.raises(ParseError, match="fx"):
            load_cameras(p)

    def test_sorted_by_view_and_roundtrip(self, tmp_path):
        cams = orbit_cameras(4, 32, 32)
        p = tmp_path / "ring.json"
        save_cameras(list(reversed(cams)), p)
        loaded = load_cameras(p)
        assert [c.view for c in loaded] == [0, 1, 2, 3]
        for a, b in zip(cams, loaded):
            np.testing.assert_allclose(a.R, b.R)
            np.testing.assert_allclose(a.t, b.t)

    def test_bundle_requires_contiguous_views(self):
        from splatfield.synthetic import random_cloud

        cams = orbit_cameras(2, 16, 16)
        gap = Camera(view=5, width=16, height=16, fx=8, fy=8, cx=8, cy=8,
                     R=np.eye(3), t=np.zeros(3))
        with pytest.raises(ValidationError, match="contiguous"):
            SceneBundle(cloud=random_cloud(4), cameras=[cams[0], gap])


class TestFeatureStore:
    def test_tiny_roundtrip(self, tmp_path):
        store = FeatureStore(np.array([[1, 2, 3, 4]], np.float32), np.array([False]))
        p = tmp_path / "s.fst"
        save_feature_store(store, p)
        back = load_feature_store(p)
        np.testing.assert_array_equal(back.features, store.features)
        assert not back.pruned.any()

    def test_pruned_row_zeroed(self, tmp_path):
        store = FeatureStore(np.ones((2, 3), np.float32), np.array([True, False]))
        assert not store.features[0].any()
        p = tmp_path / "p.fst"
        save_feature_store(store, p)
        back = load_feature_store(p)
        assert not back.features[0].any()
        assert back.pruned.tolist() == [True, False]

    def test_random_roundtrip_bitexact(self, tmp_path):
        rng = np.random.default_rng(12)
        store = FeatureStore(
            rng.standard_normal((1000, 64), dtype=np.float32), rng.random(1000) < 0.1
        )
        p = tmp_path / "r.fst"
        save_feature_store(store, p)
        back = load_feature_store(p)
        assert back.features.tobytes() == store.features.tobytes()
        np.testing.assert_array_equal(back.pruned, store.pruned)

    def test_expected_count_mismatch(self, tmp_path):
        p = tmp_path / "c.fst"
        save_feature_store(FeatureStore(np.ones((4, 2), np.float32), np.zeros(4, bool)), p)
        with pytest.raises(ValidationError, match="expected 9"):
            load_feature_store(p, expected_count=9)


class TestPromptBank:
    def test_roundtrip_and_lookup(self, tmp_path):
        bank = PromptBank(names=["cup", "table"], embeddings=np.eye(2, 4))
        p = tmp_path / "bank.json"
        save_prompt_bank(bank, p)
        back = load_prompt_bank(p)
        assert back.names == ["cup", "table"]
        np.testing.assert_array_equal(back.get("table"), bank.embeddings[1])
        with pytest.raises(ValidationError, match="unknown prompt"):
            back.get("chair")

    def test_duplicate_names(self):
        with pytest.raises(ValidationError, match="duplicate"):
            PromptBank(names=["a", "a"], embeddings=np.eye(2))

    def test_zero_embedding(self):
        with pytest.raises(ValidationError, match="all-zero"):
            PromptBank(names=["a"], embeddings=np.zeros((1, 3)))

    def test_dim_mismatch(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"dim": 3, "prompts": [{"name": "a", "embedding": [1, 2]}]}))
        with pytest.raises(ParseError, match="dimension"):
            load_prompt_bank(p)


class TestMaskImages:
    def test_mask_roundtrip(self, tmp_path):
        mask = np.random.default_rng(0).random((8, 6)) > 0.5
        p = tmp_path / "m.pgm"
        save_mask_pgm(mask, p)
        np.testing.assert_array_equal(load_mask_pgm(p), mask)

    def test_label_roundtrip(self, tmp_path):
        labels = np.random.default_rng(1).integers(-1, 300, size=(5, 7))
        p = tmp_path / "l.pgm"
        save_label_pgm(labels, p)
        np.testing.assert_array_equal(load_label_pgm(p), labels)
