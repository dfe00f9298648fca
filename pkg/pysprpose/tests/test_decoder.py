import numpy as np
import pytest

from pysprpose.decoder import (
    DecoderConfig, benchmark_decode, decode, decode_hierarchical, decode_vanilla, nms_peaks, synthetic_maps,
)
from pysprpose.encoder import HIERARCHICAL, VANILLA, ConfidenceMap, DisplacementMapStack, EncoderConfig, encode_scene
from pysprpose.errors import DataError, ModeMismatchError
from pysprpose.representation import Pose, Scene
from pysprpose.skeleton import ROOT, SkeletonSpec, preset
from pysprpose.synth import generate_scene, roundtrip_config


def _cmap(values):
    return ConfidenceMap(np.asarray(values, dtype=np.float64))


def _flat(k):
    return SkeletonSpec(name="flat", dim=2, joint_names=tuple("j{0}".format(i) for i in range(k)),
                        hierarchy_level=(2,) * k, parent=(ROOT,) * k)


def _match(decoded, persons):
    """Pair each ground-truth person with the decoded pose whose root is nearest."""
    out = []
    for pose in persons:
        centroid = pose.coords.mean(axis=0)
        best = min(decoded, key=lambda d: np.linalg.norm(d.pose.coords.mean(axis=0) - centroid))
        out.append((best, pose))
    return out


class TestNms:

    def test_single_peak(self):
        values = np.zeros((7, 7))
        values[3, 4] = 0.9
        peaks = nms_peaks(_cmap(values))
        assert [(p.row, p.col) for p in peaks] == [(3, 4)]
        assert peaks[0].score == 0.9

    def test_threshold_is_inclusive(self):
        values = np.zeros((5, 5))
        values[2, 2] = 0.3
        assert len(nms_peaks(_cmap(values), threshold=0.3)) == 1
        assert nms_peaks(_cmap(values), threshold=0.31) == []

    def test_plateau_keeps_first_cell_in_row_major_order(self):
        values = np.zeros((6, 6))
        values[2, 2] = values[2, 3] = values[3, 2] = 0.8
        peaks = nms_peaks(_cmap(values))
        assert [(p.row, p.col) for p in peaks] == [(2, 2)]

    def test_peaks_sorted_and_capped(self):
        values = np.zeros((10, 30))
        for i, col in enumerate((2, 8, 14, 20, 26)):
            values[5, col] = 0.4 + 0.1 * i
        peaks = nms_peaks(_cmap(values), max_peaks=3)
        assert [p.col for p in peaks] == [26, 20, 14]

    def test_window_suppresses_neighbors(self):
        values = np.zeros((5, 9))
        values[2, 3] = 0.9
        values[2, 5] = 0.8
        assert len(nms_peaks(_cmap(values), window=3)) == 2
        assert len(nms_peaks(_cmap(values), window=5)) == 1

    def test_even_window_rejected(self):
        with pytest.raises(ValueError):
            nms_peaks(_cmap(np.zeros((3, 3))), window=4)
        with pytest.raises(ValueError):
            DecoderConfig(window=2)

    def test_refinement_moves_toward_the_larger_neighbor(self):
        values = np.zeros((5, 5))
        values[2, 2] = 1.0
        values[2, 3] = 0.5
        values[1, 2] = 0.4
        peak = nms_peaks(_cmap(values), refine=True)[0]
        assert peak.x == 2.25
        assert peak.y == 1.75


class TestVanillaDecode:

    def test_recovers_two_persons(self, two_person_scene, toy6):
        cfg = EncoderConfig.for_image(64, 80)
        cmap, dstack, _ = encode_scene(two_person_scene, toy6, VANILLA, cfg)
        decoded = decode_vanilla(cmap, dstack, cfg, toy6)
        assert len(decoded) == 2
        for got, want in _match(decoded, two_person_scene.persons):
            np.testing.assert_allclose(got.pose.coords, want.coords, atol=1e-9)
            assert got.pose.visible.all()
            np.testing.assert_array_equal(got.per_joint_scores, np.ones(6))

    def test_score_is_the_peak_value(self, two_person_scene, toy6):
        cfg = EncoderConfig.for_image(64, 80)
        cmap, dstack, _ = encode_scene(two_person_scene, toy6, VANILLA, cfg)
        for d in decode(cmap, dstack, cfg, toy6):
            col, row = int(d.root[0]), int(d.root[1])
            assert d.score == cmap.values[row, col]

    def test_no_peaks_gives_no_persons(self, toy6):
        cfg = EncoderConfig.for_image(16, 16)
        cmap, dstack, _ = encode_scene(Scene(image_height=16, image_width=16), toy6, VANILLA, cfg)
        assert decode(cmap, dstack, cfg, toy6) == []

    def test_mode_mismatch(self, two_person_scene, toy6):
        cfg = EncoderConfig.for_image(64, 80)
        cmap, dstack, _ = encode_scene(two_person_scene, toy6, HIERARCHICAL, cfg)
        with pytest.raises(ModeMismatchError):
            decode_vanilla(cmap, dstack, cfg, toy6)

    def test_shape_mismatch(self, two_person_scene, toy6):
        cfg = EncoderConfig.for_image(64, 80)
        cmap, dstack, _ = encode_scene(two_person_scene, toy6, VANILLA, cfg)
        with pytest.raises(DataError):
            decode_vanilla(_cmap(np.zeros((10, 10))), dstack, cfg, toy6)

    def test_skeleton_mismatch(self, two_person_scene, toy6, mpii16):
        cfg = EncoderConfig.for_image(64, 80)
        cmap, dstack, _ = encode_scene(two_person_scene, toy6, VANILLA, cfg)
        with pytest.raises(DataError):
            decode_vanilla(cmap, dstack, cfg, mpii16)

    def test_undefined_channel_marks_joint_missing(self, toy6):
        cfg = EncoderConfig(map_height=9, map_width=9)
        values = np.zeros((9, 9))
        values[4, 4] = 1.0
        contributors = np.ones((9, 9, 6), dtype=np.int32)
        contributors[4, 4, 2] = 0
        dstack = DisplacementMapStack(values=np.zeros((9, 9, 12)), contributors=contributors, dim=2)
        decoded = decode_vanilla(_cmap(values), dstack, cfg, toy6)
        assert not decoded[0].pose.visible[2]
        assert decoded[0].per_joint_scores[2] == 0.0
        assert decoded[0].per_joint_scores[0] == 1.0


class TestHierarchicalDecode:

    def test_recovers_two_persons(self, two_person_scene, toy6):
        cfg = EncoderConfig.for_image(64, 80)
        cmap, dstack, _ = encode_scene(two_person_scene, toy6, HIERARCHICAL, cfg)
        decoded = decode_hierarchical(cmap, dstack, cfg, toy6)
        assert len(decoded) == 2
        for got, want in _match(decoded, two_person_scene.persons):
            np.testing.assert_allclose(got.pose.coords, want.coords, atol=1e-9)

    def test_missing_parent_hides_child(self, toy6):
        cfg = EncoderConfig(map_height=9, map_width=9)
        values = np.zeros((9, 9))
        values[4, 4] = 1.0
        contributors = np.ones((9, 9, 6), dtype=np.int32)
        contributors[:, :, toy6.index("l_shoulder")] = 0
        dstack = DisplacementMapStack(values=np.zeros((9, 9, 12)), contributors=contributors, dim=2,
                                      mode=HIERARCHICAL)
        pose = decode_hierarchical(_cmap(values), dstack, cfg, toy6)[0].pose
        assert not pose.visible[toy6.index("l_shoulder")]
        assert not pose.visible[toy6.index("l_elbow")]
        assert pose.visible[toy6.index("r_elbow")]

    def test_child_is_read_at_the_parent_cell(self, toy6):
        cfg = EncoderConfig(map_height=9, map_width=9)
        z = cfg.normalizer
        values = np.zeros((9, 9))
        values[4, 4] = 1.0
        disp = np.zeros((9, 9, 6, 2))
        neck, head = toy6.index("neck"), toy6.index("head_top")
        disp[4, 4, neck] = [0.0, -2.0 / z]
        disp[2, 4, head] = [1.0 / z, -1.0 / z]
        dstack = DisplacementMapStack.dense(disp.reshape(9, 9, 12), dim=2, mode=HIERARCHICAL)
        pose = decode_hierarchical(_cmap(values), dstack, cfg, toy6)[0].pose
        np.testing.assert_allclose(pose.coords[neck], [4.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(pose.coords[head], [5.0, 1.0], atol=1e-12)

    def test_dispatch_follows_stored_mode(self, two_person_scene, toy6):
        cfg = EncoderConfig.for_image(64, 80)
        cmap, dstack, _ = encode_scene(two_person_scene, toy6, HIERARCHICAL, cfg)
        a = decode(cmap, dstack, cfg, toy6)
        b = decode_hierarchical(cmap, dstack, cfg, toy6)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.pose.coords, y.pose.coords)


class TestSyntheticRoundTrip:

    @pytest.mark.parametrize("mode", [VANILLA, HIERARCHICAL])
    def test_scenes_recover_exactly(self, mode):
        spec = preset("toy6")
        synth = roundtrip_config(seed=7, image_size=160, max_persons=6, mode=mode)
        for index in range(5):
            scene, _ = generate_scene(synth, index)
            cfg = EncoderConfig.for_image(160, 160)
            cmap, dstack, _ = encode_scene(scene, spec, mode, cfg)
            decoded = decode(cmap, dstack, cfg, spec)
            assert len(decoded) == scene.num_persons
            for got, want in _match(decoded, scene.persons):
                assert np.abs(got.pose.coords - want.coords).max() <= 1e-6

    @pytest.mark.parametrize("mode", [VANILLA, HIERARCHICAL])
    def test_image_size_not_a_multiple_of_stride(self, toy6, toy_pose, mode):
        pose = toy_pose.translated([-3.0, -3.0])
        scene = Scene(image_height=30, image_width=30, persons=(pose,))
        cfg = EncoderConfig.for_image(30, 30, stride=4)
        assert (cfg.map_height, cfg.map_width) == (8, 8)
        cmap, dstack, _ = encode_scene(scene, toy6, mode, cfg)
        decoded = decode(cmap, dstack, cfg, toy6)
        assert len(decoded) == 1
        np.testing.assert_allclose(decoded[0].pose.coords, pose.coords, atol=1e-9)

    def test_three_dimensional_round_trip(self, panoptic):
        coords = np.column_stack([np.linspace(20, 40, 15), np.linspace(18, 44, 15), np.linspace(3000, 3300, 15)])
        scene = Scene(image_height=64, image_width=64, persons=(Pose.from_coords(coords),), dim=3)
        cfg = EncoderConfig.for_image(64, 64)
        for mode in (VANILLA, HIERARCHICAL):
            cmap, dstack, roots = encode_scene(scene, panoptic, mode, cfg)
            decoded = decode(cmap, dstack, cfg, panoptic)
            assert len(decoded) == 1
            np.testing.assert_allclose(decoded[0].pose.coords, coords, atol=1e-6)
            assert decoded[0].root[2] == pytest.approx(roots[0][2])


class TestBenchmark:

    def test_synthetic_maps_decode_every_person(self):
        cmap, dstack, cfg = synthetic_maps(64, 64, 8, 9)
        spec = _flat(8)
        assert len(decode(cmap, dstack, cfg, spec, DecoderConfig(max_peaks=100))) == 9

    def test_benchmark_report(self):
        result = benchmark_decode(32, 32, 4, 3, repetitions=5, seed=1)
        doc = result.to_dict()
        assert doc["reps"] == 5
        assert len(result.timings_ms) == 5
        assert doc["decoded_persons"] == 3
        assert doc["deterministic"] is True
        assert doc["min_ms"] <= doc["median_ms"]

    def test_benchmark_rejects_zero_repetitions(self):
        with pytest.raises(ValueError):
            benchmark_decode(16, 16, 2, 1, repetitions=0)


@pytest.mark.slow
def test_two_hundred_scene_round_trip():
    spec = preset("toy6")
    synth = roundtrip_config(seed=7, image_size=160, max_persons=10)
    for index in range(200):
        scene, _ = generate_scene(synth, index)
        cfg = EncoderConfig.for_image(160, 160)
        cmap, dstack, _ = encode_scene(scene, spec, VANILLA, cfg)
        decoded = decode(cmap, dstack, cfg, spec)
        assert len(decoded) == scene.num_persons
        for got, want in _match(decoded, scene.persons):
            assert np.abs(got.pose.coords - want.coords).max() <= 0.5
