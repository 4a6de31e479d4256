"""Unit tests for stream_tracker.synth."""

import numpy as np
import pytest
from pydantic import ValidationError

from stream_tracker.models import ConfigError, SceneConfig, build_config
from stream_tracker.synth import (
    CONFIG_FILE,
    FLOW_DIR,
    FRAMES_DIR,
    generate,
    generate_corpus,
    load_corpus,
    load_sequence,
    quantize,
    save_sequence,
    sequence_dirs,
    smooth_noise,
    to_frame,
)
from tests.fixtures.sample_data import sample_sequence, scene_config


class TestGenerate:
    def test_shapes_and_ranges(self, sequence):
        assert len(sequence) == 4
        assert sequence.size == (32, 32)
        for frame, flow, vis in zip(sequence.frames, sequence.gt_flow, sequence.gt_vis):
            assert frame.shape == (3, 32, 32)
            assert frame.dtype == np.float32
            assert frame.min() >= 0.0 and frame.max() <= 1.0
            assert flow.shape == (2, 32, 32)
            assert vis.shape == (32, 32)
            assert vis.dtype == bool

    def test_deterministic_in_seed(self):
        a, b = sample_sequence(seed=3), sample_sequence(seed=3)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa, fb)
        np.testing.assert_array_equal(a.gt_flow[-1], b.gt_flow[-1])

    def test_seeds_differ(self):
        a, b = sample_sequence(seed=1), sample_sequence(seed=2)
        assert not np.array_equal(a.frames[0], b.frames[0])

    def test_reference_frame_is_identity(self, sequence):
        np.testing.assert_array_equal(sequence.gt_flow[0], 0.0)
        assert sequence.gt_vis[0].all()

    def test_translation_flow_grows_linearly(self):
        record = sample_sequence(frames=4, rotation=False)
        np.testing.assert_allclose(record.gt_flow[2], 2 * record.gt_flow[1], atol=1e-4)
        np.testing.assert_allclose(record.gt_flow[3], 3 * record.gt_flow[1], atol=1e-4)

    def test_points_leaving_the_canvas_are_invisible(self):
        record = sample_sequence(frames=12, velocity_range=(2.0, 3.0), seed=5)
        ys, xs = np.mgrid[0:32, 0:32]
        for flow, vis in zip(record.gt_flow, record.gt_vis):
            px, py = xs + flow[0], ys + flow[1]
            outside = (px < 0) | (px > 31) | (py < 0) | (py > 31)
            assert not vis[outside].any()

    def test_static_background_keeps_zero_flow(self, sequence):
        moving = np.any(sequence.gt_flow[1] != 0, axis=0)
        for flow in sequence.gt_flow:
            np.testing.assert_array_equal(flow[:, ~moving], 0.0)

    def test_rotation_runs(self):
        record = sample_sequence(rotation=True, max_angular_velocity=0.2)
        assert np.all(np.isfinite(record.gt_flow[-1]))

    def test_oversized_objects(self):
        with pytest.raises(ConfigError):
            generate(scene_config(size_range=(8.0, 40.0)))

    def test_empty_range_rejected(self):
        with pytest.raises(ValidationError):
            SceneConfig(num_objects=(3, 1))
        with pytest.raises(ConfigError):
            build_config(SceneConfig, velocity_range=(2.0, 1.0))


class TestVelocityOverride:
    def test_single_axis_motion(self):
        record = sample_sequence(frames=5, num_objects=(1, 1), velocities=[(1.0, 0.0)], seed=2)
        for t, flow in enumerate(record.gt_flow):
            np.testing.assert_allclose(flow[1], 0.0, atol=1e-5)
            moving = np.abs(flow[0]) > 0.5
            np.testing.assert_allclose(flow[0][moving], float(t), atol=1e-5)
            np.testing.assert_allclose(flow[0][~moving], 0.0, atol=1e-5)
        assert (np.abs(record.gt_flow[4][0] - 4.0) < 1e-5).any()

    def test_override_changes_only_the_motion(self):
        drawn = sample_sequence(frames=3, num_objects=(2, 2), seed=4)
        fixed = sample_sequence(frames=3, num_objects=(2, 2), velocities=[(0.0, 0.0), (0.0, 0.0)], seed=4)
        np.testing.assert_array_equal(drawn.frames[0], fixed.frames[0])
        for frame in fixed.frames[1:]:
            np.testing.assert_array_equal(frame, fixed.frames[0])

    def test_too_few_velocities(self):
        with pytest.raises(ConfigError, match="velocities"):
            build_config(SceneConfig, num_objects=(1, 3), velocities=[(1.0, 0.0)])
        with pytest.raises(ValidationError):
            SceneConfig(num_objects=(2, 2), velocities=[(1.0, 0.0)])


class TestGroundTruthConsistency:
    @staticmethod
    def _integer_motion_record(seed: int):
        return sample_sequence(frames=5, num_objects=(2, 2), velocities=[(1.0, 0.0), (0.0, -2.0)], seed=seed)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_visible_pixels_keep_their_color(self, seed):
        record = self._integer_motion_record(seed)
        ys, xs = np.mgrid[0:32, 0:32]
        for t in range(1, len(record)):
            flow, vis = record.gt_flow[t], record.gt_vis[t]
            tx = np.rint(xs + flow[0]).astype(int)[vis]
            ty = np.rint(ys + flow[1]).astype(int)[vis]
            source = record.frames[0][:, ys[vis], xs[vis]]
            target = record.frames[t][:, ty, tx]
            np.testing.assert_allclose(target, source, atol=1.5 / 255)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_visible_pixels_land_on_distinct_targets(self, seed):
        record = self._integer_motion_record(seed)
        ys, xs = np.mgrid[0:32, 0:32]
        for flow, vis in zip(record.gt_flow, record.gt_vis):
            px, py = xs + flow[0], ys + flow[1]
            assert px[vis].min() >= 0 and px[vis].max() <= 31
            assert py[vis].min() >= 0 and py[vis].max() <= 31
            targets = np.rint(py[vis] * 32 + px[vis]).astype(int)
            assert len(np.unique(targets)) == targets.size


class TestImageHelpers:
    def test_smooth_noise_stays_in_unit_interval(self):
        noise = smooth_noise(np.random.default_rng(0), (3, 8, 8))
        assert noise.shape == (3, 8, 8)
        assert noise.min() >= 0.0 and noise.max() <= 1.0

    def test_quantize_layout(self):
        image = np.zeros((3, 2, 4))
        image[0] = 1.0
        image[2] = 2.0
        rgb = quantize(image)
        assert rgb.shape == (2, 4, 3)
        assert rgb.dtype == np.uint8
        assert tuple(rgb[0, 0]) == (255, 0, 255)

    def test_quantized_frames_survive_a_round_trip(self, sequence):
        frame = sequence.frames[1]
        np.testing.assert_array_equal(to_frame(quantize(frame)), frame)


class TestPersistence:
    def test_save_load_round_trip(self, sequence_dir):
        directory, record = sequence_dir
        assert (directory / CONFIG_FILE).exists()
        assert len(list((directory / FRAMES_DIR).glob("*.ppm"))) == 4
        loaded = load_sequence(directory)
        assert loaded.config == record.config
        for t in range(len(record)):
            np.testing.assert_array_equal(loaded.frames[t], record.frames[t])
            np.testing.assert_array_equal(loaded.gt_flow[t], record.gt_flow[t])
            np.testing.assert_array_equal(loaded.gt_vis[t], record.gt_vis[t])

    def test_velocity_override_survives_round_trip(self, tmp_path):
        record = sample_sequence(num_objects=(1, 1), velocities=[(1.0, 0.0)])
        loaded = load_sequence(save_sequence(record, tmp_path / "seq"))
        assert loaded.config.velocities == [(1.0, 0.0)]

    def test_missing_flow_file(self, sequence_dir):
        directory, _ = sequence_dir
        sorted((directory / FLOW_DIR).glob("*.flo"))[-1].unlink()
        with pytest.raises(ConfigError, match="counts differ"):
            load_sequence(directory)

    def test_sequence_dirs(self, tmp_path):
        save_sequence(sample_sequence(seed=1), tmp_path / "b")
        save_sequence(sample_sequence(seed=2), tmp_path / "a")
        (tmp_path / "notes").mkdir()
        assert [p.name for p in sequence_dirs(tmp_path)] == ["a", "b"]
        assert sequence_dirs(tmp_path / "a") == [tmp_path / "a"]
        assert sequence_dirs(tmp_path / "missing") == []
        assert len(load_corpus(tmp_path)) == 2


class TestCorpus:
    def test_consecutive_seeds(self, scene):
        records = generate_corpus(scene, 3, seed=10)
        assert [r.config.seed for r in records] == [10, 11, 12]
        np.testing.assert_array_equal(records[1].frames[0], generate(records[1].config).frames[0])

    def test_parallel_matches_serial(self, scene):
        serial = generate_corpus(scene, 3, seed=0, workers=1)
        parallel = generate_corpus(scene, 3, seed=0, workers=3)
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.gt_flow[-1], b.gt_flow[-1])
