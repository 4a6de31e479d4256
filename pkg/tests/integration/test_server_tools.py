"""Integration tests for MCP server tools."""

from unittest.mock import patch

import numpy as np
import pytest

from stream_tracker.formats import FormatError
from stream_tracker.server import evaluate_predictions, generate_sequences, render_flow, track_sequence_dir
from stream_tracker.trainer import Checkpoint, save_checkpoint
from tests.fixtures.sample_data import write_predictions

SMALL_SCENE = {"height": 32, "width": 32, "frames": 3, "num_objects": [1, 1], "size_range": [8, 12]}


@pytest.fixture
def checkpoint(tmp_path, tiny_tracker, train_config):
    return str(save_checkpoint(Checkpoint(params=tiny_tracker.state_dict(), config=train_config, step=0), tmp_path / "m.ckpt"))


class TestGenerateSequences:
    def test_writes_sequences(self, tmp_path):
        result = generate_sequences(str(tmp_path / "data"), num=2, scene=SMALL_SCENE, seed=3)
        assert [s["seed"] for s in result["sequences"]] == [3, 4]
        assert result["sequences"][0]["path"].endswith("seq_00000")

    def test_invalid_scene_raises(self, tmp_path):
        with pytest.raises(ValueError, match="Invalid scene"):
            generate_sequences(str(tmp_path), scene={"height": 1})

    def test_oversized_objects_become_value_error(self, tmp_path):
        with pytest.raises(ValueError, match="exceeds canvas"):
            generate_sequences(str(tmp_path), num=1, scene={"height": 16, "width": 16})

    def test_zero_sequences(self, tmp_path):
        with pytest.raises(ValueError, match="num"):
            generate_sequences(str(tmp_path), num=0, scene=SMALL_SCENE)


class TestTrackSequenceDir:
    def test_tracks_every_frame(self, tmp_path, sequence_dir, checkpoint):
        directory, record = sequence_dir
        result = track_sequence_dir(checkpoint, str(directory), str(tmp_path / "pred"), iters=1)
        assert result["frames"] == len(record)
        assert result["flow_files"][-1].endswith("00003.flo")

    def test_iters_must_be_positive(self, tmp_path, checkpoint):
        with pytest.raises(ValueError, match="iters"):
            track_sequence_dir(checkpoint, str(tmp_path), str(tmp_path / "pred"), iters=0)

    def test_corrupt_checkpoint(self, tmp_path, sequence_dir):
        directory, _ = sequence_dir
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        with pytest.raises(ValueError, match="checkpoint magic"):
            track_sequence_dir(str(bad), str(directory), str(tmp_path / "pred"))

    def test_backend_error_becomes_value_error(self, tmp_path, checkpoint):
        with patch("stream_tracker.server.do_track_directory", side_effect=FormatError("truncated flo data", 12)):
            with pytest.raises(ValueError, match="offset 12"):
                track_sequence_dir(checkpoint, str(tmp_path), str(tmp_path / "pred"))


class TestEvaluatePredictions:
    def test_perfect_predictions(self, tmp_path, sequence_dir):
        directory, record = sequence_dir
        pred = write_predictions(tmp_path / "pred", record.gt_flow, [v.astype(float) for v in record.gt_vis])
        result = evaluate_predictions(str(pred), str(directory))
        assert result["aggregate"]["epe_all"] == 0.0
        assert result["aggregate"]["oa"] == 1.0
        assert result["tap"] is None

    def test_with_queries(self, tmp_path, sequence_dir):
        directory, record = sequence_dir
        pred = write_predictions(tmp_path / "pred", record.gt_flow, [v.astype(float) for v in record.gt_vis])
        result = evaluate_predictions(str(pred), str(directory), queries=[[2, 3], [10.5, 20]])
        assert result["tap"]["oa"] == 1.0
        assert set(result["tap"]["jaccard_by_threshold"]) == {"1", "2", "4", "8", "16"}

    @pytest.mark.parametrize("queries", [[], [[1.0]], [[1.0, 2.0, 3.0]]])
    def test_malformed_queries(self, tmp_path, queries):
        with pytest.raises(ValueError, match="queries"):
            evaluate_predictions(str(tmp_path), str(tmp_path), queries=queries)

    def test_missing_ground_truth(self, tmp_path):
        with pytest.raises(ValueError, match="no sequences"):
            evaluate_predictions(str(tmp_path / "pred"), str(tmp_path))


class TestRenderFlow:
    def test_renders_with_overlay(self, tmp_path):
        flows = [np.zeros((2, 8, 8), dtype=np.float32), np.ones((2, 8, 8), dtype=np.float32)]
        pred = write_predictions(tmp_path / "pred", flows, [np.ones((8, 8)), np.zeros((8, 8))])
        result = render_flow(str(pred), str(tmp_path / "img"))
        assert len(result["images"]) == 2
        assert result["images"][0].endswith("00000.ppm")

    def test_max_flow_must_be_positive(self, tmp_path):
        with pytest.raises(ValueError, match="max_flow"):
            render_flow(str(tmp_path), str(tmp_path / "img"), max_flow=0.0)

    def test_empty_prediction_dir(self, tmp_path):
        assert render_flow(str(tmp_path), str(tmp_path / "img"), overlay=False) == {"images": []}
