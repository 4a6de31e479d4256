"""Unit tests for stream_tracker.encoder."""

import numpy as np
import pytest

from stream_tracker.encoder import (
    ContextEncoder,
    FeatureEncoder,
    encode_context,
    encode_frame,
    min_frame_size,
    pad_to_multiple,
    prepare_frame,
)
from stream_tracker.tensor import DomainError, ShapeError, Tensor
from tests.fixtures.sample_data import random_frame


class TestPrepareFrame:
    def test_pads_bottom_right_by_reflection(self):
        frame = random_frame(10, 13)
        padded = pad_to_multiple(frame)
        assert padded.shape == (3, 12, 16)
        np.testing.assert_array_equal(padded[:, :10, :13], frame)
        np.testing.assert_array_equal(padded[:, 10, :13], frame[:, 8])

    def test_multiple_is_untouched(self):
        frame = random_frame(8, 12)
        assert pad_to_multiple(frame) is frame

    def test_returns_tensor_in_dtype(self):
        t = prepare_frame(random_frame(9, 9), dtype=np.float64)
        assert isinstance(t, Tensor)
        assert t.shape == (3, 12, 12)
        assert t.dtype == np.float64

    def test_wrong_channel_count(self):
        with pytest.raises(ShapeError):
            prepare_frame(np.zeros((1, 8, 8)))

    def test_too_small(self):
        with pytest.raises(ShapeError):
            prepare_frame(np.zeros((3, 3, 8)))

    def test_values_outside_unit_interval(self):
        frame = random_frame(8, 8)
        frame[0, 0, 0] = 1.5
        with pytest.raises(DomainError):
            prepare_frame(frame)


class TestMinFrameSize:
    @pytest.mark.parametrize("levels, expected", [(1, 4), (2, 5), (3, 13), (4, 29)])
    def test_values(self, levels, expected):
        assert min_frame_size(levels) == expected

    def test_smallest_frame_fills_the_pyramid(self, tiny_tracker):
        side = min_frame_size(tiny_tracker.config.corr_levels)
        outputs = tiny_tracker.track_sequence([random_frame(side, side, seed=i) for i in range(2)])
        assert outputs[-1].flow_array().shape == (2, side, side)

    def test_one_pixel_less_does_not(self, tiny_tracker):
        side = min_frame_size(tiny_tracker.config.corr_levels) - 1
        with pytest.raises(ShapeError):
            tiny_tracker.track_sequence([random_frame(side, side, seed=i) for i in range(2)])


class TestFeatureEncoder:
    def test_quarter_resolution_output(self):
        encoder = FeatureEncoder(8, (4, 6), rng=np.random.default_rng(0))
        features = encode_frame(prepare_frame(random_frame(32, 24)), encoder)
        assert features.shape == (8, 8, 6)
        assert np.all(np.isfinite(features.data))

    def test_unpadded_frame_rejected(self):
        encoder = FeatureEncoder(8, (4, 6))
        with pytest.raises(ShapeError):
            encode_frame(Tensor(random_frame(10, 12)), encoder)

    def test_same_seed_same_weights(self):
        a = FeatureEncoder(8, (4, 6), rng=np.random.default_rng(3))
        b = FeatureEncoder(8, (4, 6), rng=np.random.default_rng(3))
        frame = prepare_frame(random_frame(16, 16))
        np.testing.assert_array_equal(encode_frame(frame, a).data, encode_frame(frame, b).data)

    def test_parameters_cover_all_layers(self):
        names = [n for n, _ in FeatureEncoder(8, (4, 6)).named_parameters()]
        assert names[0] == "stem.weight"
        assert "stage1.1.conv2.weight" in names
        assert "stage2.0.conv1.bias" in names
        assert names[-1] == "proj.bias"

    def test_context_encoder_has_no_norm(self):
        encoder = ContextEncoder(5, (4, 6), rng=np.random.default_rng(0))
        assert encoder.norm is False
        assert all(not block.norm for block in encoder.stage1 + encoder.stage2)
        assert encode_context(prepare_frame(random_frame(16, 16)), encoder).shape == (5, 4, 4)

    def test_gradient_reaches_stem(self):
        encoder = FeatureEncoder(4, (4, 4), rng=np.random.default_rng(0), dtype=np.float64)
        encode_frame(prepare_frame(random_frame(16, 16), np.float64), encoder).sum().backward()
        assert encoder.stem.weight.grad is not None
        assert np.any(encoder.stem.weight.grad != 0)
