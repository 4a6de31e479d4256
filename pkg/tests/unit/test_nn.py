"""Unit tests for stream_tracker.nn."""

import numpy as np
import pytest

from stream_tracker.nn import Conv2d, ConvGRU, Module
from stream_tracker.tensor import ContractError, ShapeError, Tensor
from tests.fixtures.sample_data import random_tensor


class _Stack(Module):
    def __init__(self):
        rng = np.random.default_rng(0)
        self.first = Conv2d(2, 3, 3, rng=rng)
        self.blocks = [Conv2d(3, 3, 1, rng=rng), Conv2d(3, 2, 1, rng=rng)]
        self.scale = Tensor(np.ones(1), requires_grad=True)
        self.constant = Tensor(np.ones(1))


class TestModule:
    def test_parameter_names_follow_definition_order(self):
        names = [name for name, _ in _Stack().named_parameters()]
        assert names == [
            "first.weight",
            "first.bias",
            "blocks.0.weight",
            "blocks.0.bias",
            "blocks.1.weight",
            "blocks.1.bias",
            "scale",
        ]

    def test_num_parameters(self):
        assert _Stack().num_parameters() == (3 * 2 * 9 + 3) + (9 + 3) + (6 + 2) + 1

    def test_state_dict_round_trip(self):
        a, b = _Stack(), _Stack()
        b.first.weight.data = b.first.weight.data + 1.0
        b.load_state_dict(a.state_dict())
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_state_dict_is_a_copy(self):
        model = _Stack()
        state = model.state_dict()
        state["scale"][0] = 5.0
        assert model.scale.data[0] == 1.0

    def test_load_rejects_missing_names(self):
        state = _Stack().state_dict()
        del state["scale"]
        with pytest.raises(ContractError, match="scale"):
            _Stack().load_state_dict(state)

    def test_load_rejects_wrong_shape(self):
        state = _Stack().state_dict()
        state["scale"] = np.ones(2)
        with pytest.raises(ShapeError):
            _Stack().load_state_dict(state)

    def test_zero_grad(self):
        model = _Stack()
        (model.first(random_tensor((2, 4, 4), dtype=np.float32)).sum() * model.scale.sum()).backward()
        assert model.first.weight.grad is not None
        model.zero_grad()
        assert all(p.grad is None for p in model.parameters())


class TestConv2dLayer:
    def test_same_padding_by_default(self):
        conv = Conv2d(2, 4, 5)
        assert conv(random_tensor((2, 7, 6), dtype=np.float32)).shape == (4, 7, 6)
        assert conv.in_channels == 2
        assert conv.out_channels == 4

    def test_zero_init(self):
        conv = Conv2d(2, 2, 3, zero_init=True)
        assert np.all(conv(random_tensor((2, 4, 4), dtype=np.float32)).data == 0)

    def test_init_bound(self):
        conv = Conv2d(4, 8, 3, rng=np.random.default_rng(1))
        assert np.abs(conv.weight.data).max() <= 1.0 / np.sqrt(36)

    def test_dtype(self):
        conv = Conv2d(1, 1, 3, dtype=np.float64)
        assert conv.weight.dtype == np.float64


class TestConvGRU:
    def test_keeps_hidden_shape(self):
        gru = ConvGRU(4, 3, rng=np.random.default_rng(0), dtype=np.float64)
        h = random_tensor((4, 5, 5), seed=1)
        out = gru(h, random_tensor((3, 5, 5), seed=2))
        assert out.shape == (4, 5, 5)

    def test_parameters_are_registered(self):
        gru = ConvGRU(4, 3)
        assert len(gru.parameters()) == 6
        assert gru.params().wz is gru.convz.weight
