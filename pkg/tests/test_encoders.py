"""Text encoder (embedding + recurrent pass) and visual featurization."""

import numpy as np
import pytest

from conftest import check_gradients
from muan.encoders import (
    APPEARANCE_WIDTH,
    appearance_onehots,
    encode_text,
    init_encoder,
    spatial_feature,
    visual_projection,
)
from muan.errors import ConfigurationError, DimensionError, VocabularyError
from muan.heads import Box
from muan.tensor import RngStream, Tensor, mul, tsum


def make_encoder(task="vqa", vocab_size=12, d_e=3, d_x=4, d_y=6, seed=1):
    return init_encoder(RngStream(seed), vocab_size, d_e, d_x, d_y, task)


# ---------------------------------------------------------------- spatial ---


def test_spatial_feature_full_canvas():
    feat = spatial_feature(Box(0.0, 0.0, 50.0, 20.0), canvas_w=50.0, canvas_h=20.0)
    np.testing.assert_array_equal(feat, [0.0, 0.0, 1.0, 1.0, 1.0])


def test_spatial_feature_centered_quarter():
    feat = spatial_feature(Box(25.0, 25.0, 75.0, 75.0), canvas_w=100.0, canvas_h=100.0)
    np.testing.assert_allclose(feat, [0.25, 0.25, 0.75, 0.75, 0.25], atol=1e-15)


def test_appearance_onehots_layout():
    v = appearance_onehots("square", "green", "large")
    assert v.shape == (APPEARANCE_WIDTH,)
    assert v.sum() == 3.0
    assert v[1] == 1.0          # square
    assert v[3 + 2] == 1.0      # green
    assert v[3 + 8 + 1] == 1.0  # large
    with pytest.raises(ConfigurationError):
        appearance_onehots("hexagon", "green", "large")


# ------------------------------------------------------------ text encoder ---


def test_encode_text_shapes_and_mask():
    enc = make_encoder()
    tokens = np.array([1, 5, 7, 0, 0])
    states, valid = encode_text(tokens, enc)
    assert states.data.shape == (5, 4)
    np.testing.assert_array_equal(valid, [True, True, True, False, False])
    assert np.all(states.data[3:] == 0.0)
    assert np.any(states.data[:3] != 0.0)


def test_encode_text_all_pad_is_all_zero():
    enc = make_encoder()
    # even with nonzero recurrent biases the mask guarantees zero rows
    enc.gru.b_u.data[:] = 0.3
    enc.gru.b_c.data[:] = -0.2
    states, valid = encode_text(np.zeros(4, dtype=np.int64), enc)
    assert np.all(states.data == 0.0)
    assert not valid.any()


def test_encode_text_appended_padding_leaves_states_bitwise():
    enc = make_encoder()
    short = np.array([1, 5, 7, 2])
    long = np.array([1, 5, 7, 2, 0, 0, 0])
    s1, _ = encode_text(short, enc)
    s2, _ = encode_text(long, enc)
    assert np.array_equal(s2.data[:4], s1.data)


def test_encode_text_is_order_sensitive():
    enc = make_encoder()
    a, _ = encode_text(np.array([2, 3, 4]), enc)
    b, _ = encode_text(np.array([4, 3, 2]), enc)
    assert not np.array_equal(a.data[-1], b.data[-1])


def test_encode_text_batched_matches_per_row():
    enc = make_encoder()
    tokens = np.array([[1, 5, 7, 0], [2, 3, 0, 0]])
    batched, valid = encode_text(tokens, enc)
    assert batched.data.shape == (2, 4, 4)
    assert valid.shape == (2, 4)
    for i in range(2):
        single, _ = encode_text(tokens[i], enc)
        np.testing.assert_allclose(batched.data[i], single.data, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("bad", [np.array([1, 99]), np.array([-1, 2]), np.array([1.5, 2.0])])
def test_encode_text_rejects_bad_ids(bad):
    enc = make_encoder()
    with pytest.raises(VocabularyError):
        encode_text(bad, enc)


def test_pad_row_freeze():
    enc = make_encoder()
    enc.embedding.data[0, :] = 5.0
    enc.embedding.grad = np.ones_like(enc.embedding.data)
    enc.freeze_pad_row()
    assert np.all(enc.embedding.data[0] == 0.0)
    assert np.all(enc.embedding.grad[0] == 0.0)
    assert np.all(enc.embedding.grad[1:] == 1.0)


def test_encoder_gradients():
    enc = make_encoder()
    tokens = np.array([1, 5, 7, 2])
    # only the text path: embedding + recurrent cell
    tensors = [enc.embedding] + [t for _, t in enc.gru.parameters("gru")]

    def f():
        states, _ = encode_text(tokens, enc)
        return tsum(mul(states, states))

    check_gradients(f, tensors, rtol=1e-4, eps=1e-5)


# --------------------------------------------------------- visual projection ---


def test_visual_projection_vqa_path():
    enc = make_encoder(task="vqa")
    assert enc.w_spatial is None
    app = Tensor(np.zeros((3, APPEARANCE_WIDTH)))
    spa = Tensor(np.zeros((3, 5)))
    enc.b_vis.data[:] = 1.5
    out = visual_projection(app, spa, enc)
    assert out.data.shape == (3, 6)
    np.testing.assert_array_equal(out.data, np.full((3, 6), 1.5))


def test_visual_projection_grounding_lifts_spatial():
    enc = make_encoder(task="grounding")
    assert enc.w_spatial is not None
    assert enc.w_vis.data.shape[0] == 2 * APPEARANCE_WIDTH
    g = np.random.default_rng(0)
    out = visual_projection(Tensor(g.random((4, APPEARANCE_WIDTH))), Tensor(g.random((4, 5))), enc)
    assert out.data.shape == (4, 6)
    # a spatial change must reach the output through the lift
    spa2 = Tensor(g.random((4, 5)))
    out2 = visual_projection(Tensor(np.zeros((4, APPEARANCE_WIDTH))), spa2, enc)
    out3 = visual_projection(Tensor(np.zeros((4, APPEARANCE_WIDTH))), Tensor(spa2.data + 1.0), enc)
    assert not np.array_equal(out2.data, out3.data)


def test_visual_projection_width_checks():
    enc = make_encoder(task="vqa")
    with pytest.raises(DimensionError):
        visual_projection(Tensor(np.zeros((2, 7))), Tensor(np.zeros((2, 5))), enc)
    with pytest.raises(DimensionError):
        visual_projection(Tensor(np.zeros((2, APPEARANCE_WIDTH))), Tensor(np.zeros((2, 4))), enc)


def test_visual_projection_gradients():
    enc = make_encoder(task="grounding")
    g = np.random.default_rng(1)
    app = Tensor(g.random((3, APPEARANCE_WIDTH)), requires_grad=True)
    spa = Tensor(g.random((3, 5)), requires_grad=True)
    vis_params = [enc.w_vis, enc.b_vis, enc.w_spatial, enc.b_spatial]

    def f():
        out = visual_projection(app, spa, enc)
        return tsum(mul(out, out))

    check_gradients(f, [app, spa] + vis_params, rtol=1e-4)


def test_init_encoder_rejects_unknown_task():
    with pytest.raises(ConfigurationError):
        init_encoder(RngStream(0), 10, 3, 4, 6, "captioning")
