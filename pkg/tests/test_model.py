"""Full-model assembly: batching, forward passes, prediction, gradients."""

import numpy as np
import pytest

from muan.attention import QuadrantMask
from muan.data import (
    SceneObject,
    SyntheticScene,
    ToySample,
    gen_grounding_dataset,
    gen_vqa_dataset,
    toy_vocabulary,
)
from muan.encoders import appearance_onehots, spatial_feature
from muan.errors import ConfigurationError, DatasetError, DimensionError
from muan.heads import Box, GroundingPrediction, GroundTruthScores, bce_loss, total_grounding_loss
from muan.model import (
    ModelConfig,
    MuanModel,
    batch_grounding,
    batch_vqa,
    predict_grounding,
    predict_vqa,
)
from muan.network import MuanConfig
from muan.tensor import RngStream, Tensor, backward

from conftest import check_gradients


def vqa_config(**over) -> ModelConfig:
    core = MuanConfig(task="vqa", L=2, d=16, h=2, d_g=4, dropout=0.1, d_y=8)
    base = dict(core=core, vocab_size=len(toy_vocabulary()), d_e=8,
                n_answers=26, m_max=14, n_visual=10)
    base.update(over)
    return ModelConfig(**base)


def grounding_config(**over) -> ModelConfig:
    core = MuanConfig(task="grounding", L=2, d=16, h=2, d_g=4, dropout=0.1, d_y=8)
    base = dict(core=core, vocab_size=len(toy_vocabulary()), d_e=8,
                n_answers=26, m_max=15, n_visual=100)
    base.update(over)
    return ModelConfig(**base)


# -- config ----------------------------------------------------------------------


@pytest.mark.parametrize("field,value", [
    ("vocab_size", 1),
    ("d_e", 0),
    ("n_answers", 1),
    ("m_max", 1),
    ("n_visual", 0),
    ("eta", 0.0),
    ("eta", 1.0),
])
def test_model_config_rejects_bad_values(field, value):
    with pytest.raises(ConfigurationError):
        vqa_config(**{field: value})


def test_model_config_dict_round_trip():
    cfg = vqa_config()
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


def test_model_config_rejects_unknown_fields():
    raw = vqa_config().to_dict()
    raw["head_count"] = 3
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict(raw)


def test_model_config_requires_core():
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({"vocab_size": 31})


# -- parameters ------------------------------------------------------------------


def test_parameter_names_unique_and_ordered():
    model = MuanModel(vqa_config(), RngStream(0))
    names = [n for n, _ in model.parameters()]
    assert len(names) == len(set(names))
    assert names == [n for n, _ in model.parameters()]  # stable across calls
    assert names[0].startswith("encoder.")
    assert names[-1] == "vqa_head.b"
    assert all(t.requires_grad for _, t in model.parameters())


def test_task_selects_head():
    vqa = MuanModel(vqa_config(), RngStream(0))
    grd = MuanModel(grounding_config(), RngStream(0))
    assert vqa.grounding is None and vqa.vqa is not None
    assert grd.vqa is None and grd.grounding is not None
    grd_names = {n for n, _ in grd.parameters()}
    assert "grounding_head.w_score" in grd_names
    assert not any(n.startswith("vqa_head") for n in grd_names)


def test_same_seed_same_init():
    a = MuanModel(vqa_config(), RngStream(3))
    b = MuanModel(vqa_config(), RngStream(3))
    for (na, ta), (nb, tb) in zip(a.parameters(), b.parameters()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)


# -- batching --------------------------------------------------------------------


def test_batch_vqa_layout():
    cfg = vqa_config()
    samples = gen_vqa_dataset(6, seed=5)
    batch = batch_vqa(samples, cfg)
    assert batch.tokens.shape == (6, 14)
    assert batch.appearance.shape == (6, 10, 13)
    assert batch.spatial.shape == (6, 10, 5)
    # [ans] token leads every row, then the question, then pad.
    assert np.all(batch.tokens[:, 0] == 1)
    for i, s in enumerate(samples):
        words = len(s.tokens)
        assert list(batch.tokens[i, 1:1 + words]) == s.tokens[:13]
        assert np.all(batch.tokens[i, 1 + words:] == 0)
        k = len(s.scene.objects)
        assert np.all(batch.vis_valid[i, :k]) and not np.any(batch.vis_valid[i, k:])
        obj = s.scene.objects[0]
        np.testing.assert_array_equal(
            batch.appearance[i, 0], appearance_onehots(obj.shape, obj.color, obj.size))
        np.testing.assert_array_equal(
            batch.spatial[i, 0], spatial_feature(obj.box, s.scene.width, s.scene.height))
        assert batch.one_hot[i, batch.answers[i]] == 1.0
        assert batch.one_hot[i].sum() == 1.0
    assert set(batch.question_types) <= {"count", "exists", "query"}


def test_batch_vqa_rejects_wrong_task():
    cfg = vqa_config()
    wrong = gen_grounding_dataset(1, seed=5)
    with pytest.raises(DatasetError):
        batch_vqa(wrong, cfg)


def test_batch_vqa_rejects_overfull_scene():
    cfg = vqa_config(n_visual=2)
    samples = gen_vqa_dataset(3, seed=5)  # scenes have >= 3 objects
    with pytest.raises(DatasetError):
        batch_vqa(samples, cfg)


def test_batch_grounding_layout():
    cfg = grounding_config()
    samples = gen_grounding_dataset(4, seed=8)
    batch = batch_grounding(samples, cfg)
    assert batch.tokens.shape == (4, 15)
    assert batch.appearance.shape == (4, 100, 13)
    assert np.all(batch.vis_valid)
    # the exact ground-truth box sits among the proposals, so s* peaks at 1
    assert np.all(batch.s_star.max(axis=-1) == 1.0)
    # shared regression target: every proposal row carries the same box
    for i in range(4):
        np.testing.assert_array_equal(batch.t_star[i], np.tile(batch.t_star[i, 0], (100, 1)))
    for i, s in enumerate(samples):
        src = s.scene.proposal_sources[3]
        obj = s.scene.objects[src]
        np.testing.assert_array_equal(
            batch.appearance[i, 3], appearance_onehots(obj.shape, obj.color, obj.size))
        np.testing.assert_array_equal(
            batch.spatial[i, 3],
            spatial_feature(s.scene.proposals[3], s.scene.width, s.scene.height))


def test_batch_grounding_rejects_proposal_count_mismatch():
    cfg = grounding_config(n_visual=7)
    samples = gen_grounding_dataset(1, seed=8)
    with pytest.raises(DatasetError):
        batch_grounding(samples, cfg)


# -- forward ---------------------------------------------------------------------


def test_forward_vqa_shapes_and_determinism():
    cfg = vqa_config()
    model = MuanModel(cfg, RngStream(1))
    batch = batch_vqa(gen_vqa_dataset(5, seed=3), cfg)
    logits, states = model.forward_vqa(batch, train=False)
    assert logits.data.shape == (5, 26)
    assert len(states) == 2
    assert states[0].weights.shape == (5, 2, 24, 24)
    again, _ = model.forward_vqa(batch, train=False)
    np.testing.assert_array_equal(logits.data, again.data)


def test_forward_vqa_train_mode_needs_rng_and_is_seeded():
    cfg = vqa_config()
    model = MuanModel(cfg, RngStream(1))
    batch = batch_vqa(gen_vqa_dataset(4, seed=3), cfg)
    with pytest.raises(ConfigurationError):
        model.forward_vqa(batch, train=True)
    a, _ = model.forward_vqa(batch, rng=RngStream(9), train=True)
    b, _ = model.forward_vqa(batch, rng=RngStream(9), train=True)
    c, _ = model.forward_vqa(batch, rng=RngStream(10), train=True)
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_forward_grounding_shapes():
    cfg = grounding_config()
    model = MuanModel(cfg, RngStream(2))
    batch = batch_grounding(gen_grounding_dataset(3, seed=4), cfg)
    pred, states = model.forward_grounding(batch, train=False)
    assert pred.scores.data.shape == (3, 100)
    assert pred.boxes.data.shape == (3, 100, 4)
    assert np.all((pred.boxes.data > 0.0) & (pred.boxes.data < 1.0))
    assert states[0].weights.shape == (3, 2, 115, 115)


def test_forward_rejects_task_mismatch():
    vqa_model = MuanModel(vqa_config(), RngStream(0))
    grd_model = MuanModel(grounding_config(), RngStream(0))
    vqa_batch = batch_vqa(gen_vqa_dataset(2, seed=1), vqa_config())
    grd_batch = batch_grounding(gen_grounding_dataset(2, seed=1), grounding_config())
    with pytest.raises(ConfigurationError):
        vqa_model.forward_grounding(grd_batch)
    with pytest.raises(ConfigurationError):
        grd_model.forward_vqa(vqa_batch)


def test_forward_rejects_wrong_quadrant_extents():
    cfg = vqa_config()
    model = MuanModel(cfg, RngStream(0))
    batch = batch_vqa(gen_vqa_dataset(2, seed=1), cfg)
    bad = QuadrantMask(m=5, n=10, disable_co=True)
    with pytest.raises(DimensionError):
        model.forward_vqa(batch, quad=bad)


def test_quadrant_helper_matches_config():
    model = MuanModel(grounding_config(), RngStream(0))
    quad = model.quadrant(disable_self=True)
    assert (quad.m, quad.n) == (15, 100)
    assert quad.disable_self and not quad.disable_co


# -- prediction ------------------------------------------------------------------


def test_predict_vqa_argmax_first_tie():
    logits = Tensor(np.array([[0.0, 2.0, 2.0], [3.0, 1.0, 0.0]]))
    np.testing.assert_array_equal(predict_vqa(logits), [1, 0])


def test_predict_grounding_refined_vs_unrefined():
    cfg = grounding_config()
    samples = gen_grounding_dataset(2, seed=6)
    batch = batch_grounding(samples, cfg)
    scores = np.zeros((2, 100))
    scores[0, 17] = 5.0
    scores[1, 3] = 5.0
    boxes = np.full((2, 100, 4), 0.5)
    boxes[0, 17] = [0.2, 0.3, 0.1, 0.2]  # center (20, 30), size (10, 20) on a 100-canvas
    pred = GroundingPrediction(scores=Tensor(scores), boxes=Tensor(boxes))

    raw = predict_grounding(pred, batch, refined=False)
    assert raw[0] == batch.proposals[0][17]
    assert raw[1] == batch.proposals[1][3]

    refined = predict_grounding(pred, batch, refined=True)
    got = refined[0]
    assert (got.x_tl, got.y_tl, got.x_br, got.y_br) == pytest.approx(
        (15.0, 20.0, 25.0, 40.0), abs=1e-12)


# -- gradients through the whole model --------------------------------------------


def test_vqa_model_gradients():
    core = MuanConfig(task="vqa", L=1, d=8, h=2, d_g=4, dropout=0.0, d_y=6)
    cfg = ModelConfig(core=core, vocab_size=len(toy_vocabulary()), d_e=4,
                      n_answers=5, m_max=6, n_visual=3)
    model = MuanModel(cfg, RngStream(4))
    scene = SyntheticScene(width=10.0, height=10.0, objects=[
        SceneObject("circle", "red", "small", Box(1.0, 1.0, 3.0, 3.0)),
        SceneObject("square", "blue", "large", Box(5.0, 5.0, 9.0, 9.0)),
    ])
    sample = ToySample(task="vqa", tokens=toy_vocabulary().encode(["how", "many", "red"]),
                       scene=scene, label={"answer": 2, "counts": {"2": 3}})
    batch = batch_vqa([sample], cfg)

    pairs = list(model.parameters())

    def loss_fn():
        logits, _ = model.forward_vqa(batch, train=False)
        return bce_loss(logits, batch.one_hot)

    check_gradients(loss_fn, [t for _, t in pairs], rtol=1e-4, eps=1e-5)


def test_grounding_model_gradients():
    core = MuanConfig(task="grounding", L=1, d=8, h=2, d_g=4, dropout=0.0, d_y=6)
    cfg = ModelConfig(core=core, vocab_size=len(toy_vocabulary()), d_e=4,
                      n_answers=26, m_max=6, n_visual=4)
    model = MuanModel(cfg, RngStream(4))
    full = gen_grounding_dataset(1, seed=9)[0]
    scene = full.scene
    trimmed = SyntheticScene(width=scene.width, height=scene.height, objects=scene.objects,
                             proposals=scene.proposals[:4],
                             proposal_sources=scene.proposal_sources[:4])
    sample = ToySample(task="grounding", tokens=full.tokens[:5], scene=trimmed,
                       label=full.label)
    batch = batch_grounding([sample], cfg)
    gt = GroundTruthScores(s_star=batch.s_star, t_star=batch.t_star, eta=cfg.eta)
    pairs = list(model.parameters())

    def loss_fn():
        pred, _ = model.forward_grounding(batch, train=False)
        return total_grounding_loss(pred, gt, lam=0.5).total

    check_gradients(loss_fn, [t for _, t in pairs], rtol=1e-4, eps=1e-5)
