"""Learning-rate schedule: warmup, plateau, geometric decay."""

import math

import pytest

from muan.errors import ConfigurationError, ContractError
from muan.schedule import TrainHyper, lr_at


def hyper(**over) -> TrainHyper:
    return TrainHyper(**over)


@pytest.mark.parametrize("field,value", [
    ("lr_coefficient", 0.0),
    ("lr_coefficient", -1e-3),
    ("warmup_epochs", 0),
    ("decay_factor", 0.0),
    ("decay_factor", 1.5),
    ("decay_every", 0),
    ("decay_start", 0),
    ("batch_size", 0),
    ("epochs", -1),
    ("lam", -0.5),
])
def test_hyper_rejects_bad_values(field, value):
    with pytest.raises(ConfigurationError):
        hyper(**{field: value})


def test_hyper_dict_round_trip_uses_lambda_key():
    h = hyper(lam=0.25, epochs=4)
    d = h.to_dict()
    assert d["lambda"] == 0.25
    assert "lam" not in d
    assert TrainHyper.from_dict(d) == h


def test_hyper_rejects_unknown_fields():
    with pytest.raises(ConfigurationError):
        TrainHyper.from_dict({"momentum": 0.9})


def test_plateau_value_full_scale():
    # alpha = 1.5e-2 / sqrt(768 * 10); quoted rounded value 1.712e-4
    h = hyper()
    alpha = 1.5e-2 / math.sqrt(7680)
    for epoch in range(3, 10):
        assert lr_at(epoch, 0, h, d=768, L=10) == alpha
    assert abs(lr_at(5, 0, h, d=768, L=10) - 1.712e-4) <= 1e-7


def test_warmup_is_linear_from_a_third():
    h = hyper()
    alpha = 1.5e-2 / math.sqrt(7680)
    assert lr_at(0, 0, h, 768, 10) == pytest.approx(alpha / 3.0, rel=1e-15)
    assert lr_at(1, 0, h, 768, 10) == pytest.approx(alpha * 5.0 / 9.0, rel=1e-15)
    assert lr_at(2, 0, h, 768, 10) == pytest.approx(alpha * 7.0 / 9.0, rel=1e-15)
    assert lr_at(3, 0, h, 768, 10) == alpha


def test_decay_fifth_at_epochs_ten_and_twelve():
    h = hyper()
    alpha = 1.5e-2 / math.sqrt(7680)
    assert lr_at(10, 0, h, 768, 10) == pytest.approx(alpha * 0.2, rel=1e-15)
    assert lr_at(11, 0, h, 768, 10) == pytest.approx(alpha * 0.2, rel=1e-15)
    assert lr_at(12, 0, h, 768, 10) == pytest.approx(alpha * 0.04, rel=1e-15)
    assert lr_at(13, 0, h, 768, 10) == pytest.approx(alpha * 0.04, rel=1e-15)
    assert lr_at(14, 0, h, 768, 10) == pytest.approx(alpha * 0.008, rel=1e-15)


def test_custom_decay_grid():
    h = hyper(decay_start=5, decay_every=3, decay_factor=0.5)
    alpha = 1.5e-2 / math.sqrt(64 * 2)
    got = [lr_at(e, 0, h, 64, 2) / alpha for e in range(5, 12)]
    assert got == pytest.approx([0.5, 0.5, 0.5, 0.25, 0.25, 0.25, 0.125], rel=1e-15)


def test_piecewise_monotone():
    h = hyper()
    values = [lr_at(e, 0, h, 64, 2) for e in range(0, 30)]
    for before, after in zip(values[:3], values[1:4]):
        assert after >= before
    plateau = values[3:10]
    assert all(v == plateau[0] for v in plateau)
    for before, after in zip(values[10:], values[11:]):
        assert after <= before


def test_width_scaling():
    h = hyper()
    assert lr_at(5, 0, h, 64, 2) == 1.5e-2 / math.sqrt(128)
    assert lr_at(5, 0, h, 256, 2) == lr_at(5, 0, h, 64, 8)  # same product d*L


def test_rejects_negative_epoch_or_step():
    h = hyper()
    with pytest.raises(ContractError):
        lr_at(-1, 0, h, 64, 2)
    with pytest.raises(ContractError):
        lr_at(0, -3, h, 64, 2)
