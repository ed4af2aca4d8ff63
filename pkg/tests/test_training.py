import math

import numpy as np
import pytest

from conftest import TOY
from oracles import loop_loss_re
from transunmix.mixing import HsiCube, SceneConfig, synth_scene
from transunmix.network import ModelConfig, init_params
from transunmix.tensor import Tensor, grad_check
from transunmix.training import (
    PROFILES,
    Adam,
    NumericalError,
    TrainConfig,
    build_model,
    loss_re,
    loss_sad,
    predict,
    split_profile,
    total_loss,
    train,
)


def test_loss_re_examples(rng):
    I = rng.uniform(0, 1, (5, 3, 4))
    assert loss_re(I, I).item() == 0.0
    assert loss_re(I, I + 0.1).item() == pytest.approx(5 * 0.01, rel=1e-12)
    I_hat = rng.uniform(0, 1, (5, 3, 4))
    assert loss_re(I, I_hat).item() == pytest.approx(loop_loss_re(I, I_hat), rel=1e-12, abs=1e-12)


def test_loss_sad_examples(rng):
    I = rng.uniform(0.1, 1, (6, 3, 3))
    assert abs(loss_sad(I, 2 * I).item()) < 1e-9
    a = np.zeros((2, 1, 2))
    b = np.zeros((2, 1, 2))
    a[0], b[1] = 1.0, 1.0
    assert loss_sad(a, b).item() == pytest.approx(math.pi / 2, abs=1e-15)


def test_loss_sad_gradient(rng):
    I = rng.uniform(0.1, 1, (6, 3, 3))
    assert grad_check(lambda t: loss_sad(I, t), Tensor(rng.uniform(0.1, 1, (6, 3, 3)))) < 1e-5


def test_total_loss_weights():
    re, sad = Tensor(0.3), Tensor(0.2)
    assert total_loss(re, sad, 7.0, 0.0).item() == pytest.approx(2.1)
    assert total_loss(re, sad, 0.0, 5.0).item() == pytest.approx(1.0)


def test_scaling_behaviour(rng):
    I, I_hat = rng.uniform(0.1, 1, (4, 3, 3)), rng.uniform(0.1, 1, (4, 3, 3))
    c = 3.7
    assert loss_re(c * I, c * I_hat).item() == pytest.approx(c**2 * loss_re(I, I_hat).item(),
                                                             rel=1e-12)
    assert loss_sad(c * I, c * I_hat).item() == pytest.approx(loss_sad(I, I_hat).item(), abs=1e-12)


def test_samson_profile_defaults():
    p = PROFILES["samson"]
    assert (p["beta"], p["gamma"]) == (5e3, 3e-2)
    model, tr = split_profile(p, (156, 95, 95))
    assert (model.p, model.C, model.R, model.D) == (5, 24, 3, 600)
    assert tr.beta == 5e3 and tr.gamma == 3e-2 and tr.epochs == 200
    with pytest.raises(ValueError):
        split_profile({"bogus": 1}, (4, 5, 5))


def test_learning_rate_schedule():
    cfg = TrainConfig(lr0=1e-2)
    assert cfg.lr_at(15) == 1e-2
    assert cfg.lr_at(16) == pytest.approx(0.8e-2, rel=1e-15)
    assert cfg.lr_at(31) == pytest.approx(0.64e-2, rel=1e-15)
    assert [cfg.lr_at(e) for e in range(1, 101)] == [
        1e-2 * 0.8 ** ((e - 1) // 15) for e in range(1, 101)
    ]


@pytest.mark.parametrize("kwargs", [dict(beta=-1), dict(lr0=0), dict(lr_decay_factor=1.5)])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def toy_scene(seed=0):
    cube, E, A = synth_scene(SceneConfig(B=12, H=8, W=8, R=3, snr_db=35, seed=seed,
                                         dirichlet_alpha=0.7))
    return cube, E, A


def test_train_history_determinism_and_nonnegativity():
    cube, _, _ = toy_scene()
    cfg = ModelConfig(**TOY)
    tc = TrainConfig(epochs=12, lr0=5e-2, seed=3)
    histories, seen_min = [], []
    for _ in range(2):
        params = build_model(cube, cfg, seed=3)
        _, hist = train(cube, params, tc,
                        callback=lambda e, p, v: seen_min.append(p.decoder.data.min()))
        histories.append(hist)
    assert len(histories[0]) == 12
    assert histories[0].same_trace(histories[1])
    assert min(seen_min) >= 0.0
    assert histories[0].lr == [tc.lr_at(e) for e in range(1, 13)]


def test_decoder_initialized_from_vca():
    cube, _, _ = toy_scene()
    from transunmix.classical import vca
    params = build_model(cube, ModelConfig(**TOY), seed=4)
    np.testing.assert_array_equal(params.decoder.data, vca(cube.as_matrix(), 3, seed=4).E)


def test_training_makes_progress():
    cube, _, _ = toy_scene(1)
    params = build_model(cube, ModelConfig(**TOY), seed=0)
    _, hist = train(cube, params, TrainConfig(epochs=60, lr0=1e-2, beta=50, gamma=1.0))
    assert hist.loss[-1] < hist.loss[0]
    M, E_hat, I_hat = predict(cube, params)
    assert M.shape == (3, 8, 8) and E_hat.shape == (12, 3) and I_hat.shape == (12, 8, 8)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts():
    cube = HsiCube(np.random.default_rng(0).uniform(0.1, 0.9, (12, 8, 8)))
    params = init_params(ModelConfig(**TOY), seed=0)
    params["decoder"].data[:] = np.inf
    with pytest.raises(NumericalError, match="epoch 1"):
        train(cube, params, TrainConfig(epochs=2))


def test_weight_decay_skips_norm_parameters(toy_params):
    for _, t in toy_params.named_parameters():
        t.grad = np.zeros(t.shape)
    before = {n: t.data.copy() for n, t in toy_params.named_parameters()}
    Adam(toy_params, weight_decay=0.5).step(1e-2)
    for name, t in toy_params.named_parameters():
        moved = not np.array_equal(before[name], t.data)
        norm = ".bn." in name or ".ln1." in name or ".ln2." in name
        nonzero = np.any(before[name] != 0)
        if norm:
            assert not moved, name
        elif nonzero:
            assert moved, name
