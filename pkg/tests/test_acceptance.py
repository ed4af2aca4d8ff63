"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (or ``python3 tests/test_acceptance.py``);
the summary lines appear under "acceptance criteria" at the end of the run.
"""

import math
import sys
import time

import numpy as np
import pytest

import conftest
from conftest import TOY
from oracles import (
    barycentric_grid,
    grid_best_objective,
    max_volume_subset_batched,
    parameter_gradient_errors,
)
from transunmix.classical import fclsu_matrix, match_endmembers, rmse, sad, vca, vca_select
from transunmix.io import (
    export_abundance_pgm,
    export_endmembers_csv,
    read_endmembers_csv,
    read_hsic,
    read_pgm,
    save_checkpoint,
    write_hsic,
)
from transunmix.mixing import HsiCube, SceneConfig, synth_scene, validate
from transunmix.network import (
    ModelConfig,
    abundance_head,
    embed,
    encode,
    forward,
    init_params,
    patchify,
)
from transunmix.tensor import (
    BatchNormState,
    RngStream,
    Tensor,
    activation,
    arccos,
    arctan,
    batch_norm2d,
    bmm,
    conv2d,
    grad_check,
    layer_norm,
    matmul,
    softmax,
)
from transunmix.training import TrainConfig, build_model, loss_re, loss_sad, total_loss, train


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def weighted(t: Tensor, seed: int) -> Tensor:
    return (t * np.random.default_rng(seed).standard_normal(t.shape)).sum()


# ---------------------------------------------------------------- criterion 1


def _op_gradient_errors(rng) -> dict:
    x = rng.standard_normal((3, 5, 5))
    w3 = rng.standard_normal((2, 3, 3, 3))
    rows = rng.standard_normal((4, 6))
    ln_w, ln_b = Tensor(rng.uniform(0.5, 1.5, 6)), Tensor(rng.standard_normal(6))
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    qa, qb = rng.standard_normal((2, 1, 4)), rng.standard_normal((2, 4, 3))
    checks = {
        "matmul": (lambda t: weighted(matmul(t, Tensor(b)), 1), a),
        "bmm": (lambda t: weighted(bmm(Tensor(qa), t), 2), qb),
        "conv3x3": (lambda t: weighted(conv2d(t, Tensor(w3), None, padding=1), 3), x),
        "conv1x1": (lambda t: weighted(conv2d(Tensor(x), t, None), 4), rng.standard_normal((2, 3, 1, 1))),
        "batch_norm": (lambda t: weighted(batch_norm2d(t, BatchNormState(3), True), 5), x),
        "layer_norm": (lambda t: weighted(layer_norm(t, ln_w, ln_b), 6), rows),
        "softmax": (lambda t: weighted(softmax(t, 1), 7), rows),
        "leaky_relu": (lambda t: weighted(activation(t, "leaky_relu"), 8), rows + 0.05),
        "gelu": (lambda t: weighted(activation(t, "gelu"), 9), rows),
        "arccos": (lambda t: weighted(arccos(t), 10), rng.uniform(-0.9, 0.9, 6)),
        "arctan": (lambda t: weighted(arctan(t), 11), rows),
        "loss_re": (lambda t: loss_re(x, t), rng.standard_normal((3, 5, 5))),
        "loss_sad": (lambda t: loss_sad(np.abs(x) + 0.1, t), rng.uniform(0.1, 1, (3, 5, 5))),
    }
    return {name: grad_check(f, Tensor(v)) for name, (f, v) in checks.items()}


def _model_gradient_errors() -> dict:
    rng = np.random.default_rng(12345)
    cfg = ModelConfig(**TOY, dropout_rate=0.0)
    params = init_params(cfg, seed=7, endmembers=rng.uniform(0.1, 0.9, (12, 3)))
    cube = rng.uniform(0.05, 0.9, (12, 8, 8))
    tc = TrainConfig()  # loss weights of the default profile

    def loss(training, restore=None):
        def fn():
            if restore:
                restore()
            out = forward(cube, params, training=training, rng=RngStream(0))
            return total_loss(loss_re(cube, out.I_hat), loss_sad(cube, out.I_hat), tc.beta, tc.gamma)
        return fn

    # evaluation mode: every parameter is live
    for i, s in enumerate(params.bn.values()):
        s.running_mean = np.random.default_rng(i).standard_normal(s.channels) * 0.1
        s.running_var = np.random.default_rng(i + 10).uniform(0.5, 2.0, s.channels)
    errors = {f"eval:{k}": v for k, v in
              parameter_gradient_errors(loss(False), params, np.random.default_rng(1)).items()}

    # training mode with frozen running statistics; the conv biases feeding a
    # batch norm cancel exactly, so they are checked for a zero gradient instead
    saved = {k: (s.running_mean.copy(), s.running_var.copy()) for k, s in params.bn.items()}

    def restore():
        for k, (m, v) in saved.items():
            params.bn[k].running_mean, params.bn[k].running_var = m.copy(), v.copy()

    pre_bn = ("enc1.bias", "enc2.bias", "enc3.bias")
    fn = loss(True, restore)
    errors.update({f"train:{k}": v for k, v in
                   parameter_gradient_errors(fn, params, np.random.default_rng(2), skip=pre_bn).items()})
    params.zero_grad()
    fn().backward()
    zero_bias = max(float(np.abs(params[n].grad).max()) for n in pre_bn)
    return errors, zero_bias


def test_criterion_1_gradients():
    start = time.perf_counter()
    ops = _op_gradient_errors(np.random.default_rng(0))
    model, zero_bias = _model_gradient_errors()
    elapsed = time.perf_counter() - start
    worst_op = max(ops, key=ops.get)
    worst_param = max(model, key=model.get)
    ok = ops[worst_op] < 1e-4 and model[worst_param] < 1e-4 and zero_bias < 1e-12 and elapsed < 60
    report(1, "gradient suite", ok,
           f"worst op {worst_op} {ops[worst_op]:.2e}, worst param {worst_param} "
           f"{model[worst_param]:.2e}, pre-BN bias |g| {zero_bias:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- criterion 2


def test_criterion_2_dimensions():
    start = time.perf_counter()
    cfg = ModelConfig(B=156, H=95, W=95, R=3, C=24, p=5)
    params = init_params(cfg, seed=0)
    features = encode(np.zeros((156, 95, 95)), params, training=False)
    x_patch = patchify(features, cfg.p)
    tokens = embed(x_patch, params["cls_token"], params["pos_token"])
    M = abundance_head(tokens[0:1], params)
    elapsed = time.perf_counter() - start
    shapes = (features.shape, x_patch.shape, tokens.shape[0], M.shape)
    ok = shapes == ((95, 95, 24), (361, 600), 362, (3, 95, 95)) and elapsed < 1.0
    report(2, "dimension fidelity", ok, f"{shapes}, {elapsed:.2f}s")


# ---------------------------------------------------------------- criterion 3


def test_criterion_3_constraints():
    worst_neg, worst_sum, worst_attn = 0.0, 0.0, 0.0
    cfg = ModelConfig(**TOY)
    master = np.random.default_rng(2024)
    params = None
    for trial in range(1000):
        if trial % 50 == 0:
            params = init_params(cfg, seed=trial)
            for name, t in params.named_parameters():
                if name.startswith("blocks.") and name.endswith(("wq", "wk")):
                    t.data = t.data * master.uniform(1, 20)  # sharpen attention
        cube = master.uniform(0, 1, (12, 8, 8)) * master.uniform(0.1, 10)
        out = forward(cube, params, training=bool(trial % 2), rng=RngStream(trial))
        rep = validate(out.M.data, tol=1e-6)
        worst_neg = max(worst_neg, rep.max_neg, float(-out.M.data.min()))
        worst_sum = max(worst_sum, rep.max_sum_dev)
        for attn in out.attention:
            worst_attn = max(worst_attn, float(np.abs(attn.sum(axis=1) - 1).max()))

    scene, _, _ = synth_scene(SceneConfig(B=12, H=8, W=8, R=3, snr_db=30, seed=5))
    model = build_model(scene, ModelConfig(**TOY), seed=5)
    decoder_mins = []
    train(scene, model, TrainConfig(epochs=50, lr0=5e-2),
          callback=lambda e, p, v: decoder_mins.append(float(p.decoder.data.min())))
    ok = (worst_neg <= 0.0 and worst_sum <= 1e-6 and worst_attn <= 1e-12
          and len(decoder_mins) == 50 and min(decoder_mins) >= 0.0)
    report(3, "constraint suite", ok,
           f"max neg {worst_neg:.1e}, max |sum-1| {worst_sum:.1e}, max attn dev {worst_attn:.1e}, "
           f"min decoder entry over 50 steps {min(decoder_mins):.3g}")


# ---------------------------------------------------------------- criterion 4


def test_criterion_4_fclsu():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    grid = barycentric_grid(100)
    worst_gap, worst_rec = -np.inf, 0.0
    for _ in range(200):
        E = rng.uniform(0.05, 1.0, (20, 3))
        a_true = rng.dirichlet(np.ones(3))
        y = E @ a_true
        a = fclsu_matrix(y[:, None], E)[:, 0]
        objective = float(np.sum((E @ a - y) ** 2))
        worst_gap = max(worst_gap, objective - grid_best_objective(y, E, grid))
        worst_rec = max(worst_rec, float(np.abs(a - a_true).max()))
    elapsed = time.perf_counter() - start
    ok = worst_gap <= 0.0 and worst_rec < 1e-4 and elapsed < 30
    report(4, "FCLSU oracle", ok,
           f"max(objective - grid best) {worst_gap:.1e}, max abundance error {worst_rec:.1e}, "
           f"{elapsed:.1f}s")


# ---------------------------------------------------------------- criterion 5


def test_criterion_5_vca():
    start = time.perf_counter()
    matches, angles = 0, []
    for trial in range(100):
        rng = np.random.default_rng(10_000 + trial)
        B, n, R = 30, 40, 3
        E = rng.uniform(0.05, 0.95, (B, R))
        A = np.hstack([np.eye(R), 0.9 * rng.dirichlet(np.ones(R), n - R).T + 0.1 / R])
        A = A[:, rng.permutation(n)]
        clean = E @ A
        noise = rng.standard_normal(clean.shape)
        noise *= np.sqrt(np.sum(clean**2) / (np.sum(noise**2) * 10 ** (40 / 10)))
        Y = clean + noise
        chosen = tuple(sorted(vca_select(Y, R, seed=trial).tolist()))
        matches += chosen == tuple(sorted(max_volume_subset_batched(Y, R)))
        E_hat = vca(Y, R, seed=trial).E
        perm = match_endmembers(E_hat, E)
        angles.append(sad(perm.apply_columns(E_hat), E).overall)
    elapsed = time.perf_counter() - start
    mean_sad = float(np.mean(angles))
    ok = matches >= 95 and mean_sad <= 0.035 and elapsed < 60
    report(5, "VCA oracle", ok,
           f"{matches}/100 match the max-volume oracle, mean SAD {mean_sad:.4f} rad, {elapsed:.1f}s")


# ------------------------------------------------------------ criteria 6 and 7

# The listed recovery profile (p=4, C=16) gives D = 256, which R = 3 cannot
# divide; C = 15 (D = 240) is the nearest width satisfying every constraint.
RECOVERY = dict(C=15, p=4, heads=4)


@pytest.fixture(scope="module")
def recovery_run():
    scene_cfg = SceneConfig(B=64, H=32, W=32, R=3, snr_db=30, dirichlet_alpha=0.7,
                            smoothing_sigma=1.0, seed=0)
    cube, E, A = synth_scene(scene_cfg)
    model_cfg = ModelConfig(B=64, H=32, W=32, R=3, **RECOVERY)
    train_cfg = TrainConfig(beta=5e3, gamma=3e-2, epochs=200, lr0=6e-3, weight_decay=4e-5, seed=0)
    params = build_model(cube, model_cfg, seed=0)
    E_init = params.decoder.data.copy()
    start = time.perf_counter()
    params, history = train(cube, params, train_cfg)
    elapsed = time.perf_counter() - start
    out = forward(cube, params, training=False)
    return dict(cube=cube, E=E, A=A, E_init=E_init, params=params, history=history, out=out,
                train_cfg=train_cfg, elapsed=elapsed)


@pytest.mark.slow
def test_criterion_6_synthetic_recovery(recovery_run):
    r = recovery_run
    E_hat = r["out"].E_hat
    perm = match_endmembers(E_hat, r["E"])
    abundance_rmse = rmse(perm.apply_rows(r["out"].M.data), r["A"].data).overall
    sad_hat = sad(perm.apply_columns(E_hat), r["E"]).overall
    init_perm = match_endmembers(r["E_init"], r["E"])
    sad_init = sad(init_perm.apply_columns(r["E_init"]), r["E"]).overall
    ok = (abundance_rmse <= 0.15 and sad_hat <= 0.15 and sad_hat <= sad_init
          and r["elapsed"] <= 600)
    report(6, "end-to-end synthetic recovery", ok,
           f"RMSE {abundance_rmse:.4f} (<= 0.15), SAD {sad_hat:.4f} rad (<= 0.15), "
           f"VCA init SAD {sad_init:.4f}, {r['elapsed']:.0f}s")


@pytest.mark.slow
def test_criterion_7_loss_progress(recovery_run):
    h, cfg = recovery_run["history"], recovery_run["train_cfg"]
    ratio = h.loss[-1] / h.loss[0]
    expected_lr = [cfg.lr0 * 0.8 ** ((e - 1) // 15) for e in range(1, cfg.epochs + 1)]
    ok = ratio < 0.5 and h.lr == expected_lr
    report(7, "loss progress", ok,
           f"final/first loss {h.loss[-1]:.4g}/{h.loss[0]:.4g} = {ratio:.3f} (< 0.5), "
           f"lr trace exact: {h.lr == expected_lr}")


# ---------------------------------------------------------------- criterion 8


def test_criterion_8_metric_algebra():
    rng = np.random.default_rng(8)
    A = rng.dirichlet(np.ones(4), 100).T.reshape(4, 10, 10)
    E = rng.uniform(0.05, 1, (50, 4))
    self_rmse = rmse(A, A).overall
    self_sad = sad(E, E).overall
    per_class = np.array([0.0712, 0.0683, 0.0930])
    aggregate = math.sqrt(float(np.mean(per_class**2)))
    via_metric = rmse(np.broadcast_to(per_class[:, None, None], (3, 1, 5)), np.zeros((3, 1, 5))).overall
    ok = self_rmse == 0 and self_sad < 1e-7 and round(aggregate, 4) == 0.0783 \
        and round(via_metric, 4) == 0.0783
    report(8, "metric algebra", ok,
           f"self RMSE {self_rmse}, self SAD {self_sad:.1e}, aggregate {aggregate:.5f} -> 0.0783")


# ---------------------------------------------------------------- criterion 9


def test_criterion_9_determinism_and_formats(tmp_path):
    cube, _, _ = synth_scene(SceneConfig(B=12, H=8, W=8, R=3, snr_db=30, seed=9))
    histories, blobs = [], []
    for k in range(2):
        params = build_model(cube, ModelConfig(**TOY), seed=9)
        params, hist = train(cube, params, TrainConfig(epochs=20, lr0=2e-2, seed=9))
        save_checkpoint(params, tmp_path / f"ck{k}.hsck")
        histories.append(hist)
        blobs.append((tmp_path / f"ck{k}.hsck").read_bytes())
    same_history = histories[0].same_trace(histories[1])
    same_checkpoint = blobs[0] == blobs[1]

    rng = np.random.default_rng(9)
    data = rng.standard_normal((7, 6, 5))
    write_hsic(HsiCube(data), tmp_path / "c.hsic")
    hsic_ok = read_hsic(tmp_path / "c.hsic").data.tobytes() == data.tobytes()

    E = rng.uniform(0, 1, (7, 3))
    wl = rng.uniform(400, 2500, 7)
    export_endmembers_csv(E, wl, tmp_path / "e.csv")
    E_back, wl_back = read_endmembers_csv(tmp_path / "e.csv")
    csv_ok = E_back.E.tobytes() == E.tobytes() and wl_back.tobytes() == wl.tobytes()

    levels = rng.integers(0, 256, (1, 6, 5))
    (path,) = export_abundance_pgm(levels / 255.0, tmp_path / "maps")
    pgm_ok = np.array_equal(read_pgm(path), levels[0])

    ok = same_history and same_checkpoint and hsic_ok and csv_ok and pgm_ok
    report(9, "determinism and formats", ok,
           f"history {same_history}, checkpoint {same_checkpoint}, HSIC {hsic_ok}, "
           f"CSV {csv_ok}, PGM {pgm_ok}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
