"""Acceptance gate. Each test covers one criterion, records a PASS/FAIL line
(shown in the "acceptance criteria" section of the pytest summary) and then
asserts, so the suite goes red on any failure."""
import os
import statistics
import time

import numpy as np
import pytest

import aagnet.train as train_mod
from aagnet import layers as L
from aagnet import ops
from aagnet.checkpoint import load_checkpoint, save_checkpoint
from aagnet.data import DatasetSplit
from aagnet.gradcheck import check_gradients
from aagnet.metrics import binary_auc, confusion_matrix, evaluate, prf1
from aagnet.model import (ModelConfig, aag_fuse, analytic_param_count, build_model, classifier_head,
                          count_params, forward)
from aagnet.synthetic import synthetic_split
from aagnet.tensor import Tape, Tensor
from aagnet.train import AdamState, EarlyStopping, ReduceLROnPlateau, TrainConfig, adam_step, fit
from conftest import ACCEPTANCE, randomize_params
from fixtures import OVERFIT_EPOCHS, OVERFIT_SEEDS, overfit_run
from oracles import hand_adam, pair_count_auc
from test_layers import randomized, tensors
from test_model import DEFAULT_HAND, TINY, TINY_HAND
from test_ops import OP_CASES, rand, weighted_sum


def verdict(name, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


# ------------------------------------------------------- gradient fidelity


def layer_cases(rng):
    """(name, tensors, scalar loss builder) for every composite layer type."""
    cases = []

    def block(name, build, params, x):
        w = rng.standard_normal(build().shape)
        cases.append((name, [x, *params.values()], lambda: weighted_sum(build(), w)))

    fire = L.FireSpec(3, 6)
    p = tensors(randomized(L.fire_init(rng, 2, fire), rng), grad=True)
    x = Tensor(rng.standard_normal((2, 5, 5, 2)), requires_grad=True, name="x")
    block("fire", lambda p=p, x=x: L.fire_forward(x, fire, p), p, x)

    for spec in (L.MBConvSpec(3, 3, 1, 2), L.MBConvSpec(3, 5, 2, 2)):
        p = tensors(randomized(L.mbconv_init(rng, spec), rng), grad=True)
        x = Tensor(rng.standard_normal((2, 6, 6, 3)), requires_grad=True, name="x")
        block(f"mbconv_s{spec.stride}", lambda p=p, x=x, s=spec: L.mbconv_forward(x, s, p), p, x)

    att = L.AttentionSpec(8, 2)
    p = tensors(randomized(L.mhsa_init(rng, att), rng), grad=True)
    x = Tensor(rng.standard_normal((2, 4, 8)), requires_grad=True, name="x")
    block("mhsa", lambda p=p, x=x: L.mhsa(x, att, p), p, x)

    p = tensors(randomized(L.encoder_init(rng, att), rng), grad=True)
    x = Tensor(rng.standard_normal((2, 4, 8)), requires_grad=True, name="x")
    block("encoder", lambda p=p, x=x: L.transformer_encoder(x, att, p), p, x)

    shapes = {"gate.hidden.weight": (16, 6), "gate.hidden.bias": (6,), "gate.out.weight": (6, 8),
              "gate.out.bias": (8,)}
    p = {k: Tensor(rng.standard_normal(s) * 0.5, requires_grad=True, name=k) for k, s in shapes.items()}
    a = Tensor(rng.standard_normal((3, 8)), requires_grad=True, name="f_cnn")
    b = Tensor(rng.standard_normal((3, 8)), requires_grad=True, name="f_vit")
    w = rng.standard_normal((3, 8))
    cases.append(("aag_gate_fusion", [a, b, *p.values()], lambda: weighted_sum(aag_fuse(a, b, p)[0], w)))

    m = randomize_params(build_model(ModelConfig.scaled(0.125), seed=0, dtype=np.float64), seed=1)
    fused = Tensor(rng.standard_normal((4, m.config.fusion_dim)), requires_grad=True, name="fused")
    labels = rng.integers(0, 4, 4)
    head = [t for k, t in m.params.items() if k.startswith("head.")]
    cases.append(("head_with_dropout", [fused, *head], lambda: ops.sparse_softmax_cross_entropy(
        classifier_head(fused, m, training=True, rng=np.random.default_rng(7)), labels)))
    return cases


def test_gradient_fidelity():
    t0 = time.perf_counter()
    worst_layer, worst_name = 0.0, ""
    r = np.random.default_rng(11)
    for name, make in sorted(OP_CASES.items()):
        *ts, build = make(r)
        w = r.standard_normal(build().shape)
        err = max(check_gradients(lambda: weighted_sum(build(), w), ts).values())
        if err > worst_layer:
            worst_layer, worst_name = err, name
    x = rand(r, 4, 6, name="x")
    w = r.standard_normal((4, 6))
    err = max(check_gradients(lambda: weighted_sum(ops.dropout(x, 0.4, np.random.default_rng(9), True), w),
                              [x]).values())
    worst_layer, worst_name = max((worst_layer, worst_name), (err, "dropout"))
    logits, y = rand(r, 5, 4, name="logits"), r.integers(0, 4, 5)
    err = max(check_gradients(lambda: ops.sparse_softmax_cross_entropy(logits, y), [logits]).values())
    worst_layer, worst_name = max((worst_layer, worst_name), (err, "cross_entropy"))
    for name, ts, loss in layer_cases(r):
        err = max(check_gradients(loss, ts).values())
        worst_layer, worst_name = max((worst_layer, worst_name), (err, name))

    m = randomize_params(build_model(ModelConfig.scaled(0.125), seed=0, dtype=np.float64), seed=3, scale=0.4)
    xb = r.random((2, 16, 16, 3))
    lab = np.array([1, 3])
    errs = check_gradients(lambda: ops.sparse_softmax_cross_entropy(forward(m, xb).logits, lab),
                           list(m.params.values()), max_coords=32, seed=5)
    e2e = max(errs.values())
    elapsed = time.perf_counter() - t0
    ok = worst_layer < 1e-4 and e2e < 1e-3 and len(errs) == len(m.params) and elapsed < 300
    verdict("gradient fidelity", ok, f"layers max {worst_layer:.2e} [{worst_name}] < 1e-4, "
            f"end-to-end max {e2e:.2e} over {len(errs)} tensors < 1e-3, {elapsed:.0f}s < 300s")


# ------------------------------------------------------------ gate algebra


def test_gate_fusion_properties():
    rng = np.random.default_rng(21)
    shapes = {"gate.hidden.weight": (512, 256), "gate.hidden.bias": (256,),
              "gate.out.weight": (256, 256), "gate.out.bias": (256,)}
    p = {k: Tensor((rng.standard_normal(s) * 0.3).astype(np.float32)) for k, s in shapes.items()}
    a = Tensor(rng.standard_normal((1000, 256)).astype(np.float32) * 3)
    b = Tensor(rng.standard_normal((1000, 256)).astype(np.float32) * 3)
    fused, alpha = aag_fuse(a, b, p)
    open_unit = bool(((alpha.data > 0) & (alpha.data < 1)).all())
    lo, hi = np.minimum(a.data, b.data), np.maximum(a.data, b.data)
    inside = bool(((fused.data >= lo) & (fused.data <= hi)).all())
    z = {k: Tensor(np.zeros_like(t.data)) for k, t in p.items()}
    fz, az = aag_fuse(a, b, z)
    zero_ok = bool((az.data == 0.5).all()) and np.array_equal(fz.data, (a.data + b.data) / 2)
    verdict("gate/fusion properties", open_unit and inside and zero_ok,
            f"alpha in (0,1): {open_unit}, fused inside branch interval: {inside}, "
            f"zero gate gives exact average: {zero_ok}, 1000 samples")


# ------------------------------------------------------------------ shapes


def test_shape_conformance():
    trace = []
    out = forward(build_model(ModelConfig(), seed=0), np.random.default_rng(0).random((2, 128, 128, 3),
                                                                                      dtype=np.float32),
                  trace=trace)
    s = dict(trace)
    checks = {
        "stem": s["cnn.stem"] == (2, 64, 64, 32),
        "cnn pre-GAP": s["cnn.fire7"] == (2, 8, 8, 128),
        "vit pre-tokens": s["vit.mbconv3"] == (2, 8, 8, 96),
        "tokens": s["vit.token_proj"] == (2, 64, 160),
        "embeddings": out.f_cnn.shape == out.f_vit.shape == out.fused.shape == (2, 256),
        "logits": out.logits.shape == (2, 4),
    }
    bad = [k for k, v in checks.items() if not v]
    verdict("shape conformance", not bad, "all trace points match" if not bad else f"mismatch: {bad}")


# ----------------------------------------------------------------- overfit


@pytest.mark.slow
def test_overfit_sanity():
    accs, secs = [], []
    for seed in OVERFIT_SEEDS:
        acc, _, t = overfit_run(seed)
        accs.append(acc)
        secs.append(t)
    med, worst_t = statistics.median(accs), max(secs)
    verdict("overfit sanity", med >= 0.95 and worst_t < 600,
            f"median train acc {med:.3f} >= 0.95 over seeds {list(OVERFIT_SEEDS)} "
            f"(per seed {[round(a, 3) for a in accs]}), {OVERFIT_EPOCHS} epochs, slowest run {worst_t:.1f}s < 600s")


# ----------------------------------------------------------------- metrics


def test_metric_oracles():
    r = np.random.default_rng(31)
    worst = 0.0
    for i in range(100):
        n = int(r.integers(2, 60))
        s = r.random(n) if i % 2 else r.integers(0, 5, n) / 4
        pos = r.random(n) < 0.4
        pos[0], pos[1] = True, False
        worst = max(worst, abs(binary_auc(s, pos) - pair_count_auc(s, pos)))
    t, p = r.integers(0, 4, 300), r.integers(0, 4, 300)
    per, _, _ = prf1(confusion_matrix(t, p))
    prf_err = 0.0
    for c, m in enumerate(per):
        tp = sum(1 for a, b in zip(t, p) if a == c and b == c)
        pp = sum(1 for b in p if b == c)
        sup = sum(1 for a in t if a == c)
        pr, rc = tp / pp, tp / sup
        f1 = 2 * pr * rc / (pr + rc)
        prf_err = max(prf_err, abs(m.precision - pr), abs(m.recall - rc), abs(m.f1 - f1))
    uniform = binary_auc(np.full(50, 0.25), r.random(50) < 0.5)
    ok = worst <= 1e-12 and prf_err <= 1e-12 and uniform == 0.5
    verdict("metric oracles", ok, f"AUC vs Mann-Whitney max diff {worst:.1e} on 100 instances, "
            f"P/R/F1 vs brute force {prf_err:.1e}, uniform-score AUC {uniform}")


# --------------------------------------------------------- optimizer/callbacks


class _ScriptedVal:
    def __init__(self, accs):
        self.accs, self.states = accs, []

    def __call__(self, model, split, batch_size=64):
        self.states.append(model.state())
        return 1.0, self.accs[len(self.states) - 1]


def test_optimizer_and_callbacks(monkeypatch):
    x = Tensor(np.array([1.0]), requires_grad=True, name="x")
    st = AdamState(lr=0.1)
    seq = []
    for _ in range(5):
        with Tape() as tape:
            loss = ops.mul(ops.sum(ops.mul(x, x)), 0.5)
        adam_step({"x": x}, {"x": tape.backward(loss)[x]}, st)
        seq.append(float(x.data[0]))
    adam_err = float(np.max(np.abs(np.array(seq) - hand_adam(1.0, 0.1, 5))))

    cb, lr, lrs = ReduceLROnPlateau(), 1e-4, [1e-4]
    cb.update(0.5, lr)
    for _ in range(40):
        lr = cb.update(0.5, lr)
        if lr != lrs[-1]:
            lrs.append(lr)
    plateau_ok = lrs == [1e-4, 5e-5, 2.5e-5, 1.25e-5, 6.25e-6, 3.125e-6, 1.5625e-6, 1e-6]

    es = EarlyStopping()
    flags = [es.update(v) for v in [0.5, 0.7, 0.7, 0.6, 0.7, 0.65, 0.7, 0.7]]
    es_ok = flags == [False] * 7 + [True]

    script = _ScriptedVal([0.5, 0.7, 0.7, 0.6, 0.7, 0.65, 0.7, 0.7, 0.9, 0.9])
    monkeypatch.setattr(train_mod, "loss_and_accuracy", script)
    imgs, labels = synthetic_split([3] * 4, size=16, seed=0)
    split = DatasetSplit(imgs, labels, list("abcd"))
    m = build_model(ModelConfig.scaled(0.125), seed=0)
    log = fit(m, split, split, TrainConfig(epochs=10))
    restored = all(m.params[k].data.tobytes() == v.tobytes() for k, v in script.states[1].items())
    fit_ok = log.stopped_early and len(log) == 8 and log.best_epoch == 2 and restored

    ok = adam_err <= 1e-7 and plateau_ok and es_ok and fit_ok
    verdict("optimizer/callbacks", ok, f"Adam 5-step max err {adam_err:.1e} <= 1e-7, lr floor sequence "
            f"{'ok' if plateau_ok else lrs}, stop after 6 stagnant epochs {es_ok and len(log) == 8}, "
            f"best weights restored bitwise {restored}")


# -------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig.scaled(0.25)
    m = randomize_params(build_model(cfg, seed=1), seed=2, scale=0.3)
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt", cfg)
    x = np.random.default_rng(3).random((6, cfg.input_hw, cfg.input_hw, 3), dtype=np.float32)
    same = forward(m, x).logits.data.tobytes() == forward(back, x).logits.data.tobytes()
    imgs, labels = synthetic_split([2] * 4, size=cfg.input_hw, seed=4)
    split = DatasetSplit(imgs, labels, list("abcd"))
    same_eval = evaluate(m, split).to_json() == evaluate(back, split).to_json()
    verdict("checkpoint round-trip", same and same_eval,
            f"logits bit-identical {same}, evaluation report identical {same_eval}")


# --------------------------------------------------------------- param audit


def test_parameter_audit():
    tiny = ModelConfig(**TINY)
    tiny_ok = count_params(build_model(tiny)) == analytic_param_count(tiny) == sum(TINY_HAND.values())
    n = count_params(build_model(ModelConfig()))
    default_ok = n == analytic_param_count(ModelConfig()) == DEFAULT_HAND
    verdict("parameter audit", tiny_ok and default_ok,
            f"tiny {sum(TINY_HAND.values())} exact {tiny_ok}, default {n:,} exact {default_ok}; "
            f"~4.2M reference total is an informational comparison only (ratio {n / 4.2e6:.3f})")


# ---------------------------------------------------------- full reproduction


def test_full_reproduction():
    root = os.environ.get("AAGNET_FULL_DATA")
    if not root:
        ACCEPTANCE.append("NOT RUN  full reproduction (optional; set AAGNET_FULL_DATA to a dataset root "
                          "with Training/ and Testing/ splits)")
        pytest.skip("full dataset not available")
    full = __import__("aagnet.data", fromlist=["load_dataset"])
    train = full.load_dataset(root, "Training", 128)
    test = full.load_dataset(root, "Testing", 128)
    tr, va = full.holdout_split(train, 0.1, seed=0)
    m = build_model(ModelConfig(num_classes=len(train.class_names)), seed=0)
    fit(m, tr, va, TrainConfig(epochs=50, augment=full.AugmentConfig(seed=0)))
    rep = evaluate(m, test)
    verdict("full reproduction", rep.accuracy >= 0.95 and rep.macro_auc >= 0.99,
            f"test acc {rep.accuracy:.4f} >= 0.95, macro AUC {rep.macro_auc:.4f} >= 0.99")
