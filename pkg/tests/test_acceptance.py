"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL: ...`` line (visible
even under output capture) and then asserts. The learning criteria train
real models on one CPU core and take several minutes in total.
"""
import json
import time

import numpy as np
import pytest

from ecgnn import numkit as nk
from ecgnn.cli import main
from ecgnn.crossmodal import cam
from ecgnn.data import Sample
from ecgnn.datagen import (Sizes, gen_choice_task, gen_count_task, gen_word_task, generate, load_dataset,
                           save_dataset)
from ecgnn.graph import GraphLayerParams, graph_reason
from ecgnn.pipeline import (Model, ModelConfig, TrainConfig, evaluate, fit, forward, make_optimizer, primary_metric,
                            train_epoch)
from ecgnn.probe import record_distributions
from ecgnn.tensorfile import (DimOverflowError, TensorFormatError, TruncatedTensorError, decode_checkpoint,
                              decode_tensor, encode_checkpoint, encode_tensor, read_tensor, write_tensor)
from test_datagen import tree_digest

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
    assert ok, detail


def train_until(model, train, test, lr, *, max_epochs=30, done=None, budget_s=None, seed=0):
    """Train epoch by epoch; return per-epoch test metrics, stopping once ``done(metric)`` holds."""
    opt = make_optimizer(model, TrainConfig(lr=lr, seed=seed))
    start, metrics = time.perf_counter(), []
    for epoch in range(1, max_epochs + 1):
        train_epoch(train, model, opt, epoch=epoch, seed=seed)
        metrics.append(primary_metric(evaluate(test, model), model.config.task))
        if done is not None and done(metrics[-1]):
            break
        if budget_s is not None and time.perf_counter() - start > budget_s:
            break
    return metrics, time.perf_counter() - start


# ---------------------------------------------------------------------------


def test_1_gradient_correctness(capsys):
    start = time.perf_counter()
    code = main(["gradcheck", "--full", "--seed", "0"])
    elapsed = time.perf_counter() - start
    lines = capsys.readouterr().out.splitlines()
    ops = [l for l in lines if l.startswith("op=")]
    model_line = next(l for l in lines if l.startswith("model max_rel_error"))
    worst_op = max(float(l.split("max_rel_error=")[1].split()[0]) for l in ops)
    ok = code == 0 and elapsed <= 120 and len(ops) >= 20
    report(capsys, 1, ok, f"{len(ops)} primitives, worst op rel err {worst_op:.2e} (tol 1e-6); "
                          f"{model_line.split()[1]} over 20 params (tol 1e-3); {elapsed:.1f}s (limit 120s)")


def test_2_simplex_invariants(capsys):
    sizes = Sizes((1, 5), (1, 6), (1, 5))
    ablations = [(), ("cmr",), ("mmf",), ("cap",), ("vid",)]
    checked, worst, neg = 0, 0.0, 0
    kinds = set()
    for i in range(1000):
        r = np.random.default_rng(i)
        task = ("word", "count", "choice")[i % 3]
        sz = Sizes((1, 5), (10, 12), (1, 5)) if task == "count" else sizes
        ds = generate(task, i, 1, sz, dim=6)
        cfg = ModelConfig(task=ds.task, d=int(r.choice([4, 8])), d_c=6, d_v=6, d_q=6,
                          n_steps=int(r.integers(1, 4)), ablate=ablations[i % 5], seed=i)
        with record_distributions() as sink:
            forward(ds[0], Model(cfg))
        for kind, w in sink:
            kinds.add(kind)
            rows = w.reshape(-1, w.shape[-1])
            worst = max(worst, float(np.max(np.abs(rows.sum(axis=1) - 1.0))))
            neg += int(np.sum(rows < 0))
            checked += len(rows)
    ok = worst <= 1e-9 and neg == 0 and kinds == {"adjacency", "cam", "temporal", "alpha"}
    report(capsys, 2, ok, f"{checked} distributions from 1000 forwards ({sorted(kinds)}); "
                          f"max |sum-1| {worst:.1e}, negative entries {neg}")


def test_3_permutation_properties(capsys):
    worst_eq, worst_inv = 0.0, 0.0
    for trial in range(1000):
        r = np.random.default_rng(10_000 + trial)
        p = GraphLayerParams.init("g", 8, r)
        p.b_phi.data = 0.3 * r.standard_normal(8)
        X = r.standard_normal((6, 8))
        perm = r.permutation(6)
        worst_eq = max(worst_eq, float(np.max(np.abs(graph_reason(X[perm], p).data - graph_reason(X, p).data[perm]))))
        Q, K, V = r.standard_normal((4, 8)), r.standard_normal((6, 8)), r.standard_normal((6, 8))
        a = cam(Q, K, V).attended.data
        b = cam(Q, K[perm], V[perm]).attended.data
        worst_inv = max(worst_inv, float(np.max(np.abs(a - b))))
    ok = worst_eq <= 1e-9 and worst_inv <= 1e-9
    report(capsys, 3, ok, f"1000 trials on 6 nodes: graph equivariance max err {worst_eq:.1e}, "
                          f"attention key/value invariance max err {worst_inv:.1e} (tol 1e-9)")


def test_4_shape_contract(capsys):
    cfg = ModelConfig.reference(task="word", vocab_size=1000)
    model = Model(cfg)
    r = np.random.default_rng(0)
    s = Sample(2, appearance=r.standard_normal((6, 2048)), motion=r.standard_normal((6, 4096)),
               caption_tokens=[[1, 2, 3], [4, 5], [6, 7, 8, 9]], question_tokens=[10, 11, 12, 13])
    res = forward(s, model)
    width = res.reps[0].shape[0]
    ok = width == 1536 and np.all(np.isfinite(res.reps[0].data)) and len(res.traces[0].alpha) == 3
    report(capsys, 4, ok, f"d=512, d_a=2048, d_m=4096, d_v=4096, d_q=300, 3 steps, 3 layers: s_a width {width} "
                          f"(expected 1536), {model.n_scalars():,} parameters")


def test_5_word_learning(capsys):
    ds = gen_word_task(2024, 2048, n_test=512)
    train, test = ds.split("train").samples, ds.split("test")
    full, t_full = train_until(Model(ModelConfig(task="word", seed=0)), train, test, 1e-4,
                               done=lambda a: a >= 0.90, budget_s=600)
    cap, _ = train_until(Model(ModelConfig(task="word", ablate=("cap",), seed=0)), train, test, 1e-4,
                         max_epochs=len(full))
    ok = full[-1] >= 0.90 and t_full <= 600 and max(cap) <= 0.35
    report(capsys, 5, ok, f"full model {full[-1]:.3f} after {len(full)} epochs ({t_full:.0f}s, lr 1e-4); "
                          f"caption-ablated model max {max(cap):.3f} over the same epochs (limit 0.35)")


def test_6_count_learning(capsys):
    ds = gen_count_task(2025, 1024, n_test=512)
    train, test = ds.split("train").samples, ds.split("test")
    mean = float(np.mean([s.answer for s in train]))
    baseline = float(np.mean([(s.answer - mean) ** 2 for s in test]))
    mse, t = train_until(Model(ModelConfig(task="number", seed=0)), train, test, 1e-3,
                         done=lambda m: m <= 0.5 * baseline)
    ok = mse[-1] <= 0.5 * baseline
    report(capsys, 6, ok, f"test MSE {mse[-1]:.3f} after {len(mse)} epochs ({t:.0f}s, lr 1e-3) vs constant-mean "
                          f"MSE {baseline:.3f} (ratio {mse[-1] / baseline:.3f}, limit 0.5)")


def test_7_choice_learning(capsys):
    ds = gen_choice_task(2026, 1024, n_test=512)
    train, test = ds.split("train").samples, ds.split("test")
    acc, t = train_until(Model(ModelConfig(task="choice", seed=0)), train, test, 1e-3, done=lambda a: a >= 0.80)
    shuffled_answers = np.random.default_rng(7).permutation([s.answer for s in train])
    shuffled = [Sample(int(a), caption=s.caption, video=s.video, question=s.question, candidates=s.candidates)
                for s, a in zip(train, shuffled_answers)]
    ctrl, _ = train_until(Model(ModelConfig(task="choice", seed=0)), shuffled, test, 1e-3, max_epochs=len(acc))
    ok = acc[-1] >= 0.80 and abs(ctrl[-1] - 0.20) <= 0.06
    report(capsys, 7, ok, f"K=5: full model {acc[-1]:.3f} after {len(acc)} epochs ({t:.0f}s, lr 1e-3); "
                          f"label-shuffled control {ctrl[-1]:.3f} (target 0.20 +- 0.06)")


def test_8_ablation_ordering(capsys):
    """Each run keeps the epoch with the best validation accuracy and reports test accuracy there."""
    rows, ok = [], True
    for seed in range(3):
        ds = gen_word_task(100 + seed, 1024, n_test=256)
        val = gen_word_task(200 + seed, 256)
        train, test = ds.split("train").samples, ds.split("test")
        accs = {}
        for name, ablate in (("full", ()), ("no-cmr", ("cmr",)), ("no-cap", ("cap",))):
            model = Model(ModelConfig(task="word", ablate=ablate, seed=seed))
            opt = make_optimizer(model, TrainConfig(lr=3e-3, seed=seed))
            best_val, best_test = -1.0, None
            for epoch in range(1, 6):
                train_epoch(train, model, opt, epoch=epoch, seed=seed)
                v = evaluate(val, model)["accuracy"]
                if v > best_val:
                    best_val, best_test = v, evaluate(test, model)["accuracy"]
            accs[name] = best_test
        good = accs["full"] >= accs["no-cmr"] >= accs["no-cap"] and accs["full"] - accs["no-cap"] >= 0.3
        ok &= good
        rows.append(f"seed {seed}: full {accs['full']:.3f} >= no-cmr {accs['no-cmr']:.3f} >= "
                    f"no-cap {accs['no-cap']:.3f} {'ok' if good else 'violated'}")
    report(capsys, 8, ok, "; ".join(rows))


def test_9_determinism(capsys, tmp_path):
    ds = gen_word_task(5, 48, Sizes((2, 4), (3, 6), (2, 4)), dim=8, n_test=8)
    tc = TrainConfig(lr=3e-3, batch_size=16, epochs=2, seed=4)
    traces = []
    for _ in range(2):
        logs = fit(Model(ModelConfig(task="word", d=8, d_c=8, d_v=8, d_q=8, seed=4)), ds.split("train").samples, tc)
        traces.append(np.array([b for l in logs for b in l.batch_losses]))
    loss_diff = float(np.max(np.abs(traces[0] - traces[1])))
    same = []
    for task in ("word", "count", "choice"):
        a, b = tmp_path / f"{task}a", tmp_path / f"{task}b"
        for out in (a, b):
            main(["gen", "--task", task, "--seed", "9", "--out", str(out), "--samples", "24", "--test-samples", "8",
                  "--dim", "8", "--sizes", "2-3,10-12,2-3"])
        same.append(tree_digest(a) == tree_digest(b))
    for tag in ("x", "y"):
        main(["train", "--data", str(tmp_path / "worda"), "--ckpt-out", str(tmp_path / f"{tag}.ckpt"), "--epochs", "2",
              "--d", "8", "--batch-size", "8", "--lr", "3e-3", "--seed", "1"])
        main(["dump-attention", "--data", str(tmp_path / "worda"), "--ckpt", str(tmp_path / f"{tag}.ckpt"),
              "--sample", "2", "--out", str(tmp_path / f"{tag}.json")])
    capsys.readouterr()
    ckpt_same = (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
    dump_same = (tmp_path / "x.json").read_bytes() == (tmp_path / "y.json").read_bytes()
    ok = loss_diff <= 1e-12 and all(same) and ckpt_same and dump_same
    report(capsys, 9, ok, f"loss trace max diff {loss_diff:.1e} over {len(traces[0])} batches; datasets identical "
                          f"{same}; checkpoints identical {ckpt_same}; attention dumps identical {dump_same}")


def test_10_format_round_trips(capsys, tmp_path):
    r = np.random.default_rng(0)
    x = r.standard_normal((8, 16))
    write_tensor(tmp_path / "t.ecgf", x)
    size = (tmp_path / "t.ecgf").stat().st_size
    rel = float(np.max(np.abs(read_tensor(tmp_path / "t.ecgf") - x) / np.abs(x)))
    blob = encode_tensor(x)
    errors = {}
    for label, bad, exc in [("magic", b"ECGX" + blob[4:], TensorFormatError),
                            ("truncation", blob[:-5], TruncatedTensorError),
                            ("dim overflow", blob[:8] + b"\x03\0\0\0" + b"\xff" * 8 + b"\x10\0\0\0",
                             DimOverflowError)]:
        try:
            decode_tensor(bad)
            errors[label] = "accepted"
        except TensorFormatError as e:
            errors[label] = type(e).__name__ if type(e) is exc else f"wrong {type(e).__name__}"
    model = Model(ModelConfig(task="choice", d=8, d_c=8, d_v=8, d_q=8, seed=3))
    model.save(tmp_path / "m.ckpt")
    back = Model.load(tmp_path / "m.ckpt")
    a, b = model.state_dict(), back.state_dict()
    ckpt_exact = back.config == model.config and all(a[k].tobytes() == b[k].tobytes() for k in a)
    try:
        decode_checkpoint((tmp_path / "m.ckpt").read_bytes()[:-9])
        ckpt_trunc = "accepted"
    except TruncatedTensorError:
        ckpt_trunc = "TruncatedTensorError"
    ds = gen_choice_task(1, 6, dim=8)
    loaded = load_dataset(save_dataset(ds, tmp_path / "d"))
    data_exact = all(np.array_equal(s.candidates, t.candidates) and np.array_equal(s.video, t.video)
                     for s, t in zip(ds, loaded))
    distinct = len(set(errors.values())) == 3 and not any(v.startswith(("wrong", "accepted")) for v in errors.values())
    ok = size == 532 and rel <= 2 ** -20 and distinct and ckpt_exact and ckpt_trunc != "accepted" and data_exact
    report(capsys, 10, ok, f"8x16 file {size} bytes; float32 round-trip rel err {rel:.1e} (limit {2 ** -20:.1e}); "
                           f"rejections {errors}; checkpoint bit-exact {ckpt_exact}, truncated -> {ckpt_trunc}; "
                           f"dataset round-trip exact {data_exact}")


def test_11_overfit_one_sample(capsys):
    results, ok = [], True
    for task in ("word", "count", "choice"):
        ds = generate(task, 0, 1)
        model = Model(ModelConfig(task=ds.task, seed=0))
        opt = make_optimizer(model, TrainConfig(lr=1e-3))
        for step in range(1, 201):
            loss = train_epoch(ds.samples, model, opt, epoch=step).loss
            if loss < 0.01:
                break
        ok &= loss < 0.01
        results.append(f"{ds.task} loss {loss:.2e} at step {step}")
    report(capsys, 11, ok, "; ".join(results) + " (limit 0.01 within 200 steps, lr 1e-3)")
