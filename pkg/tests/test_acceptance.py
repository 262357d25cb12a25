"""End-to-end gate: one test and one printed PASS/FAIL line per criterion."""
import json
import os
import time

import numpy as np
import pytest

from elsa.checkpoint import load_model
from elsa.cli import main
from elsa.compress import calibrate, dequantize, encode, prune, wanda_score
from elsa.elastic import ElasticAdapter, SupernetConfig, extract_subnet, heuristic_midpoint
from elsa.merge import build_mask, merge_model
from elsa.model import (
    AdaptedLinear,
    ModelDims,
    TinyTransformer,
    TrainConfig,
    evaluate,
    make_task,
    train_adapters,
)
from elsa.search import SearchConfig, brute_force_pareto, cached_evaluator, cost, evolve
from elsa.tensor import Tape, Tensor, backward, rng_stream
from elsa import tensor as tn

CHANCE = 1.0 / 64


def announce(capsys, num, label, ok, detail):
    with capsys.disabled():
        print(f"ACCEPTANCE {num} {label}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} {label}: {detail}"


def adapter_on(layer, rng, r, alpha):
    m, n = layer.W.data.shape
    layer.adapter = ElasticAdapter(
        Tensor(rng.normal(0, 0.2, (m, r)), requires_grad=True),
        Tensor(rng.normal(0, 0.2, (r, n)), requires_grad=True),
        alpha=alpha, rank_choices=(r,))
    return layer


def test_criterion_1_merge_equivalence(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    count = 0
    for i in range(60):
        rng = rng_stream(11, i)
        m, n = int(rng.integers(2, 65)), int(rng.integers(2, 65))
        r = int(rng.integers(1, min(m, n, 8) + 1))
        x = rng.normal(0, 1, (8, m))

        lay = adapter_on(AdaptedLinear(Tensor(rng.normal(0, 1, (m, n))), "v"),
                         rng, r, alpha=float(rng.uniform(0.5, 2.0)) * r)
        merged, rep = merge_model_single(lay, "vanilla", x)
        worst = max(worst, rep)
        count += 1

        lay = AdaptedLinear(Tensor(rng.normal(0, 1, (m, n))), "s")
        sw = prune(lay.W.data, np.abs(lay.W.data), 0.5)
        lay.W = Tensor(sw.Wp)
        lay.mask_arr = build_mask(sw)
        lay.sparsity_level = 0.5
        adapter_on(lay, rng, r, alpha=float(r))
        merged, rep = merge_model_single(lay, "sparsepeft", x)
        worst = max(worst, rep)
        count += 1
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and count >= 100 and dt < 10
    announce(capsys, 1, "merge equivalence", ok,
             f"max deviation {worst:.2e} over {count} instances in {dt:.1f}s")


def merge_model_single(lay, mode, x):
    from elsa.merge import merge_sparsepeft, merge_vanilla

    if mode == "vanilla":
        wm = merge_vanilla(lay)
        before = lay.forward(Tensor(x)).data
    else:
        wm = merge_sparsepeft(lay).Wp
        before = lay.forward(Tensor(x), mode="sparsepeft").data
    return wm, float(np.abs(before - x @ wm).max())


def shears_chain(dims, task, hp, seed, ranks, sparsity=0.5):
    """Prune a carrier, adapt it with masked adapters, train, merge."""
    model = TinyTransformer.build(dims, seed=seed)
    xs = task.train_inputs[:128]
    layers = [l for l in model.adapted_layers() if l.layer_id != "head"]
    model.start_capture({l.layer_id for l in layers})
    for s in range(0, len(xs), 64):
        model.forward(xs[s:s + 64])
    acts = model.stop_capture()
    for lay in layers:
        sw = prune(lay.W.data, wanda_score(lay.W.data, acts[lay.layer_id]), sparsity)
        lay.W.data = sw.Wp
        lay.mask_arr = build_mask(sw)
        lay.sparsity_level = sparsity
    cfg = SupernetConfig.build(dims, rank_choices=ranks)
    model.attach_adapters(cfg, seed=seed)
    model.adapter_mode = "sparsepeft"
    train_adapters(model, task, hp)
    return model


def test_criterion_2_sparsity_preserved(capsys):
    dims = ModelDims.uniform(vocab=32, d=16, heads=2, mlp=32, depth=2)
    task = make_task("modular_add", vocab=32, n_train=512, n_val=256, seed=0)
    model = shears_chain(dims, task, TrainConfig(steps=300, lr=3e-3, seed=1),
                         seed=1, ranks=(4, 8))
    adapted_ids = {l.layer_id for l in model.adapted_layers()
                   if l.adapter is not None and l.mask_arr is not None}
    pruned_patterns = {l.layer_id: set(zip(*np.nonzero(l.W.data)))
                       for l in model.adapted_layers()
                       if l.layer_id in adapted_ids}
    merged, _ = merge_model(model, "sparsepeft")
    subset_ok = True
    min_zero = 1.0
    checked = 0
    for lay in merged.adapted_layers():
        if lay.layer_id not in adapted_ids:
            continue
        got = set(zip(*np.nonzero(lay.W.data)))
        subset_ok &= got <= pruned_patterns[lay.layer_id]
        min_zero = min(min_zero, float(np.mean(lay.W.data == 0.0)))
        checked += 1
    ok = subset_ok and min_zero >= 0.5 and checked >= 8
    announce(capsys, 2, "sparsity preservation", ok,
             f"{checked} merged layers, pattern subset={subset_ok}, "
             f"min zero fraction {min_zero:.3f}")


def test_criterion_3_qa_sparsepeft(capsys):
    col = np.array([[-1.0], [0.0], [2.0]])
    hand = encode(col, calibrate(col, 4)).ravel().tolist() == [0, 5, 15]

    dims = ModelDims.uniform(vocab=32, d=16, heads=2, mlp=32, depth=2)
    task = make_task("modular_add", vocab=32, n_train=512, n_val=256, seed=0)
    model = TinyTransformer.build(dims, seed=1)
    for lay in model.adapted_layers():
        if lay.layer_id != "head":
            lay.qparams = calibrate(lay.W.data, 4)
    cfg = SupernetConfig.build(dims, rank_choices=(4,))
    model.attach_adapters(cfg, seed=1)
    model.adapter_mode = "qa"
    train_adapters(model, task, TrainConfig(steps=300, lr=3e-3, seed=1))

    merged, report = merge_model(model, "qa")
    codes_ok = True
    dev = 0.0
    for src, dst in zip(model.adapted_layers(), merged.adapted_layers()):
        if dst.qweights is None:
            continue
        codes = dst.qweights.codes
        codes_ok &= codes.min() >= 0 and codes.max() <= 15
        deq = dequantize(dst.qweights)
        for j in range(20):
            x = rng_stream(13, j).normal(0, 1, (4, src.W.data.shape[0]))
            qa_out = src.forward(Tensor(x), mode="qa").data
            dev = max(dev, float(np.abs(qa_out - x @ deq).max()))
    ok = hand and codes_ok and dev <= 1e-9 and report.max_deviation <= 1e-9
    announce(capsys, 3, "QA merge", ok,
             f"hand codes={hand}, codes in range={codes_ok}, "
             f"max forward deviation {dev:.2e}")


def numeric_grad(f, t, h=1e-5):
    g = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def test_criterion_4_gradients_and_frozen_base(capsys):
    rng = np.random.default_rng(0)
    p = lambda *s: Tensor(rng.normal(0, 1, s), requires_grad=True)
    a, b = p(3, 4), p(4, 2)
    c, d = p(3, 2), p(3, 2)
    e = p(2, 5)
    g = p(5)
    bias = p(5)
    logits = p(4, 6)
    labels = np.array([1, 5, -1, 2])
    table = p(7, 4)
    ids = np.array([[0, 3], [6, 1]])
    m = (rng.random((3, 2)) > 0.4).astype(float)
    w_soft = rng.normal(0, 1, (2, 5))
    w_ln = rng.normal(0, 1, (2, 5))
    w_rs = rng.normal(0, 1, (4, 3))
    w_tp = rng.normal(0, 1, (4, 3))

    cases = {
        "matmul": (lambda: tn.tsum(tn.matmul(a, b)), [a, b]),
        "add": (lambda: tn.tsum(tn.add(c, d)), [c, d]),
        "sub": (lambda: tn.tsum(tn.sub(c, d)), [c, d]),
        "mul": (lambda: tn.tsum(tn.mul(c, d)), [c, d]),
        "mask": (lambda: tn.tsum(tn.mask(c, m)), [c]),
        "scale": (lambda: tn.tsum(tn.scale(c, 1.7)), [c]),
        "softmax": (lambda: tn.tsum(tn.mul(tn.softmax(e), Tensor(w_soft))), [e]),
        "layer_norm": (lambda: tn.tsum(tn.mul(tn.layer_norm(e, g, bias),
                                              Tensor(w_ln))), [e, g, bias]),
        "gelu": (lambda: tn.tsum(tn.gelu(c)), [c]),
        "embedding": (lambda: tn.tsum(tn.embedding_lookup(ids, table)), [table]),
        "cross_entropy": (lambda: tn.cross_entropy(logits, labels), [logits]),
        "reshape": (lambda: tn.tsum(tn.mul(tn.reshape(a, (4, 3)),
                                           Tensor(w_rs))), [a]),
        "transpose": (lambda: tn.tsum(tn.mul(tn.transpose(a, (1, 0)),
                                             Tensor(w_tp))), [a]),
        "slice": (lambda: tn.tsum(tn.leading_slice(a, rows=2, cols=3)), [a]),
    }

    worst = 0.0
    for name, (build, params) in cases.items():
        for t in params:
            t.zero_grad()
        with Tape():
            backward(build())
        for t in params:
            num = numeric_grad(lambda: build().item(), t)
            denom = max(np.abs(num).max(), np.abs(t.grad).max(), 1e-8)
            worst = max(worst, float(np.abs(t.grad - num).max() / denom))
    grads_ok = worst <= 1e-4

    dims = ModelDims.uniform(vocab=32, d=16, heads=2, mlp=32, depth=2)
    task = make_task("modular_add", vocab=32, n_train=512, n_val=256, seed=0)
    model = TinyTransformer.build(dims, seed=1)
    model.attach_adapters(SupernetConfig.build(dims, rank_choices=(4, 8)), seed=1)
    before = {k: t.data.tobytes() for k, t in model.frozen_tensors().items()}
    train_adapters(model, task, TrainConfig(steps=200, lr=3e-3, seed=1))
    frozen_ok = all(model.frozen_tensors()[k].data.tobytes() == v
                    for k, v in before.items())
    ok = grads_ok and frozen_ok
    announce(capsys, 4, "gradient correctness", ok,
             f"{len(cases)} ops, worst rel err {worst:.2e}, "
             f"frozen base bit-identical after 200 steps={frozen_ok}")


def test_criterion_5_search_oracle(capsys):
    t0 = time.perf_counter()
    dims = ModelDims.uniform(vocab=32, d=16, heads=2, mlp=32, depth=1)
    task = make_task("modular_add", vocab=32, n_train=512, n_val=256, seed=0)
    model = TinyTransformer.build(dims, seed=1)
    cfg = SupernetConfig.build(dims, targets=("q", "v"), rank_choices=(2, 4, 8),
                               mode="B", head_choices=(1, 2),
                               mlp_width_choices=(16, 32))
    model.attach_adapters(cfg, seed=1)
    train_adapters(model, task, TrainConfig(steps=800, lr=3e-3, seed=1))

    def evaluator(genome):
        res = evaluate(model, task.val_inputs, task.val_targets, active=genome,
                       batch_size=256)
        c = cost(model, active=genome)
        return {"accuracy": res["accuracy"], "macs": c["macs"],
                "params": c["params"]}

    evaluator = cached_evaluator(evaluator)
    space = cfg.space_size()
    truth = brute_force_pareto(cfg, evaluator)
    matches = []
    for seed in range(5):
        archive = evolve(cfg, evaluator, SearchConfig(pop_size=12, generations=8,
                                                      seed=seed))
        matches.append({ind.genome for ind in archive.front()} == truth)
    dt = time.perf_counter() - t0
    ok = space == 36 and all(matches) and dt < 120
    announce(capsys, 5, "NSGA-II vs brute force", ok,
             f"space={space}, front match on seeds 0-4 = {matches}, {dt:.1f}s")


def test_criterion_6_extraction_faithful(capsys):
    dims = ModelDims.uniform(vocab=32, d=16, heads=2, mlp=32, depth=2)
    model = TinyTransformer.build(dims, seed=1)
    cfg = SupernetConfig.build(dims, rank_choices=(2, 4), mode="B",
                               head_choices=(1, 2), mlp_width_choices=(16, 32))
    model.attach_adapters(cfg, seed=1)
    for t in model.adapter_tensors().values():
        t.data = rng_stream(7, 4).normal(0, 0.2, t.data.shape)

    from elsa.elastic import sample_genome

    worst = 0.0
    for i in range(10):
        genome = sample_genome(cfg, rng_stream(7, 2, i))
        child = extract_subnet(model, genome)
        for j in range(100):
            toks = rng_stream(7, 1, i, j).integers(0, 32, (4, 6))
            a = model.forward(toks, genome).data
            b = child.forward(toks).data
            worst = max(worst, float(np.abs(a - b).max()))
    ok = worst <= 1e-12
    announce(capsys, 6, "extraction faithfulness", ok,
             f"max logit deviation {worst:.2e} over 10 genomes x 100 batches")


def test_criterion_7_shears_analogue(capsys):
    t0 = time.perf_counter()
    dims = ModelDims.uniform(vocab=64, d=32, heads=4, mlp=128, depth=2)
    task = make_task("modular_add", vocab=64, seed=0)
    targets = ("q", "v", "up", "down", "head")
    hp = TrainConfig(steps=6000, lr=3e-3, batch_size=64, seed=1)

    model = TinyTransformer.build(dims, seed=1)
    model.attach_adapters(SupernetConfig.build(dims, targets=targets,
                                               rank_choices=(16,), alpha=32.0),
                          seed=1)
    train_adapters(model, task, hp)
    dense, _ = merge_model(model, "vanilla")
    acc_dense = evaluate(dense, task.val_inputs, task.val_targets)["accuracy"]

    xs = task.train_inputs[:128]
    layers = [l for l in dense.adapted_layers() if l.layer_id != "head"]
    dense.start_capture({l.layer_id for l in layers})
    for s in range(0, len(xs), 64):
        dense.forward(xs[s:s + 64])
    acts = dense.stop_capture()
    for lay in layers:
        sw = prune(lay.W.data, wanda_score(lay.W.data, acts[lay.layer_id]), 0.5)
        lay.W.data = sw.Wp
        lay.mask_arr = build_mask(sw)
        lay.sparsity_level = 0.5
    acc_pruned = evaluate(dense, task.val_inputs, task.val_targets)["accuracy"]

    nls = SupernetConfig.build(dims, targets=targets, rank_choices=(8, 16),
                               alpha=32.0)
    dense.attach_adapters(nls, seed=1)
    dense.adapter_mode = "sparsepeft"
    train_adapters(dense, task, hp)
    gmax = tuple(len(d.choices) - 1 for d in nls.dims)
    acc_rec = evaluate(dense, task.val_inputs, task.val_targets,
                       active=gmax)["accuracy"]
    dt = time.perf_counter() - t0

    a = acc_dense >= 3 * CHANCE
    b = acc_pruned <= 0.8 * acc_dense
    c = acc_rec >= 0.9 * acc_dense
    ok = a and b and c and dt < 600
    announce(capsys, 7, "Shears-style chain", ok,
             f"dense {acc_dense:.4f} ({acc_dense / CHANCE:.1f}x chance), "
             f"pruned {acc_pruned:.4f} ({100 * acc_pruned / acc_dense:.0f}% rel), "
             f"recovered {acc_rec:.4f} ({100 * acc_rec / acc_dense:.0f}% rel), "
             f"{dt:.0f}s")


def midpoint_closed_form(t=8):
    """Hand-derived params/MACs for the criterion-8 supernet genomes."""

    def lin(m, n, r):
        return m * n + r * (m + n)

    def block(d_att, mlp, r):
        params = (lin(32, d_att, r) + 32 * d_att + lin(32, d_att, r)
                  + d_att * 32 + lin(32, mlp, r) + lin(mlp, 32, r))
        return params

    out = {}
    for name, (d_att, mlp, r) in {"mid": (16, 64, 8), "max": (32, 128, 16)}.items():
        params = 2 * block(d_att, mlp, r) + lin(32, 64, r)
        macs = t * params + 2 * t * t * d_att
        out[name] = {"params": params, "macs": macs}
    return out


def test_criterion_8_lonas_analogue(capsys):
    t0 = time.perf_counter()
    dims = ModelDims.uniform(vocab=64, d=32, heads=4, mlp=128, depth=2)
    task = make_task("modular_add", vocab=64, seed=0)
    model = TinyTransformer.build(dims, seed=1)
    cfg = SupernetConfig.build(dims, targets=("q", "v", "up", "down", "head"),
                               rank_choices=(8, 16), alpha=32.0, mode="B",
                               head_choices=(2, 4), mlp_width_choices=(64, 128))
    model.attach_adapters(cfg, seed=1)
    train_adapters(model, task, TrainConfig(steps=20000, lr=3e-3, batch_size=64,
                                            seed=1, warmup_max_steps=4000))

    gmax = tuple(len(d.choices) - 1 for d in cfg.dims)
    gmid = heuristic_midpoint(cfg)
    acc_max = evaluate(model, task.val_inputs, task.val_targets,
                       active=gmax)["accuracy"]
    acc_mid = evaluate(model, task.val_inputs, task.val_targets,
                       active=gmid)["accuracy"]
    c_max = cost(model, active=gmax)
    c_mid = cost(model, active=gmid)
    closed = midpoint_closed_form()
    dt = time.perf_counter() - t0

    fewer = c_mid["params"] < c_max["params"] and c_mid["macs"] < c_max["macs"]
    forms = c_mid == closed["mid"] and c_max == closed["max"]
    rel = acc_mid / acc_max if acc_max else 0.0
    ok = fewer and forms and rel >= 0.95
    announce(capsys, 8, "LoNAS-style midpoint", ok,
             f"params {c_mid['params']}/{c_max['params']}, "
             f"macs {c_mid['macs']}/{c_max['macs']}, closed form match={forms}, "
             f"acc {acc_mid:.4f}/{acc_max:.4f} = {100 * rel:.1f}% rel, {dt:.0f}s")


PIPE_CFG = {
    "seed": 3,
    "model": {"vocab": 32, "d": 16, "heads": 2, "mlp": 32, "depth": 1,
              "max_seq": 8},
    "task": {"kind": "modular_add", "seq_len": 4, "n_train": 256, "n_val": 128},
    "supernet": {"mode": "lonas", "rank_choices": [2, 4]},
    "train": {"steps": 60, "batch_size": 16},
    "compress": {"calib_sequences": 32},
    "search": {"pop_size": 8, "generations": 3, "workers": 3},
    "eval": {"batch_size": 64},
}


def run_pipeline(root):
    d = root
    d.mkdir(parents=True, exist_ok=True)
    (d / "cfg.json").write_text(json.dumps(PIPE_CFG))
    cwd = os.getcwd()
    os.chdir(d)
    try:
        steps = [
            ["train", "--config", "cfg.json", "--out", "t"],
            ["prune", "--config", "cfg.json", "--checkpoint", "t/model.ckpt",
             "--out", "p"],
            ["search", "--config", "cfg.json", "--checkpoint", "t/model.ckpt",
             "--out", "s"],
            ["merge", "--config", "cfg.json", "--checkpoint", "t/model.ckpt",
             "--out", "m"],
            ["eval", "--config", "cfg.json", "--checkpoint", "m/model.ckpt",
             "--out", "e"],
        ]
        for argv in steps:
            code = main(argv)
            assert code == 0, f"{argv} exited {code}"
    finally:
        os.chdir(cwd)
    artifacts = {}
    for rel in ("t/model.ckpt", "p/model.ckpt", "s/model.ckpt", "m/model.ckpt",
                "s/generations.csv", "s/pareto.csv", "s/pareto.svg",
                "e/efficiency.md"):
        artifacts[rel] = (d / rel).read_bytes()
    for rel in ("t/report.json", "p/report.json", "s/report.json",
                "m/report.json", "e/report.json"):
        rep = json.loads((d / rel).read_text())
        rep.pop("timestamp")
        artifacts[rel] = json.dumps(rep, sort_keys=True)
    return artifacts


def test_criterion_9_determinism(capsys, tmp_path):
    a = run_pipeline(tmp_path / "a")
    b = run_pipeline(tmp_path / "b")
    diffs = [k for k in a if a[k] != b[k]]
    ok = not diffs and set(a) == set(b)
    announce(capsys, 9, "byte-identical reruns", ok,
             f"{len(a)} artifacts compared across two runs "
             f"(parallel search workers=3); mismatches: {diffs or 'none'}")
