"""Acceptance criteria 1-8, one pass/fail line each (see the terminal summary)."""
import json
import time

import numpy as np
import pytest

import oracles
from resourcenet import checkpoint
from resourcenet.attention import (AttnParams, attend, attend_backward, attend_forward, keys_backward,
                                   precompute_keys)
from resourcenet.baselines import fit_elementwise, sum_model, training_pairs
from resourcenet.cli import run
from resourcenet.data import (CPI, ContentionConfig, build_dataset, cosimulate, gen_workload, load_manifest,
                              load_trace_csv, make_triplet, random_specs, save_trace_csv, specs_to_json,
                              write_dataset)
from resourcenet.evaluation import bin_errors, experiment1, sweep_length_multiplier
from resourcenet.features import METRICS, Normalizer, make_example, stack_inputs
from resourcenet.model import ModelConfig, ResourceNet, train
from resourcenet.numerics import ParamStore, finite_diff_check
from resourcenet.recurrent import (GruParams, gru_step, gru_step_backward, gru_step_forward, gru_unroll,
                                   gru_unroll_backward, gru_unroll_forward)

BINS = ("(1x,2x]", "(2x,3x]", "(3x,4x]")


def max_abs(a, b):
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


# -- 1: equation fidelity -------------------------------------------------


def test_criterion_1_equation_fidelity(report_criterion):
    t0 = time.perf_counter()
    errs = {}
    rng = np.random.default_rng(0)

    # GRU: hand-evaluated scalar cases plus a random cell against the scalar oracle
    zero = GruParams.zeros(1, 1)
    errs["gru zero params"] = max_abs(gru_step([0.0], [1.0], zero), [0.5])
    errs["gru unroll"] = max_abs(gru_unroll(np.zeros((3, 1)), zero, s0=np.ones(1))[:, 0], [0.5, 0.25, 0.125])
    p = GruParams(*(rng.normal(size=s) for s in [(3, 4), (3, 3)] * 3 + [(3,)] * 3))
    x, s = rng.normal(size=4), rng.normal(size=3)
    errs["gru random"] = max_abs(gru_step(x, s, p), oracles.gru(x.tolist(), s.tolist(), oracles.tolist(p)))

    # attention: constructed energies ln(0.3), ln(0.7) plus a random case
    target = np.array([0.3, 0.7])
    ap = AttnParams(np.log(target) / np.tanh(1.0), np.eye(2), np.zeros((2, 1)), np.zeros(2))
    errs["attend constructed"] = max_abs(attend(np.eye(2), np.zeros(1), ap).context, target)
    ap = AttnParams(rng.normal(size=5), rng.normal(size=(5, 4)), rng.normal(size=(5, 3)), rng.normal(size=5))
    E, s = rng.normal(size=(4, 6)), rng.normal(size=3)
    step = attend(E, s, ap)
    mu, alpha, c = oracles.attention(E.tolist(), s.tolist(), oracles.tolist(ap))
    errs["attend random"] = max(max_abs(step.energies, mu), max_abs(step.weights, alpha),
                                max_abs(step.context, c))
    errs["attend cached keys"] = max_abs(attend(E, s, ap, precompute_keys(E, ap)).context, step.context)

    # decoder: two hand-chained steps of a scalar model
    m = ResourceNet(ModelConfig(input_dim=1, output_dim=1, enc_hidden=1, dec_hidden=1, seed=3))
    for v in m.params.values.values():
        v[...] = rng.normal(scale=0.8, size=v.shape)
    E, s_n = m.encode(rng.uniform(size=(3, 1)))
    W_out, b_out = m.params["out.W"].tolist(), m.params["out.b"].tolist()
    dec, attn = oracles.tolist(m.dec), oracles.tolist(m.attn)
    y_o, s_o, y_n = [0.0], s_n.tolist(), np.zeros(1)
    worst = 0.0
    for _ in range(2):
        y_o, s_o = oracles.decode_step(y_o, s_o, E.tolist(), dec, attn, W_out, b_out)
        y_n, s_n = m.decode_step(y_n, s_n, E)
        worst = max(worst, max_abs(y_n, y_o), max_abs(s_n, s_o))
    errs["decode chain"] = worst

    elapsed = time.perf_counter() - t0
    err = max(errs.values())
    ok = err <= 1e-12 and elapsed < 1.0
    report_criterion(1, "equation fidelity", ok, f"max abs error {err:.1e} over {len(errs)} cases, {elapsed:.2f}s")
    assert ok, errs


# -- 2: gradient suite ----------------------------------------------------


def _grad_gru_step(rng):
    store = ParamStore()
    p = GruParams.init(store, "c", 2, 3, rng)
    g = GruParams.grads_from_store(store, "c")
    x, s_prev, w = rng.normal(size=2), rng.normal(size=3), rng.normal(size=3)

    def fwd():
        s, cache = gru_step_forward(x, s_prev, p)
        gru_step_backward(w, cache, p, g)
        return float(w @ s)

    return finite_diff_check(fwd, store)


def _grad_unroll(rng):
    store = ParamStore()
    p = GruParams.init(store, "c", 3, 4, rng)
    g = GruParams.grads_from_store(store, "c")
    xs, W = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))

    def fwd():
        states, cache = gru_unroll_forward(xs, p)
        gru_unroll_backward(W, cache, p, g)
        return float(np.sum(W * states))

    return finite_diff_check(fwd, store)


def _grad_attention(rng):
    store = ParamStore()
    p = AttnParams.init(store, "a", 4, 3, 5, rng)
    store.add("E", rng.normal(size=(4, 6)))
    store.add("s", rng.normal(size=3))
    g = AttnParams.grads_from_store(store, "a")
    w = rng.normal(size=4)

    def fwd():
        E, s = store["E"], store["s"]
        K = precompute_keys(E, p)
        step, cache = attend_forward(E, s, p, K)
        dK = np.zeros_like(K)
        store.grads["s"] += attend_backward(w, cache, p, g, store.grads["E"], dK)
        keys_backward(dK, E, p, g, store.grads["E"])
        return float(w @ step.context)

    return finite_diff_check(fwd, store)


def _grad_model(rng, seed):
    m = ResourceNet(ModelConfig(enc_hidden=3, dec_hidden=3, seed=seed))
    inputs = rng.uniform(0, 1, (4, m.config.input_dim))
    target = rng.uniform(0, 1, (5, m.config.output_dim))
    return finite_diff_check(lambda: m.loss_and_grad(inputs, target), m.params, h=1e-4)


def test_criterion_2_gradient_suite(report_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    errs = {"gru step": _grad_gru_step(rng), "2-step unroll": _grad_unroll(rng),
            "attention": _grad_attention(rng)}
    for seed in (0, 1, 2):
        errs[f"full model seed {seed}"] = _grad_model(np.random.default_rng(seed), seed)
    elapsed = time.perf_counter() - t0
    err = max(errs.values())
    ok = err <= 1e-4 and elapsed < 30.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    report_criterion(2, "gradient suite", ok, f"{detail}; {elapsed:.1f}s")
    assert ok, errs


# -- 3: overfit oracle ----------------------------------------------------


def test_criterion_3_overfit(report_criterion):
    t0 = time.perf_counter()
    traces = [gen_workload(s) for s in random_specs(4, seed=0)]
    triplets = [make_triplet("w0", traces[0], "w1", traces[1], 0.0),
                make_triplet("w2", traces[2], "w3", traces[3], 0.25),
                make_triplet("w0", traces[0], "w2", traces[2], 0.5),
                make_triplet("w1", traces[1], "w3", traces[3], 0.75)]
    norm = Normalizer.fit([x for t in triplets for x in (t.a, t.b, t.colocated)])
    examples = [make_example(t, norm) for t in triplets]
    model = ResourceNet(ModelConfig(seed=0))
    state = {}

    def check(epoch, loss):
        if epoch % 250:
            return False
        worst = max(v[0] for v in experiment1(examples, norm, resourcenet=model).table["resourcenet"].values())
        state.update(epoch=epoch, loss=loss, worst=worst)
        return loss < 1e-3 and worst < 5.0

    train(model, examples, 5000, seed=0, callback=check)
    elapsed = time.perf_counter() - t0
    ok = state["loss"] < 1e-3 and state["worst"] < 5.0 and elapsed < 600
    report_criterion(3, "overfit oracle", ok, f"epoch {state['epoch']}: MSE {state['loss']:.2e}, "
                     f"worst metric MAPE {state['worst']:.2f}%, {elapsed:.0f}s")
    assert ok, state


# -- 4-6: desk-scale experiments ------------------------------------------


@pytest.fixture(scope="module", params=[0, 1], ids=["seed0", "seed1"])
def experiment(request):
    seed = request.param
    t0 = time.perf_counter()
    specs = random_specs(20, seed=seed)
    train_t, test_t = build_dataset(specs, split_seed=seed)
    norm = Normalizer.fit([x for t in train_t for x in (t.a, t.b, t.colocated)])
    tr = [make_example(t, norm) for t in train_t]
    te = [make_example(t, norm) for t in test_t]
    X, Y = training_pairs(tr)
    elementwise = {"baseline": sum_model(), "linear": fit_elementwise("linear", X, Y),
                   "mlp": fit_elementwise("mlp", X, Y, seed=0)}
    model = ResourceNet(ModelConfig(seed=0))
    train(model, tr, 30, seed=0, lr_decay=0.93)
    exp1 = experiment1(te, norm, resourcenet=model, elementwise=elementwise)
    sweep = sweep_length_multiplier(model, te, ks=[1, 4])
    bins = bin_errors(sweep.predictions[("argmax_pc_sum", 4)], sweep.true_lengths, sweep.xs)
    return dict(seed=seed, n=len(train_t) + len(test_t), n_test=len(test_t), exp1=exp1, sweep=sweep,
                bins=bins, elapsed=time.perf_counter() - t0)


def test_criterion_4_experiment1_ordering(experiment, report_criterion):
    r, t = experiment["exp1"], experiment["exp1"].table
    rn_cpu, rn_ram = t["resourcenet"]["cpu"][0], t["resourcenet"]["ram"][0]
    sum_cpu, sum_ram = t["baseline"]["cpu"][0], t["baseline"]["ram"][0]
    rn_mean, mlp_mean = r.mean_over_metrics("resourcenet"), r.mean_over_metrics("mlp")
    ok = (experiment["n"] >= 760 and rn_cpu < sum_cpu and rn_ram < sum_ram and rn_mean <= mlp_mean
          and experiment["elapsed"] < 7200)
    report_criterion(4, f"experiment-1 ordering [seed {experiment['seed']}]", ok,
                     f"{experiment['n']} triplets; cpu {rn_cpu:.1f} vs sum {sum_cpu:.1f}; "
                     f"ram {rn_ram:.1f} vs sum {sum_ram:.1f}; mean {rn_mean:.2f} vs mlp {mlp_mean:.2f} "
                     f"(linear {r.mean_over_metrics('linear'):.2f}, sum {r.mean_over_metrics('baseline'):.2f}); "
                     f"{experiment['elapsed']:.0f}s")
    assert ok


def test_criterion_5_runtime_criteria(experiment, report_criterion):
    table = experiment["sweep"].table
    k1, k4 = table[("argmax_pc_sum", 1)][0], table[("argmax_pc_sum", 4)][0]
    eos = table[("first_max_eos", 4)][0]
    ok = k4 < k1 and k4 < eos
    report_criterion(5, f"runtime-criterion ordering [seed {experiment['seed']}]", ok,
                     f"argmax_pc_sum k=4 {k4:.1f} vs k=1 {k1:.1f} vs first_max_eos k=4 {eos:.1f}")
    assert ok


def test_criterion_6_bin_trend(experiment, report_criterion):
    bins = experiment["bins"]
    filled = [(b, bins[b]["quartiles"][1], bins[b]["count"]) for b in BINS if bins[b]["count"]]
    medians = [m for _, m, _ in filled]
    ok = bool(filled) and all(a <= b for a, b in zip(medians, medians[1:]))
    detail = "; ".join(f"{b} median {m:.1f} (n={n})" for b, m, n in filled)
    empty = [b for b in BINS if not bins[b]["count"]]
    if empty:
        detail += f"; empty: {', '.join(empty)}"
    report_criterion(6, f"error grows with predicted length [seed {experiment['seed']}]", ok, detail)
    assert ok


# -- 7: oracle consistency ------------------------------------------------


def test_criterion_7_oracle_consistency(report_criterion):
    cfg = ContentionConfig(cache_gain=0.0)
    rng = np.random.default_rng(7)
    additive = [i for i in range(len(METRICS)) if i != CPI]
    worst_sum, worst_cpi, worst_mape, n = 0.0, 0.0, 0.0, 0
    triplets = []
    for _ in range(25):
        la, lb = sorted(rng.integers(3, 15, size=2), reverse=True)
        a = rng.uniform(0.1, 1.0, (la, len(METRICS)))
        b = rng.uniform(0.1, 1.0, (lb, len(METRICS)))
        a[:, 0], b[:, 0] = rng.uniform(1, 49, la), rng.uniform(1, 49, lb)  # cpu and io demands stay below capacity
        a[:, 2:4], b[:, 2:4] = rng.uniform(0, 2400, (la, 2)), rng.uniform(0, 2400, (lb, 2))
        delay = int(rng.integers(0, la))
        ab, ca, cb = cosimulate(a, b, delay, cfg)
        stacked = stack_inputs(a, b, delay, with_pcf=False)
        expected = stacked[:, :len(METRICS)] + stacked[:, len(METRICS):]
        assert (ca, cb) == (la, delay + lb) and ab.shape[0] == expected.shape[0]
        worst_sum = max(worst_sum, max_abs(ab[:, additive], expected[:, additive]))
        both = stacked[:, 0] + stacked[:, len(METRICS)]
        cpi = (stacked[:, 0] * stacked[:, CPI] + stacked[:, len(METRICS)] * stacked[:, len(METRICS) + CPI]) / both
        worst_cpi = max(worst_cpi, max_abs(ab[:, CPI], cpi))
        triplets.append(make_triplet("a", a, "b", b, delay / la, cfg))
    norm = Normalizer.fit([x for t in triplets for x in (t.a, t.b, t.colocated)])
    examples = [make_example(t, norm) for t in triplets]
    r = experiment1(examples, norm, elementwise={"baseline": sum_model()})
    worst_mape = max(r.table["baseline"][METRICS[i]][0] for i in additive)
    n = len(r.used)
    ok = worst_sum == 0.0 and worst_mape == 0.0 and worst_cpi <= 1e-12 and n > 0
    report_criterion(7, "oracle consistency", ok,
                     f"{len(triplets)} triplets: additive metrics max |diff| {worst_sum:g}, sum-baseline MAPE "
                     f"{worst_mape:g} on {n} overlaps; cpi matches its cpu-weighted formula within {worst_cpi:.0e}")
    assert ok


# -- 8: format round-trips and determinism --------------------------------


def tree_bytes(root, skip=("run_config.json",)):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in skip}


def test_criterion_8_round_trips(tmp_path, report_criterion):
    checks = {}
    specs = random_specs(4, seed=2, max_length=10)
    train_t, test_t = build_dataset(specs, split_seed=2)

    t = train_t[0]
    save_trace_csv(t.colocated, tmp_path / "trace.csv")
    checks["trace csv"] = np.array_equal(load_trace_csv(tmp_path / "trace.csv"), t.colocated)

    write_dataset(tmp_path / "m", specs, train_t, test_t)
    back = load_manifest(tmp_path / "m" / "train.json")
    checks["manifest"] = len(back) == len(train_t) and all(
        u.id == v.id and u.delay_steps == v.delay_steps and u.completion_a == v.completion_a
        and u.completion_b == v.completion_b and u.delay_fraction == v.delay_fraction
        and np.array_equal(u.a, v.a) and np.array_equal(u.b, v.b) and np.array_equal(u.colocated, v.colocated)
        for u, v in zip(train_t, back))

    model = ResourceNet(ModelConfig(enc_hidden=5, dec_hidden=4, seed=9))
    norm = Normalizer.fit([x for tr in train_t for x in (tr.a, tr.b, tr.colocated)])
    ok_ckpt = True
    for name in ("model.ckpt", "model.json"):
        checkpoint.save_model(tmp_path / name, model, norm)
        m2, n2, _ = checkpoint.load_model(tmp_path / name)
        ok_ckpt &= all(np.array_equal(model.params[k], m2.params[k]) for k in model.params)
        ok_ckpt &= m2.config == model.config and np.array_equal(n2.lo, norm.lo) and np.array_equal(n2.hi, norm.hi)
    params, meta = checkpoint.load(tmp_path / "model.json")
    checkpoint.save(tmp_path / "again.ckpt", params, meta)
    ok_ckpt &= (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "model.ckpt").read_bytes()
    checks["checkpoint"] = bool(ok_ckpt)

    specs_path = tmp_path / "specs.json"
    specs_path.write_text(json.dumps(specs_to_json(specs)))
    runs = []
    for i in (1, 2):
        root = tmp_path / f"run{i}"
        assert run(["gen", "--specs", str(specs_path), "--out", str(root / "data"), "--seed", "2"]) == 0
        assert run(["train", "--manifest", str(root / "data" / "train.json"), "--out", str(root / "model"),
                    "--epochs", "2", "--enc-hidden", "4", "--dec-hidden", "4", "--seed", "3",
                    "--baselines", "linear"]) == 0
        runs.append(tree_bytes(root))
    checks["equal-seed artifacts"] = runs[0] == runs[1] and len(runs[0]) > 10

    ok = all(checks.values())
    report_criterion(8, "format round-trips", ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}"
                                                            for k, v in checks.items()))
    assert ok, checks
