"""Acceptance criteria, each run at its stated tolerance.

Every test records one ``CRITERION n: PASS|FAIL|BLOCKED`` line. The lines
are printed as they happen and again in the terminal summary. CIFAR-10
criteria are BLOCKED when the dataset is not installed. In that case a
labelled MNIST stand-in runs the same pipeline and reports its own line.
"""

import math
import threading
import time

import numpy as np
import pytest
import torch
from scipy.stats import spearmanr

from advlatent import datasets
from advlatent.attacks import ALL_ATTACKS, ALLOWED_NORMS, NORM_SLACK, AttackConfig, lp_norm, project_lp
from advlatent.evalcli import DEFAULTS, attack_split, compute_asr, run_experiment, select_eval_set
from advlatent.evalcli.experiments import MNIST_CNN
from advlatent.harness import decode_frame, encode_frame, listen, run_edge_endpoint, run_interceptor, run_mobile_endpoint
from advlatent.ib_oracle import (
    conditional_mutual_information,
    expected_kl,
    joint_mutual_information,
    mutual_information,
    random_chain,
    residual_information,
    run_campaign,
)
from advlatent.mi_estimators import BOUND_DIRECTION, KINDS, Schedule, estimate
from advlatent.splitnet import (
    VGG_MNIST_KWARGS,
    dequantize_latent,
    entropy_code_latent,
    entropy_decode_latent,
    quantization_step,
    quantize_latent,
    split_model,
    vgg_cifar,
)

pytestmark = pytest.mark.acceptance

LINES: list[str] = []

# Labelled MNIST stand-in for the CIFAR-10 VGG model (see README).
VGG_STANDIN = {"arch": "vgg-cifar", "dataset": "mnist", "arch_kwargs": dict(VGG_MNIST_KWARGS), "epochs": 4, "seed": 0}


def record(number, ok, detail, label=""):
    status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
    tag = f"CRITERION {number}{' [' + label + ']' if label else ''}"
    line = f"{tag}: {status} | {detail}"
    LINES.append(line)
    print(line, flush=True)
    return status


def inversions(values):
    """(count, largest size) of increases along a sequence that should not increase."""
    ups = [b - a for a, b in zip(values, values[1:]) if b > a]
    return len(ups), max(ups, default=0.0)


def _cifar_available():
    return datasets.available("cifar10")


# ---------------------------------------------------------------- 1, 2: exact theory


def test_criterion_1_exact_identities():
    rng = np.random.default_rng(2024)
    worst = {"dpi": -math.inf, "expected_kl": 0.0, "joint_mi": 0.0, "residual": 0.0}
    violations = 0
    t0 = time.perf_counter()
    for _ in range(10_000):
        chain = random_chain(rng, 8)
        joint = chain.joint()
        i_xy = mutual_information(chain.joint_xy())
        i_yt = mutual_information(chain.joint_yt())
        cmi = conditional_mutual_information(joint)
        gaps = {
            "dpi": i_yt - i_xy,
            "expected_kl": abs(expected_kl(chain) - cmi),
            "joint_mi": abs(joint_mutual_information(joint) - i_xy),
            "residual": abs(cmi - residual_information(chain)),
        }
        violations += int(gaps["dpi"] > 1e-9 or max(gaps["expected_kl"], gaps["joint_mi"], gaps["residual"]) > 1e-9)
        worst = {k: max(worst[k], gaps[k]) for k in worst}
    seconds = time.perf_counter() - t0
    ok = violations == 0 and seconds < 60
    record(1, ok, f"10000 chains, violations={violations}, worst gaps " + ", ".join(f"{k}={v:.2e}" for k, v in worst.items()) + f", {seconds:.1f}s (< 60s)")
    assert ok


def test_criterion_2_theorem_campaigns():
    t0 = time.perf_counter()
    thm2 = run_campaign("thm2", 1000, seed=1, distortion_tol=1e-6)
    cor1 = run_campaign("cor1", 1000, seed=2, distortion_tol=1e-6)
    ok = thm2["trials"] == 1000 and cor1["trials"] == 1000 and thm2["violations"] == 0 and cor1["violations"] == 0
    record(
        2,
        ok,
        f"thm2 {thm2['trials']} calibrated chains ({thm2['attempts']} drawn), violations={thm2['violations']}, worst gap {thm2['worst_gap']:.2e}; "
        f"cor1 {cor1['trials']} ({cor1['attempts']} drawn), violations={cor1['violations']}, worst gap {cor1['worst_gap']:.2e}; {time.perf_counter() - t0:.0f}s",
    )
    assert ok


# ---------------------------------------------------------------- 3, 4: MNIST sweep and MI table

TABLE1_CONFIG = {"model": MNIST_CNN}


@pytest.fixture(scope="module")
def table1(mnist_available):
    t0 = time.perf_counter()
    bundle = run_experiment("table1", TABLE1_CONFIG)
    bundle.manifest["seconds"] = time.perf_counter() - t0
    return bundle


def test_criterion_3_table1_accuracy(mnist_cnn_model, mnist_data):
    split, manifest = mnist_cnn_model
    clean = manifest["accuracy"]
    cfg = DEFAULTS["table1"]
    ev = select_eval_set(split, mnist_data, cfg["n"], cfg["eval_seed"])
    t0 = time.perf_counter()
    acc_in, acc_lat = [], []
    for eps in cfg["eps_grid"]:
        for space, accs in (("input", acc_in), ("latent", acc_lat)):
            config = AttackConfig("PGD", "linf", eps, space, steps=cfg["steps"], seed=cfg["attack_seed"])
            accs.append(1.0 - compute_asr(attack_split(split, config, ev)))
    minutes = (time.perf_counter() - t0) / 60
    a = all(l >= i for i, l in zip(acc_in, acc_lat))
    b = acc_in[-1] <= 0.10 and 0.10 <= acc_lat[-1] <= 0.40
    inv_in, inv_lat = inversions(acc_in), inversions(acc_lat)
    c = all(n <= 1 and size <= 0.01 for n, size in (inv_in, inv_lat))
    ok = clean >= 0.99 and a and b and c and minutes < 180
    record(
        3,
        ok,
        f"clean acc {clean:.4f} (>= 0.99); n={len(ev)}; eps {cfg['eps_grid'][0]}..{cfg['eps_grid'][-1]}; input acc {[round(v, 3) for v in acc_in]}; latent acc {[round(v, 3) for v in acc_lat]}; "
        f"(a) latent >= input everywhere: {a}; (b) input@0.10={acc_in[-1]:.3f} <= 0.10, latent@0.10={acc_lat[-1]:.3f} in [0.10, 0.40]: {b}; "
        f"(c) inversions (count, size) input {inv_in}, latent {inv_lat}: {c}; PGD sweep {minutes:.1f} min (< 180 CPU)",
    )
    assert ok


def _synthetic_pairs(n=6000, seed=0):
    """(T one-hot, Y) pairs from a random chain's (Y, T) marginal, with its exact MI."""
    rng = np.random.default_rng(seed)
    chain = random_chain(rng, 8)
    pyt = chain.joint_yt().probabilities
    flat = pyt.ravel() / pyt.sum()
    idx = rng.choice(flat.size, size=n, p=flat)
    y, t = np.unravel_index(idx, pyt.shape)
    t1h = torch.nn.functional.one_hot(torch.as_tensor(t), pyt.shape[1]).float()
    return t1h, torch.as_tensor(y), mutual_information(pyt)


def _trend_check(bundle):
    cfg = bundle.manifest["config"]
    details, ok = [], True
    for kind in cfg["estimators"]:
        rows = sorted((r for r in bundle.ok_rows() if r["estimator"] == kind), key=lambda r: r["eps"])
        eps = [r["eps"] for r in rows]
        v_in = [r["input_value"] for r in rows]
        v_lat = [r["latent_value"] for r in rows]
        rho = spearmanr(eps, v_in).statistic if len(rows) > 2 else float("nan")
        above = sum(l >= i for i, l in zip(v_in, v_lat))
        kind_ok = len(rows) == 10 and rho <= -0.9 and above >= 8
        ok &= kind_ok
        values = " ".join(f"{i:.3g}/{l:.3g}" for i, l in zip(v_in, v_lat))
        details.append(f"{kind}: spearman {rho:.3f}, latent>=input {above}/10 {'ok' if kind_ok else 'FAIL'} (input/latent {values})")
    return ok, details


def test_criterion_4_mi_trends(table1):
    cfg = table1.manifest["config"]
    ok, details = _trend_check(table1)
    # bound sanity on a discrete synthetic with exact MI
    t, y, exact = _synthetic_pairs()
    schedule = Schedule(steps=cfg["mi_steps"], batch_size=cfg["mi_batch"], lr=cfg["mi_lr"])
    sanity = {}
    for kind in KINDS:
        value = estimate(kind, t, y, seeds=tuple(cfg["seeds"]), schedule=schedule).value
        good = value <= exact + 0.05 if BOUND_DIRECTION[kind] == "lower" else value >= exact - 0.05
        sanity[kind] = (value, good)
        ok &= good
    details.append(f"synthetic exact {exact:.4f}: " + ", ".join(f"{k} {v:.4f} {'ok' if g else 'FAIL'}" for k, (v, g) in sanity.items()))
    # informational: estimators fit once on clean pairs and frozen
    clean_ok, clean_details = _trend_check(run_experiment("table1", dict(TABLE1_CONFIG, fit_on="clean")))
    record(4, clean_ok, "; ".join(clean_details), label="informational, fit_on=clean")
    record(4, ok, f"fit_on=attacked, {table1.manifest['seconds'] / 60:.0f} min; " + "; ".join(details))
    assert ok


# ---------------------------------------------------------------- 5, 6: depth and dimension


def _depth_check(bundle):
    cfg = bundle.manifest["config"]
    order = ["input"] + [f"feature{k}" for k in cfg["features"]]
    count, worst, table = 0, 0.0, []
    for attack in cfg["attacks"]:
        for eps in cfg["eps_grid"]:
            asr = {r["target"]: r["asr"] for r in bundle.ok_rows() if r["algo"] == attack["algo"] and r["eps"] == eps}
            if set(asr) != set(order):
                return False, f"missing cells for {attack['algo']} eps={eps}"
            seq = [asr[t] for t in order]
            table.append(f"{attack['algo']}@{eps:g} " + "/".join(f"{100 * v:.1f}" for v in seq))
            for a, b in zip(seq, seq[1:]):
                if b > a:
                    count += 1
                    worst = max(worst, b - a)
    ok = count <= 2 and worst <= 0.03
    return ok, f"ASR % (input/F0/F2/F4): {'; '.join(table)}; inversions {count} (<= 2), largest {100 * worst:.1f} pts (<= 3)"


DEPTH_SCALE = 20
DEPTH_STANDIN = {"model": VGG_STANDIN, "n": 200, "eps_grid": [round(DEPTH_SCALE * e, 10) for e in (0.003, 0.006, 0.009, 0.012, 0.015)]}


def test_criterion_5_depth(mnist_available):
    if _cifar_available():
        ok, detail = _depth_check(run_experiment("depth", {}))
        record(5, ok, detail)
        assert ok
        return
    ok, detail = _depth_check(run_experiment("depth", DEPTH_STANDIN))
    standin = record(5, ok, detail, label="MNIST stand-in, VGG on 32x32 MNIST, eps x" + str(DEPTH_SCALE))
    record(5, "BLOCKED", f"CIFAR-10 not installed; stand-in {standin}")
    pytest.skip("criterion 5 BLOCKED: CIFAR-10 not installed")


# MNIST needs larger budgets than CIFAR-10 before any attack succeeds.
DIMENSION_STANDIN = {"model": VGG_STANDIN, "eps_grid": [0.03, 0.1, 0.3]}


def _dimension_check(bundle):
    cfg = bundle.manifest["config"]
    models = bundle.manifest["models"]
    rows = bundle.ok_rows()
    native = models["none"]["accuracy"]
    widths = [c for c in cfg["bottlenecks"] if c]
    moderate, over = f"bn{max(widths)}", f"bn{min(widths)}"
    drop_mod = 100 * (native - models[moderate]["accuracy"])
    drop_over = 100 * (native - models[over]["accuracy"])
    asr = {(r["variant"], r["eps"]): r["asr"] for r in rows}
    lower, plateau, table = [], [], []
    for eps in cfg["eps_grid"]:
        a0, am, ao = asr.get(("none", eps)), asr.get((moderate, eps)), asr.get((over, eps))
        if None in (a0, am, ao):
            return False, f"missing cells at eps={eps}"
        lower.append(100 * (a0 - am) >= 5)
        plateau.append(ao >= am)
        table.append(f"eps {eps:g}: none {100 * a0:.1f} / {moderate} {100 * am:.1f} / {over} {100 * ao:.1f}")
    over_compressed = drop_over > 5
    ok = any(lower) and over_compressed and all(plateau)
    detail = (
        f"latent ASR %: {'; '.join(table)}; clean acc none {native:.4f}, {moderate} drop {drop_mod:.2f} pts, {over} drop {drop_over:.2f} pts; "
        f"moderate lowers ASR >= 5 pts at eps {[e for e, l in zip(cfg['eps_grid'], lower) if l]}; over-compressed (drop > 5): {over_compressed}; "
        f"over-compressed ASR >= moderate at every eps: {all(plateau)}"
    )
    return ok, detail


def test_criterion_6_dimension(mnist_available):
    if _cifar_available():
        ok, detail = _dimension_check(run_experiment("dimension", {}))
        record(6, ok, detail)
        assert ok
        return
    ok, detail = _dimension_check(run_experiment("dimension", DIMENSION_STANDIN))
    standin = record(6, ok, detail, label="MNIST stand-in, VGG on 32x32 MNIST")
    record(6, "BLOCKED", f"CIFAR-10 not installed; stand-in {standin}")
    pytest.skip("criterion 6 BLOCKED: CIFAR-10 not installed")


# ---------------------------------------------------------------- 7: budgets


def test_criterion_7_budget_properties(mnist_cnn_model, mnist_data):
    rng = np.random.default_rng(7)
    bad_idem = bad_norm = 0
    worst = 0.0
    for i in range(100_000):
        norm = "l2" if i % 2 else "linf"
        d = rng.normal(size=int(rng.integers(1, 64))) * rng.uniform(1e-3, 100)
        sigma = float(rng.uniform(0, 5)) if i % 10 else 0.0
        p = project_lp(d, sigma, norm)
        bad_idem += int(not np.array_equal(project_lp(p, sigma, norm), p))
        n = float(np.abs(p).max() if norm == "linf" else np.linalg.norm(p))
        worst = max(worst, n - sigma)
        bad_norm += int(n > sigma + NORM_SLACK)
    # every attack, both spaces, on real MNIST latents and inputs
    split, _ = mnist_cnn_model
    ev = select_eval_set(split, mnist_data, 24, seed=7)
    checked = bad_results = 0
    for algo in ALL_ATTACKS:
        for norm in ALLOWED_NORMS[algo]:
            for space in ("input", "latent"):
                eps = 0.05 if norm == "linf" else 0.005
                config = AttackConfig(algo, norm, eps, space, steps=20, query_budget=300, seed=3)
                results = attack_split(split, config, ev)
                with torch.no_grad():
                    z0 = ev.x if space == "input" else split.forward_mobile(ev.x)
                sigma = config.budget(z0[0].numel()).sigma
                for r, z in zip(results, z0):
                    checked += 1
                    good = float(lp_norm((r.perturbed - z).unsqueeze(0), norm)) <= sigma + NORM_SLACK and r.queries_used <= config.query_budget
                    if space == "input":
                        good &= bool(r.perturbed.min() >= 0 and r.perturbed.max() <= 1)
                    bad_results += int(not good)
    ok = bad_idem == 0 and bad_norm == 0 and bad_results == 0
    record(7, ok, f"10^5 project_lp cases: idempotence failures {bad_idem}, norm-bound failures {bad_norm} (worst excess {worst:.1e}); attack results checked {checked}, non-compliant {bad_results}")
    assert ok


# ---------------------------------------------------------------- 8: harness


def _serve(target, *args, **kwargs):
    out = {}
    th = threading.Thread(target=lambda: out.setdefault("value", target(*args, **kwargs)), daemon=True)
    th.start()
    return th, out


def _through_interceptor(split, x, config, white_box=None):
    edge_srv, mitm_srv = listen(), listen()
    edge_th, _ = _serve(run_edge_endpoint, split, edge_srv, sessions=1)
    mitm_th, _ = _serve(run_interceptor, mitm_srv, edge_srv.getsockname(), config, 10, white_box)
    result = run_mobile_endpoint(split, x, mitm_srv.getsockname())
    mitm_th.join(600)
    edge_th.join(600)
    return result


def test_criterion_8_harness(mnist_cnn_model, mnist_data):
    rng = np.random.default_rng(8)
    mismatches = 0
    for i in range(10_000):
        shape = tuple(int(s) for s in rng.integers(1, 6, size=int(rng.integers(0, 5))))
        kind = i % 3
        if kind == 0:
            arr = rng.standard_normal(shape).astype(np.float32) * 10 ** rng.uniform(-30, 30)
            t = torch.from_numpy(np.ascontiguousarray(arr))
        elif kind == 1:
            t = torch.from_numpy(rng.integers(0, 256, shape, dtype=np.uint8))
        else:
            t = torch.from_numpy(rng.integers(0, 65536, shape, dtype=np.int64).astype(np.int32)).to(torch.uint16)
        frame = encode_frame(t)
        mismatches += int(encode_frame(decode_frame(frame)) != frame)
    split, _ = mnist_cnn_model
    x, y = mnist_data.test_x[:200], mnist_data.test_y[:200]
    with torch.no_grad():
        direct = [int(split(xi.unsqueeze(0)).argmax(1)) for xi in x]
    zero = _through_interceptor(split, x, AttackConfig("PGD", "linf", 0.0, "latent"), white_box=split)
    equal = zero.predictions == direct
    attacked = _through_interceptor(split, x, AttackConfig("PGD", "linf", 0.10, "latent", steps=40), white_box=split)
    acc = float(np.mean([p == int(t) for p, t in zip(attacked.predictions, y)]))
    clean = float(np.mean([p == int(t) for p, t in zip(direct, y)]))
    ok = mismatches == 0 and equal and not attacked.aborted and len(attacked.predictions) == 200 and acc <= 0.40
    record(8, ok, f"10^4 fuzzed frames, re-encode mismatches {mismatches}; zero-budget interceptor equals in-process on 200/200: {equal}; PGD-linf eps=0.10 interceptor: end-to-end acc {acc:.3f} (<= 0.40), clean {clean:.3f}")
    assert ok


# ---------------------------------------------------------------- 9: codecs


def test_criterion_9_codecs(mnist_cnn_model):
    rng = np.random.default_rng(9)
    bound_failures = 0
    for _ in range(100):
        bits = int(rng.integers(1, 17))
        lo = float(rng.uniform(-10, 10))
        hi = lo + float(rng.uniform(1e-3, 20))
        values = torch.as_tensor(rng.uniform(lo, hi, size=1000))
        rec = dequantize_latent(quantize_latent(values, bits, (lo, hi)), bits, (lo, hi), torch.float64)
        bound_failures += int(float((rec - values).abs().max()) > quantization_step(bits, (lo, hi)) / 2 + 1e-9)
    entropy_mismatch = 0
    for k in range(50):
        bits = (4, 8, 12, 16)[k % 4]
        t = torch.as_tensor(rng.normal(size=(2, int(rng.integers(1, 9)), 7, 7)), dtype=torch.float32) * 3
        vr = (float(t.min()) - 0.1, float(t.max()) + 0.1)
        qt = dequantize_latent(quantize_latent(t, bits, vr), bits, vr)
        entropy_mismatch += int(not torch.equal(entropy_decode_latent(entropy_code_latent(t, bits, vr)), qt))
    trained, _ = mnist_cnn_model
    torch.manual_seed(0)
    vgg = vgg_cifar()
    with torch.no_grad():
        vgg.train()
        vgg(torch.rand(64, 3, 32, 32))
    vgg.eval()
    worst = 0.0
    indices = 0
    for graph in (trained.graph, vgg):
        x = torch.rand(32, *graph.input_shape, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            ref = graph(x)
            for i in range(1, len(graph)):
                s = split_model(graph, i)
                worst = max(worst, float((s.forward_local(s.forward_mobile(x)) - ref).abs().max()))
                indices += 1
    ok = bound_failures == 0 and entropy_mismatch == 0 and worst <= 1e-5
    record(9, ok, f"QT half-step bound over 10^5 values: failures {bound_failures}; entropy path vs QT path mismatches {entropy_mismatch}/50; split vs unsplit max |diff| {worst:.1e} over {indices} split indices (<= 1e-5)")
    assert ok
