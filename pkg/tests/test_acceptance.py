"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` to watch progress;
the whole file takes about 20 minutes on one core.
"""
import time

import numpy as np
import pytest

from cardioforge import constants as C
from cardioforge.beat_data import (
    CorpusSpec,
    Heartbeat,
    default_class_distributions,
    load_csv,
    make_synthetic_corpus,
    save_csv,
    standardize,
)
from cardioforge.classifier_eval import ClassifierConfig, build_classifier, evaluate_regimes, pr_curve, train_classifier
from cardioforge.dynamical_model import DEFAULT_PARAMS, integrate
from cardioforge.engine import Tensor
from cardioforge.euler_loss import sim_distance
from cardioforge.param_estimation import build_distribution, fit_eta, repair_eta, simulator_only_generate
from cardioforge.sim_gan import GanConfig, build_discriminator, build_generator, generate, train
from clipipe import pipeline, primary_files
from fdcheck import OPS, grad_check, sampled_fd
from oracles import brute_force_curve


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return report


def random_eta(rng, spread):
    eta = DEFAULT_PARAMS.eta * (1.0 + rng.uniform(-spread, spread, 15))
    eta[:5] = np.sort(eta[:5])
    return eta


def test_1_zero_residual_on_own_trajectory(verdict):
    rng = np.random.default_rng(1)
    etas = [random_eta(rng, 0.3) for _ in range(100)]
    start = time.perf_counter()
    worst = max(sim_distance(integrate(DEFAULT_PARAMS.with_eta(e)).z, e).value for e in etas)
    elapsed = time.perf_counter() - start
    verdict(1, worst < 1e-9 and elapsed < 2.0, f"max distance {worst:.3g} (< 1e-9), {elapsed:.2f} s (< 2 s)")


def distance_fd_error(rng):
    h = rng.standard_normal(C.BEAT_LEN)
    eta = random_eta(rng, 0.3)
    g = sim_distance(h, eta).grad
    eps = 1e-5
    fd = np.empty(C.BEAT_LEN)
    for i in range(C.BEAT_LEN):
        hp, hm = h.copy(), h.copy()
        hp[i] += eps
        hm[i] -= eps
        fd[i] = (sim_distance(hp, eta).value - sim_distance(hm, eta).value) / (2 * eps)
    return float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8 * np.max(np.abs(fd)))))


def test_2_gradient_suite(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    dist_err = max(distance_fd_error(rng) for _ in range(20))
    errs = {name: grad_check(fn, [a.copy() for a in arrays]) for name, (fn, arrays) in OPS.items()}
    x = np.random.default_rng(3)
    small = dict(scale=0.125, batch_size=4, probe_size=4)
    for regime in ("dcgan", "vgan"):
        cfg = GanConfig(regime=regime, **small)
        G, D = build_generator(cfg), build_discriminator(cfg)
        m = Tensor(x.standard_normal((4, cfg.noise_dim)))
        h = Tensor(x.standard_normal((4, C.BEAT_LEN)))
        errs[f"generator_{regime}"] = sampled_fd(G, lambda: G(m))
        errs[f"discriminator_{regime}"] = sampled_fd(D, lambda: D.logits(h))
    net = build_classifier(ClassifierConfig(scale=0.125))
    hc = Tensor(x.standard_normal((4, C.BEAT_LEN)))
    errs["classifier"] = sampled_fd(net, lambda: net(hc))
    elapsed = time.perf_counter() - start
    worst_name = max(errs, key=errs.get)
    ok = dist_err < 1e-5 and errs[worst_name] < 1e-4 and elapsed < 60
    verdict(2, ok, f"distance grad {dist_err:.2g} (< 1e-5); worst of {len(errs)} graphs {worst_name} "
                   f"{errs[worst_name]:.2g} (< 1e-4); {elapsed:.1f} s (< 60 s)")


def test_3_morphology(verdict):
    tr = integrate()
    peak = int(np.argmax(tr.z))
    phase = np.arctan2(tr.y, tr.x)
    signs = []
    for th in DEFAULT_PARAMS.theta:
        centre = int(np.argmin(np.abs((phase - th + np.pi) % (2 * np.pi) - np.pi)))
        lo, hi = max(centre - 6, 1), min(centre + 7, len(tr.z) - 1)
        seg = tr.z[lo:hi] - 0.5 * (tr.z[lo - 1] + tr.z[hi])
        signs.append(int(np.sign(seg[np.argmax(np.abs(seg))])))
    want = [int(np.sign(a)) for a in DEFAULT_PARAMS.a]
    ok = abs(peak - C.R_PEAK_INDEX) <= 5 and signs == want
    verdict(3, ok, f"peak at {peak} (72 +- 5); event signs {signs} vs {want}")


def test_4_eta_recovery(verdict):
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    good = 0
    for _ in range(20):
        p = DEFAULT_PARAMS.with_eta(repair_eta(DEFAULT_PARAMS.eta * (1.0 + rng.uniform(-0.1, 0.1, 15))))
        e = fit_eta(integrate(p).z).eta
        ok_th = np.max(np.abs(np.subtract(e.theta, p.theta))) < 0.05
        ok_a = np.max(np.abs(np.subtract(e.a, p.a)) / np.abs(p.a)) < 0.05
        ok_b = np.max(np.abs(np.subtract(e.b, p.b)) / np.abs(p.b)) < 0.10
        good += bool(ok_th and ok_a and ok_b)
    elapsed = time.perf_counter() - start
    verdict(4, good >= 18 and elapsed < 300, f"{good}/20 recovered (>= 18), {elapsed:.0f} s (< 300 s)")


def test_5_euler_loss_training_signal(verdict):
    dist = default_class_distributions()["N"]
    train_set, _ = make_synthetic_corpus(CorpusSpec({"N": dist}, {"N": 200}, seed=5))
    start = time.perf_counter()
    _, log = train(GanConfig(regime="sim_dcgan", scale=0.25, iterations=2000, seed=5), train_set, dist)
    elapsed = time.perf_counter() - start
    at100, final = log.entries[99].probe_sim_dist, log.entries[-1].probe_sim_dist
    finite = all(np.isfinite(e.loss_d) for e in log.entries)
    ok = final <= 0.5 * at100 and finite and elapsed < 900
    verdict(5, ok, f"probe distance {at100:.4g} at iter 100 -> {final:.4g} at iter 2000 "
                   f"(ratio {final / at100:.3f} <= 0.5); loss_d finite {finite}; {elapsed:.0f} s (< 900 s)")


def augmentation_run(seed):
    """Minority (S) auprc for no generation, simulator-only and sim_dcgan augmentation."""
    spec = CorpusSpec(default_class_distributions(), {"N": 400, "S": 20, "V": 100, "F": 40},
                      {"N": 400, "S": 100, "V": 100, "F": 100}, sample_noise=0.003, seed=seed)
    train_set, test_set = make_synthetic_corpus(spec)
    minority = train_set.of_class("S")
    n = len(minority)
    dist = build_distribution([fit_eta(b.samples, seed=seed) for b in minority.beats], "S")
    train_std, stats = standardize(train_set)
    test_std, _ = standardize(test_set, stats)
    cfg = ClassifierConfig(scale=0.25, seed=seed)

    gan, _ = train(GanConfig(regime="sim_dcgan", scale=0.25, iterations=2000, seed=seed), minority, dist)
    synth = {
        "simulator": simulator_only_generate(dist, n, rng_seed=seed),
        "sim_dcgan": generate(gan, n, rng_seed=seed),
    }
    models = {"none": train_classifier(cfg, train_std)[0]}
    for name, beats in synth.items():
        models[name] = train_classifier(cfg, train_std, standardize(beats, stats)[0])[0]
    report = evaluate_regimes(models, test_std, classes=("S",))
    return {name: report.curves[name]["S"].auprc for name in models}


def test_6_augmentation_benefit(verdict):
    start = time.perf_counter()
    runs = [augmentation_run(seed) for seed in range(5)]
    elapsed = time.perf_counter() - start
    gan_wins = sum(r["sim_dcgan"] >= r["none"] for r in runs)
    sim_wins = sum(r["simulator"] >= r["none"] for r in runs)
    table = "; ".join(f"seed {i} none {r['none']:.3f} sim {r['simulator']:.3f} gan {r['sim_dcgan']:.3f}"
                      for i, r in enumerate(runs))
    ok = gan_wins >= 4 and sim_wins >= 3 and elapsed < 2700
    verdict(6, ok, f"sim_dcgan >= none in {gan_wins}/5 (>= 4), simulator >= none in {sim_wins}/5 (>= 3), "
                   f"{elapsed:.0f} s (< 2700 s) [{table}]")


def test_7_pr_curve_matches_brute_force(verdict):
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(50):
        n = int(rng.integers(1, 101))
        scores = rng.integers(0, max(2, n // 3), n) / 7.0 if rng.random() < 0.5 else rng.random(n)
        truth = rng.random(n) < rng.uniform(0.05, 0.95)
        truth[rng.integers(n)] = True
        curve = pr_curve(scores, truth)
        points, taus, area = brute_force_curve(scores, truth)
        mismatches += not (list(curve.points) == points and list(curve.thresholds) == taus and curve.auprc == area)
    verdict(7, mismatches == 0, f"{50 - mismatches}/50 instances identical")


def test_8_reproducible_cli_and_lossless_csv(verdict, tmp_path):
    pipeline(tmp_path / "a")
    pipeline(tmp_path / "b")
    fa, fb = primary_files(tmp_path / "a"), primary_files(tmp_path / "b")
    differ = sorted(k for k in fa if fa[k] != fb.get(k)) + sorted(set(fb) - set(fa))
    rng = np.random.default_rng(8)
    beats = [Heartbeat(rng.standard_normal(C.BEAT_LEN) * 10.0 ** rng.integers(-300, 300), "NSVF"[i % 4], record_id=f"r{i}")
             for i in range(40)]
    save_csv(beats, tmp_path / "beats.csv")
    lossless = load_csv(tmp_path / "beats.csv").beats == tuple(beats)
    ok = not differ and lossless
    verdict(8, ok, f"{len(fa)} primary outputs across 8 commands, differing: {differ or 'none'}; CSV lossless {lossless}")
