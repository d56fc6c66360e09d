import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cardioforge import constants as C
from cardioforge.beat_data import Heartbeat
from cardioforge.dynamical_model import DEFAULT_PARAMS, SimulatorParams, integrate
from cardioforge.errors import DataError, FitDiverged, ShapeError
from cardioforge.param_estimation import (
    EtaDistribution,
    FitResult,
    build_distribution,
    fit_eta,
    format_distributions,
    load_distributions,
    noise_sigma_estimate,
    repair_eta,
    sample_eta,
    sample_eta_matrix,
    save_distributions,
    save_fits_csv,
    simulator_only_generate,
)


def perturbed(rng, rel=0.1):
    eta = DEFAULT_PARAMS.eta * (1.0 + rng.uniform(-rel, rel, 15))
    return DEFAULT_PARAMS.with_eta(repair_eta(eta))


def fake_fit(eta):
    return FitResult(DEFAULT_PARAMS.with_eta(eta), 0.0, 0, True)


# --- fit_eta ------------------------------------------------------------------------

def test_fit_at_truth_is_already_optimal():
    p = perturbed(np.random.default_rng(1))
    z = integrate(p).z
    res = fit_eta(z, init=p)
    assert res.residual < 1e-12
    assert np.array_equal(res.eta.eta, p.eta)


def test_fit_recovers_perturbed_eta():
    rng = np.random.default_rng(2)
    for _ in range(3):
        p = perturbed(rng)
        res = fit_eta(integrate(p).z)
        th, a, b = res.eta.theta, res.eta.a, res.eta.b
        assert np.max(np.abs(np.subtract(th, p.theta))) < 0.05
        assert np.max(np.abs(np.subtract(a, p.a)) / np.abs(p.a)) < 0.05
        assert np.max(np.abs(np.subtract(b, p.b)) / np.abs(p.b)) < 0.10


def test_noise_estimate_zero_on_lines():
    assert noise_sigma_estimate(np.linspace(-1.0, 3.0, 216)) == 0.0


def test_noise_estimate_white_noise_mean():
    est = [noise_sigma_estimate(0.003 * np.random.default_rng(i).standard_normal(216)) for i in range(100)]
    assert abs(np.mean(est) - 0.003) < 0.00015


def test_noise_estimate_small_on_clean_beat():
    assert noise_sigma_estimate(integrate().z) < 1e-4


def test_noisy_fit_does_not_cancel_events():
    # Q, R and S overlap; with noise an unregularized solve trades large
    # opposite-signed magnitudes for a tiny gain.
    z = integrate().z
    for seed in range(3):
        noisy = z + 0.003 * np.random.default_rng(seed).standard_normal(216)
        a = fit_eta(noisy, budget=600, restarts=1).eta.a
        for i in (1, 3, 4):
            assert abs(a[i] - DEFAULT_PARAMS.a[i]) < 0.4 * abs(DEFAULT_PARAMS.a[i])


def test_fit_accepts_heartbeat():
    z = integrate().z
    res = fit_eta(Heartbeat(z, "N"), budget=50, restarts=1)
    assert res.residual < 1e-12


def test_fit_wrong_length():
    with pytest.raises(ShapeError):
        fit_eta(np.zeros(100))


def test_fit_non_finite_objective():
    beat = np.zeros(216)
    beat[5] = np.nan
    with pytest.raises(FitDiverged):
        fit_eta(beat, budget=20, restarts=1)


@settings(max_examples=6, deadline=None)
@given(st.integers(0, 10_000))
def test_fit_never_worse_than_init(seed):
    rng = np.random.default_rng(seed)
    target = integrate(perturbed(rng, 0.3)).z + rng.normal(0, 0.002, 216)
    init = perturbed(rng, 0.2)
    res = fit_eta(target, init=init, budget=150, restarts=2, seed=seed)
    init_res = float(np.mean((integrate(init).z - target) ** 2))
    assert res.residual <= init_res
    res.eta.validate()


# --- distributions ----------------------------------------------------------------

def test_build_single_fit():
    d = build_distribution([fake_fit(DEFAULT_PARAMS.eta)], "N")
    assert np.array_equal(d.mean, DEFAULT_PARAMS.eta)
    assert np.all(d.var == 0) and d.count == 1


def test_build_two_point_variance():
    eta = DEFAULT_PARAMS.eta
    delta = np.full(15, 0.01)
    d = build_distribution([fake_fit(eta), fake_fit(eta + 2 * delta)], "S")
    assert np.allclose(d.mean, eta + delta, rtol=0, atol=1e-14)
    assert np.allclose(d.var, delta ** 2, rtol=1e-9)


def test_build_empty():
    with pytest.raises(DataError):
        build_distribution([], "N")


def test_distribution_validation():
    with pytest.raises(DataError):
        EtaDistribution("N", np.zeros(15), -np.ones(15), 1)
    with pytest.raises(DataError):
        EtaDistribution("N", np.zeros(15), np.zeros(15), 0)


def test_fitted_mean_monte_carlo():
    rng = np.random.default_rng(20)
    sigma = 0.01
    fits = []
    for _ in range(50):
        eta = DEFAULT_PARAMS.eta + sigma * rng.standard_normal(15)
        p = DEFAULT_PARAMS.with_eta(repair_eta(eta))
        fits.append(fit_eta(integrate(p).z, budget=1500, restarts=2))
    d = build_distribution(fits, "N")
    assert np.all(np.abs(d.mean - DEFAULT_PARAMS.eta) < 3 * sigma / math.sqrt(50))


# --- sampling -------------------------------------------------------------------

def test_sample_zero_variance_is_mean():
    p = perturbed(np.random.default_rng(4))
    d = EtaDistribution.point(p, "V")
    assert np.array_equal(sample_eta(d, 0).eta, p.eta)


def test_sample_deterministic():
    d = EtaDistribution("N", DEFAULT_PARAMS.eta, np.full(15, 1e-4), 3)
    assert np.array_equal(sample_eta(d, 123).eta, sample_eta(d, 123).eta)


def test_sample_mean_clt_bound():
    # well separated angles and wide events so the repair step never triggers
    mean = np.array([-2.0, -1.0, 0.0, 1.0, 2.0, 1.0, -1.0, 5.0, -1.0, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0])
    d = EtaDistribution("N", mean, np.full(15, 0.01), 1)
    draws = sample_eta_matrix(d, 10_000, 7)
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 4 * (0.1 / 100))


@given(st.lists(st.floats(-20, 20), min_size=15, max_size=15))
def test_repair_gives_valid_params(vals):
    eta = repair_eta(np.array(vals))
    SimulatorParams().with_eta(eta).validate()
    assert np.all(eta[10:] >= C.B_MIN)


def test_repair_keeps_valid_vectors_exact():
    eta = DEFAULT_PARAMS.eta
    assert np.array_equal(repair_eta(eta), eta)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_samples_always_valid(seed):
    d = EtaDistribution("N", DEFAULT_PARAMS.eta, (0.5 * np.abs(DEFAULT_PARAMS.eta) + 0.1) ** 2, 2)
    for row in sample_eta_matrix(d, 20, seed):
        DEFAULT_PARAMS.with_eta(row).validate()


# --- simulator-only generation -------------------------------------------------------

def test_simulator_only_exact_when_noiseless():
    d = EtaDistribution.point(DEFAULT_PARAMS, "S")
    (beat,) = simulator_only_generate(d, 1, noise_sigma=0.0, rng_seed=0)
    assert np.array_equal(beat.samples, integrate().z)
    assert beat.label == "S" and beat.source == "simulator"


def test_simulator_only_reproducible():
    d = EtaDistribution("N", DEFAULT_PARAMS.eta, np.full(15, 1e-4), 5)
    a = simulator_only_generate(d, 5, rng_seed=9)
    b = simulator_only_generate(d, 5, rng_seed=9)
    assert a == b


def test_simulator_only_r_peak():
    # z is linear in its forcing, so subtracting the zero-amplitude response leaves the events alone
    drift = integrate(DEFAULT_PARAMS.with_eta(np.r_[DEFAULT_PARAMS.theta, np.zeros(5), DEFAULT_PARAMS.b])).z
    beats = simulator_only_generate(EtaDistribution.point(), 100, 0.05, rng_seed=1)
    assert len(beats) == 100
    for b in beats:
        assert abs(int(np.argmax(b.samples - drift)) - C.R_PEAK_INDEX) <= 10


def test_simulator_only_zero_count():
    assert simulator_only_generate(EtaDistribution.point(), 0) == []


# --- persistence -----------------------------------------------------------------

def test_distribution_round_trip(tmp_path):
    d1 = EtaDistribution("N", DEFAULT_PARAMS.eta, np.linspace(0, 1e-3, 15), 7)
    d2 = EtaDistribution("V", DEFAULT_PARAMS.eta * 1.1, np.full(15, 2e-4), 3)
    path = tmp_path / "dist.txt"
    save_distributions([d1, d2], path)
    back = load_distributions(path)
    for d in (d1, d2):
        got = back[d.class_label]
        assert np.array_equal(got.mean, d.mean) and np.array_equal(got.var, d.var) and got.count == d.count
    assert open(path).readline().strip() == "class,component_name,mean,var"


def test_distribution_bad_line_reports_number(tmp_path):
    text = format_distributions([EtaDistribution.point()]).splitlines()
    text[4] = "N,theta_S,abc,0"
    path = tmp_path / "bad.txt"
    path.write_text("\n".join(text) + "\n")
    with pytest.raises(DataError, match="line 5"):
        load_distributions(path)


def test_distribution_missing_component(tmp_path):
    text = format_distributions([EtaDistribution.point()]).splitlines()
    path = tmp_path / "short.txt"
    path.write_text("\n".join(text[:-3]) + "\n")
    with pytest.raises(DataError):
        load_distributions(path)


def test_fits_csv(tmp_path):
    path = tmp_path / "fits.csv"
    save_fits_csv([fake_fit(DEFAULT_PARAMS.eta)], path, ["100"])
    rows = path.read_text().splitlines()
    assert rows[0].startswith("index,record_id,theta_P")
    assert rows[1].startswith("0,100,")
