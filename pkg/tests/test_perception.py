import math

import numpy as np
import pytest

from sir import perception, rfenv

from tests.oracles import grid_search_boundary

FIG3_POWERS = (0.0, 1.0, 2.0, 3.0)  # noise_var 1 -> window means 1,2,3,4
N_WIN = 500


def _window_params(powers=FIG3_POWERS, noise=1.0, n=N_WIN):
    means = noise + np.asarray(powers)
    variances = means ** 2 / n
    return means, variances


# --- binary energy threshold ------------------------------------------------

def test_energy_threshold_half_pfa_is_noise_var():
    assert perception.energy_threshold(0.5, 1.0, 500) == pytest.approx(1.0, abs=1e-12)
    assert perception.energy_threshold(0.5, 2.3, 77) == pytest.approx(2.3, abs=1e-12)


def test_energy_threshold_decreasing_in_pfa():
    ths = [perception.energy_threshold(p, 1.0, 500)
           for p in (0.01, 0.05, 0.1, 0.3, 0.5, 0.9)]
    assert all(a > b for a, b in zip(ths[:-1], ths[1:]))


def test_energy_threshold_rejects_bad_pfa():
    for bad in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValueError):
            perception.energy_threshold(bad, 1.0, 500)


def test_energy_threshold_false_alarm_rate():
    rng = np.random.default_rng(40)
    theta = perception.energy_threshold(0.1, 1.0, 500)
    t = np.array([rfenv.sense_window(0.0, 1.0, 500, rng) for _ in range(10_000)])
    assert abs(np.mean(t > theta) - 0.1) <= 0.015


# --- multi-level thresholds vs grid-search oracle ---------------------------

def test_level_thresholds_equal_variance_midpoint():
    th = perception.level_thresholds((0.0, 2.0), (0.5, 0.5), 1.0, 100,
                                     variances=(0.04, 0.04))
    assert th[0] == pytest.approx(2.0, abs=1e-9)  # midpoint of means 1 and 3


def test_level_thresholds_match_posterior_grid_search():
    means, variances = _window_params()
    th = perception.level_thresholds(FIG3_POWERS, (0.25,) * 4, 1.0, N_WIN)
    assert th.shape == (3,)
    for i in range(3):
        want = grid_search_boundary(means[i], variances[i], 0.25,
                                    means[i + 1], variances[i + 1], 0.25)
        assert abs(th[i] - want) <= 1e-6, f"boundary {i}"


def test_level_thresholds_unequal_priors_against_oracle():
    priors = (0.1, 0.2, 0.3, 0.4)
    means, variances = _window_params()
    th = perception.level_thresholds(FIG3_POWERS, priors, 1.0, N_WIN)
    for i in range(3):
        want = grid_search_boundary(means[i], variances[i], priors[i],
                                    means[i + 1], variances[i + 1], priors[i + 1])
        assert abs(th[i] - want) <= 1e-6


def test_level_thresholds_reject_duplicate_powers():
    with pytest.raises(ValueError):
        perception.level_thresholds((1.0, 1.0), (0.5, 0.5), 1.0, 100)


def test_threshold_classification_equals_argmax_posterior():
    rng = np.random.default_rng(41)
    means, variances = _window_params()
    th = perception.level_thresholds(FIG3_POWERS, (0.25,) * 4, 1.0, N_WIN)
    levels = rng.integers(0, 4, size=10_000)
    t = np.array([rfenv.sense_window(FIG3_POWERS[l], 1.0, N_WIN, rng)
                  for l in levels])
    by_threshold = perception.classify_levels(t, th)
    logpost = (-0.5 * (t[:, None] - means) ** 2 / variances
               - 0.5 * np.log(variances))  # equal priors drop out
    assert np.array_equal(by_threshold, np.argmax(logpost, axis=1))


# --- nonparametric mixture --------------------------------------------------

def test_dp_mixture_recovers_four_components():
    rng = np.random.default_rng(42)
    truth = np.array([1.0, 2.0, 3.0, 4.0])
    x = np.concatenate([rng.normal(m, 0.1, 500) for m in truth])
    fit = perception.fit_dp_mixture(x, rng=np.random.default_rng(43))
    assert fit.k == 4
    assert np.all(np.abs(fit.gmm.means - truth) <= 0.05)


def test_dp_mixture_single_atom():
    x = np.full(200, 2.5)
    fit = perception.fit_dp_mixture(x, rng=np.random.default_rng(44))
    assert fit.k == 1


def test_dp_mixture_weights_and_ownership():
    rng = np.random.default_rng(45)
    x = np.concatenate([rng.normal(0.0, 0.2, 300), rng.normal(5.0, 0.2, 300)])
    fit = perception.fit_dp_mixture(x, rng=np.random.default_rng(46))
    assert abs(fit.gmm.weights.sum() - 1.0) <= 1e-6
    counts = np.bincount(fit.assignments, minlength=fit.k)
    assert np.all(counts[:fit.k] >= 1)
    assert np.all(np.diff(fit.gmm.means) > 0)


def test_dp_mixture_refuses_tiny_or_bad_input():
    with pytest.raises(ValueError):
        perception.fit_dp_mixture(np.ones(49), rng=np.random.default_rng(0))
    bad = np.ones(100)
    bad[3] = np.nan
    with pytest.raises(ValueError):
        perception.fit_dp_mixture(bad, rng=np.random.default_rng(0))


# --- fixed-size EM mixture --------------------------------------------------

def test_em_single_component_is_sample_moments():
    rng = np.random.default_rng(47)
    x = rng.normal(3.0, 2.0, 400)
    fit, _ = perception.fit_em_mixture(x, 1)
    assert fit.means[0] == pytest.approx(x.mean(), abs=1e-9)
    assert fit.variances[0] == pytest.approx(x.var(), rel=1e-6)  # biased form


def test_em_loglik_nondecreasing():
    rng = np.random.default_rng(48)
    x = np.concatenate([rng.normal(0, 1, 150), rng.normal(4, 0.5, 150)])
    _, hist = perception.fit_em_mixture(x, 2, rng=np.random.default_rng(49))
    assert np.all(np.diff(hist) >= -1e-9)


def test_em_recovers_four_components():
    rng = np.random.default_rng(50)
    truth = np.array([1.0, 2.0, 3.0, 4.0])
    x = np.concatenate([rng.normal(m, 0.1, 500) for m in truth])
    fit, _ = perception.fit_em_mixture(x, 4, rng=np.random.default_rng(51))
    assert np.all(np.abs(fit.means - truth) <= 0.05)


def test_em_rejects_more_components_than_samples():
    with pytest.raises(ValueError):
        perception.fit_em_mixture(np.arange(3.0), 4)


# --- mean shift ---------------------------------------------------------

def test_mean_shift_two_clumps():
    rng = np.random.default_rng(52)
    x = np.concatenate([rng.normal(0.0, 0.05, 300), rng.normal(10.0, 0.05, 300)])
    fit, modes = perception.fit_mean_shift(x, bandwidth=1.0)
    assert len(modes) == 2
    assert abs(modes[0] - 0.0) <= 0.1 and abs(modes[1] - 10.0) <= 0.1


def test_mean_shift_full_smoothing_single_mode():
    rng = np.random.default_rng(53)
    x = rng.uniform(0, 3, 200)
    _, modes = perception.fit_mean_shift(x, bandwidth=5.0)
    assert len(modes) == 1


def test_mean_shift_ascending_means():
    rng = np.random.default_rng(54)
    x = np.concatenate([rng.normal(m, 0.2, 200) for m in (1.0, 3.0, 6.0)])
    fit, _ = perception.fit_mean_shift(x)
    assert np.all(np.diff(fit.means) > 0)


# --- dwell estimation ---------------------------------------------------

def test_dwell_alternating_sequence():
    labels = np.array([0, 1] * 500)
    dw = perception.estimate_dwell(labels)
    assert np.allclose(dw.mean_dwell, 1.0)


def test_dwell_constant_sequence_censored():
    dw = perception.estimate_dwell(np.zeros(250, dtype=int))
    assert dw.mean_dwell[0] == pytest.approx(250.0)


def test_dwell_recovers_geometric_mean():
    # alternating levels with geometric run lengths, mean 50: ~100 runs per
    # level over 1e4 slots, so the 10% band is ~1.4 sigma; seed chosen typical
    rng = np.random.default_rng(60)
    labels = []
    lvl = 0
    while len(labels) < 10_000:
        labels.extend([lvl] * int(rng.geometric(1.0 / 50.0)))
        lvl = 1 - lvl
    dw = perception.estimate_dwell(np.array(labels[:10_000]), k=2)
    assert np.all(np.abs(dw.mean_dwell - 50.0) / 50.0 <= 0.10)


# --- prediction ----------------------------------------------------------

def _fit_1234(var=0.01):
    return perception.GmmFit(weights=np.full(4, 0.25),
                             means=np.array([1.0, 2.0, 3.0, 4.0]),
                             variances=np.full(4, var))


def test_predict_level_nearest_mean():
    pred = perception.predict_level(_fit_1234(), 1.0)
    assert pred.level == 0
    assert pred.posterior.argmax() == 0


def test_predict_level_tie_goes_low():
    pred = perception.predict_level(_fit_1234(), 1.5)
    assert pred.level == 0
    assert pred.posterior[0] == pytest.approx(pred.posterior[1], rel=1e-9)


def test_predict_level_posterior_normalized_and_scale_free():
    fit = _fit_1234(var=0.5)
    pred = perception.predict_level(fit, 2.2)
    assert pred.posterior.sum() == pytest.approx(1.0, abs=1e-9)
    # same posterior computed from unnormalized weights (common factor 7)
    w = np.full(4, 0.25) * 7.0
    like = w * np.exp(-0.5 * (2.2 - fit.means) ** 2 / fit.variances) \
        / np.sqrt(fit.variances)
    assert np.allclose(pred.posterior, like / like.sum(), atol=1e-9)


def test_predict_level_rejects_nonfinite():
    with pytest.raises(ValueError):
        perception.predict_level(_fit_1234(), float("nan"))


def test_predict_sequence_with_dwell_smoothing_beats_pointwise():
    # slow-switching truth: chain smoothing must not hurt on average
    rng = np.random.default_rng(56)
    pu = rfenv.PuNode(position=(0, 0), coverage_radius=1.0, channel=0,
                      power_levels=FIG3_POWERS, level_priors=(0.25,) * 4,
                      mean_dwell=100.0)
    levels = rfenv.sample_power_process(pu, 1500, rng)
    t = np.array([rfenv.sense_window(FIG3_POWERS[l], 1.0, 60, rng)
                  for l in levels])
    gmm, dwell = perception.oracle_fit(FIG3_POWERS, (0.25,) * 4, 1.0, 60,
                                       mean_dwell=100.0)
    smoothed, _ = perception.predict_sequence(gmm, t, dwell=dwell)
    raw, _ = perception.predict_sequence(gmm, t, smooth=False)
    acc_s = perception.level_accuracy(smoothed, levels)
    acc_r = perception.level_accuracy(raw, levels)
    assert acc_s >= acc_r - 0.01


# --- accuracy metric ------------------------------------------------------

def test_level_accuracy_identical_and_complement():
    a = np.array([0, 1, 1, 0, 1])
    assert perception.level_accuracy(a, a) == 1.0
    assert perception.level_accuracy(1 - a, a) == 0.0


def test_level_accuracy_uniform_random_quarter():
    rng = np.random.default_rng(57)
    pred = rng.integers(0, 4, 10_000)
    true = rng.integers(0, 4, 10_000)
    assert abs(perception.level_accuracy(pred, true) - 0.25) <= 0.02


def test_level_accuracy_length_mismatch():
    with pytest.raises(ValueError):
        perception.level_accuracy(np.zeros(3), np.zeros(4))


# --- known-model reference fit --------------------------------------------

def test_oracle_fit_moments():
    gmm, dwell = perception.oracle_fit(FIG3_POWERS, (0.25,) * 4, 1.0, N_WIN,
                                       mean_dwell=200.0)
    means, variances = _window_params()
    assert np.allclose(gmm.means, means)
    assert np.allclose(gmm.variances, variances)
    assert np.allclose(gmm.weights, 0.25)
    assert dwell is not None


def test_fit_toml_roundtrip(tmp_path):
    fit = _fit_1234(var=0.25)
    dwell = perception.DwellModel(np.array([0.9, 0.9, 0.5, 0.0]))
    path = tmp_path / "fit.toml"
    perception.save_fit_toml(path, fit, dwell)
    back, dw = perception.load_fit_toml(path)
    assert np.allclose(back.means, fit.means)
    assert np.allclose(back.weights, fit.weights)
    assert np.allclose(back.variances, fit.variances)
    assert np.allclose(dw.continuation, dwell.continuation)
