import numpy as np
import pytest
from scipy import stats

from sir import config, rfenv


def _pu(powers=(3.0,), priors=(1.0,), dwell=50.0, pos=(3.2, 4.2), r=2.2, ch=0):
    return rfenv.PuNode(position=pos, coverage_radius=r, channel=ch,
                        power_levels=tuple(powers), level_priors=tuple(priors),
                        mean_dwell=dwell)


# --- sample_power_process ---------------------------------------------------

def test_power_process_level_frequencies():
    # ~2000 renewals with geometric dwell: per-level SE ~ 0.014, so the 0.02
    # band is a typical-draw check, not a hard bound; seed fixed accordingly
    pu = _pu(powers=(1.0, 2.0, 3.0, 4.0), priors=(0.25,) * 4, dwell=50.0)
    seq = rfenv.sample_power_process(pu, 100_000, np.random.default_rng(3))
    freq = np.bincount(seq, minlength=4) / len(seq)
    assert np.all(np.abs(freq - 0.25) <= 0.02)


def test_power_process_single_level_constant():
    pu = _pu(powers=(5.0,), priors=(1.0,))
    seq = rfenv.sample_power_process(pu, 1000, np.random.default_rng(1))
    assert np.all(seq == 0)


def test_power_process_unit_dwell_is_iid():
    # mean_dwell=1 means a fresh draw every slot; lag-1 pairs must pass an
    # independence chi-square test at the 1% level
    pu = _pu(powers=(1.0, 2.0, 3.0), priors=(0.2, 0.3, 0.5), dwell=1.0)
    seq = rfenv.sample_power_process(pu, 50_000, np.random.default_rng(2))
    table = np.zeros((3, 3))
    for a, b in zip(seq[:-1], seq[1:]):
        table[a, b] += 1
    _, pvalue, _, _ = stats.chi2_contingency(table)
    assert pvalue > 0.01


def test_power_process_dwell_mean():
    pu = _pu(powers=(1.0, 2.0), priors=(0.5, 0.5), dwell=40.0)
    seq, renewals = rfenv.sample_power_process(
        pu, int(200 * 40), np.random.default_rng(3), return_renewals=True)
    starts = np.flatnonzero(renewals)
    lengths = np.diff(np.concatenate([starts, [len(seq)]]))
    assert abs(lengths.mean() - 40.0) / 40.0 <= 0.15


def test_power_process_zero_horizon_rejected():
    with pytest.raises(ValueError):
        rfenv.sample_power_process(_pu(), 0, np.random.default_rng(0))


# --- sense_window -----------------------------------------------------------

def test_sense_window_noise_only_mean():
    rng = np.random.default_rng(10)
    t = rfenv.sense_window(0.0, 1.0, 100_000, rng)
    assert abs(float(t) - 1.0) <= 0.02


def test_sense_window_mean_three_sigma():
    # E[T] = noise + P, SE = (noise+P)/sqrt(n*draws)
    rng = np.random.default_rng(11)
    for power, noise, n in ((0.0, 1.0, 200), (3.0, 1.0, 500), (2.0, 0.5, 50)):
        draws = np.array([rfenv.sense_window(power, noise, n, rng)
                          for _ in range(10_000)])
        mean = noise + power
        se = draws.std(ddof=1) / np.sqrt(len(draws))
        assert abs(draws.mean() - mean) <= 3 * se, (power, noise, n)


def test_sense_window_variance_matches_closed_form():
    rng = np.random.default_rng(12)
    power, noise, n = 3.0, 1.0, 500
    draws = np.array([rfenv.sense_window(power, noise, n, rng)
                      for _ in range(10_000)])
    want = (noise + power) ** 2 / n
    assert abs(draws.var(ddof=1) - want) / want <= 0.10


def test_sense_window_rejects_bad_args():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        rfenv.sense_window(1.0, 1.0, 0, rng)
    with pytest.raises(ValueError):
        rfenv.sense_window(1.0, 0.0, 10, rng)


# --- received_power_at ------------------------------------------------------

def test_received_power_disk():
    pu = _pu(powers=(2.5,), pos=(0.0, 0.0), r=2.2)
    assert rfenv.received_power_at(pu, 0, (0.0, 0.0)) == 2.5
    assert rfenv.received_power_at(pu, 0, (2.2, 0.0)) == 2.5  # boundary inclusive
    assert rfenv.received_power_at(pu, 0, (3.0, 0.0)) == 0.0


def test_received_power_radially_symmetric():
    pu = _pu(powers=(2.5,), pos=(1.0, -2.0), r=2.0)
    d = 1.7
    vals = [rfenv.received_power_at(pu, 0, (1.0 + d * np.cos(a),
                                             -2.0 + d * np.sin(a)))
            for a in np.linspace(0, 2 * np.pi, 33)]
    assert len(set(vals)) == 1


def test_received_power_level_out_of_range():
    with pytest.raises(ValueError):
        rfenv.received_power_at(_pu(), 1, (0.0, 0.0))


# --- markov channel sets ----------------------------------------------------

def test_channel_set_absorbing_idle():
    env = rfenv.make_channel_set(4, 2, p01=0.0, p11=1.0,
                                 states=np.ones(2, dtype=np.int8))
    rng = np.random.default_rng(20)
    for _ in range(200):
        assert np.all(env.channel_states() == 1)
        rfenv.markov_channel_step(env, rng)


def test_channel_set_stationary_fraction():
    env = rfenv.make_channel_set(1, 1, p01=0.2, p11=0.9,
                                 rng=np.random.default_rng(21))
    rng = np.random.default_rng(22)
    idle = 0
    steps = 100_000
    for _ in range(steps):
        idle += int(env.states[0])
        rfenv.markov_channel_step(env, rng)
    assert abs(idle / steps - 2.0 / 3.0) <= 0.01


def test_channel_set_subsets_share_state():
    env = rfenv.make_channel_set(16, 4, p01=0.2, p11=0.9,
                                 rng=np.random.default_rng(23))
    rng = np.random.default_rng(24)
    for _ in range(500):
        ch = env.channel_states()
        for s in range(4):
            block = ch[env.assignment == s]
            assert np.all(block == block[0])
        rfenv.markov_channel_step(env, rng)


def test_channel_set_u16_is_per_channel():
    env = rfenv.make_channel_set(16, 16, p01=0.5, p11=0.5,
                                 rng=np.random.default_rng(25))
    assert len(env.states) == 16
    assert sorted(env.assignment.tolist()) == list(range(16))


def test_channel_set_rejects_bad_split():
    with pytest.raises(ValueError):
        rfenv.make_channel_set(16, 5, p01=0.2, p11=0.9,
                               rng=np.random.default_rng(0))


# --- mapping dataset --------------------------------------------------------

def test_dataset_no_pus_all_idle():
    sc = rfenv.ScenarioConfig(pus=(), sus=(rfenv.SuTrack((0, 0), (12, 12), 50),),
                              n_channels=2)
    data = rfenv.generate_mapping_dataset(sc, np.random.default_rng(30))
    assert len(data) == 50
    assert all(tuple(s.label_bits) == (0, 0) for s in data)


def test_dataset_track_through_disk_has_two_transitions():
    pu = _pu(pos=(6.0, 6.0), r=2.0)
    sc = rfenv.ScenarioConfig(pus=(pu,),
                              sus=(rfenv.SuTrack((0, 6.0), (12.0, 6.0), 400),))
    data = rfenv.generate_mapping_dataset(sc, np.random.default_rng(31))
    bits = [s.label_bits[0] for s in data]
    flips = sum(1 for a, b in zip(bits[:-1], bits[1:]) if a != b)
    assert flips == 2


def test_dataset_default_scenario_has_six_labels():
    sc = config.default_fig5_scenario()
    data = rfenv.generate_mapping_dataset(sc, np.random.default_rng(32))
    labels = {tuple(s.label_bits) for s in data}
    assert len(labels) == 6


def test_dataset_deterministic():
    sc = config.default_fig5_scenario()
    a = rfenv.generate_mapping_dataset(sc, np.random.default_rng(33))
    b = rfenv.generate_mapping_dataset(sc, np.random.default_rng(33))
    assert len(a) == len(b)
    for sa, sb in zip(a, b):
        assert sa.location == sb.location
        assert np.array_equal(sa.energies, sb.energies)
        assert tuple(sa.label_bits) == tuple(sb.label_bits)


def test_dataset_csv_roundtrip(tmp_path):
    sc = rfenv.ScenarioConfig(pus=(_pu(),),
                              sus=(rfenv.SuTrack((0, 0), (12, 12), 25),))
    data = rfenv.generate_mapping_dataset(sc, np.random.default_rng(34))
    path = tmp_path / "d.csv"
    rfenv.save_dataset_csv(data, path)
    back = rfenv.load_dataset_csv(path)
    assert len(back) == len(data)
    for sa, sb in zip(data, back):
        assert sa.su_id == sb.su_id
        assert sa.location == pytest.approx(sb.location)
        assert np.allclose(sa.energies, sb.energies)
