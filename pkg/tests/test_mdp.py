import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import flat_series, make_episode
from ventwean.errors import ArtifactError
from ventwean.mdp import (
    Action, RewardConfig, build_state, build_transitions, episode_states, extract_action,
    map_sedation_level, read_transitions, reward, reward_components, write_transitions,
)
from ventwean.schema import DRUG_NAMES, FEATURE_INDEX as F, SIGNAL_CENTER, STATE_DIM

CFG = RewardConfig()


def sig(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def state(**kw):
    s = np.zeros(STATE_DIM)
    s[F["heart_rate"]], s[F["respiratory_rate"]], s[F["arterial_ph"]] = 80.0, 18.0, 7.4
    s[F["fio2"]], s[F["spo2"]], s[F["peep_set"]] = 40.0, 96.0, 5.0
    for k, v in kw.items():
        s[F[k]] = v
    return s


# -- sedation mapping -----------------------------------------------------------

def test_zero_dose_is_level_zero():
    assert all(map_sedation_level(d, 0.0, 70.0) == 0 for d in DRUG_NAMES)


def test_large_dose_saturates():
    assert map_sedation_level("propofol", 2.5 * 80 + 1e-9, 80.0) == 3
    assert map_sedation_level("hydromorphone", 1e3, 80.0) == 3


def test_boundary_maps_upward():
    # 1.0 mg/kg/h is the level-1/level-2 edge for propofol.
    assert map_sedation_level("propofol", 80.0, 80.0) == 2
    assert map_sedation_level("propofol", 80.0 - 1e-9, 80.0) == 1


def test_unknown_drug_rejected():
    with pytest.raises(KeyError):
        map_sedation_level("ketamine", 1.0, 80.0)


@given(drug=st.sampled_from(DRUG_NAMES), a=st.floats(0, 1e4), b=st.floats(0, 1e4),
       w=st.floats(20, 200))
def test_sedation_mapping_monotone(drug, a, b, w):
    lo, hi = sorted((a, b))
    assert map_sedation_level(drug, lo, w) <= map_sedation_level(drug, hi, w)


# -- reward ----------------------------------------------------------------------

def test_vitals_term_for_in_range_heart_rate():
    cfg = RewardConfig(stability_ranges={"heart_rate": (60.0, 100.0)})
    s = state(heart_rate=80.0)
    rv, _, _ = reward_components(s, s, cfg)
    assert rv[0] == pytest.approx(cfg.C1 * (sig(20) - sig(-20) + 0.5), abs=1e-12)
    assert rv[0] == pytest.approx(1.5 * cfg.C1, abs=1e-9)


def test_small_fluctuation_is_free():
    cfg = RewardConfig(stability_ranges={"heart_rate": (60.0, 130.0)})
    s0, s1 = state(heart_rate=100.0), state(heart_rate=110.0)
    rv, _, _ = reward_components(s0, s1, cfg)
    bracket = cfg.C1 * (sig(40) - sig(-30) + 0.5)
    assert rv[0] == pytest.approx(bracket, abs=1e-12)


def test_large_fluctuation_penalized():
    cfg = RewardConfig(stability_ranges={"heart_rate": (60.0, 130.0)})
    rv, _, _ = reward_components(state(heart_rate=100.0), state(heart_rate=150.0), cfg)
    bracket = cfg.C1 * (sig(40) - sig(-30) + 0.5)
    assert rv[0] == pytest.approx(bracket - cfg.C2 * (0.5 - 0.2), abs=1e-12)


def test_extubation_with_two_violated_criteria():
    s0 = state(vent_on_flag=1, peep_set=10.0, spo2=85.0, fio2=40.0)
    s1 = state(vent_on_flag=0)
    _, off, on = reward_components(s0, s1, CFG)
    assert off[0] == pytest.approx(CFG.C3 - 2 * CFG.C5, abs=1e-12)
    assert on[0] == 0.0


def test_staying_off_and_on_and_reintubation():
    off0, on0 = state(vent_on_flag=0), state(vent_on_flag=1)
    assert reward_components(off0, off0, CFG)[1][0] == CFG.C4
    assert reward_components(on0, on0, CFG)[2][0] == -CFG.C6
    assert reward_components(off0, on0, CFG)[2][0] == -CFG.C7


def test_criteria_ignored_while_staying_off():
    s = state(vent_on_flag=0, peep_set=12.0, fio2=80.0)
    assert reward_components(s, s, CFG)[1][0] == CFG.C4


def test_zero_signal_fluctuation_guarded():
    cfg = RewardConfig(stability_ranges={"heart_rate": (40.0, 130.0)})
    rv, _, _ = reward_components(state(heart_rate=0.0), state(heart_rate=1e-7), cfg)
    assert np.isfinite(rv[0])


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(a=st.lists(finite, min_size=STATE_DIM, max_size=STATE_DIM),
       b=st.lists(finite, min_size=STATE_DIM, max_size=STATE_DIM),
       on0=st.booleans(), on1=st.booleans())
def test_reward_is_sum_of_components(a, b, on0, on1):
    s0, s1 = np.array(a), np.array(b)
    s0[F["vent_on_flag"]], s1[F["vent_on_flag"]] = on0, on1
    # Independent recomputation of each displayed term.
    rv = 0.0
    for name, (lo, hi) in CFG.stability_ranges.items():
        v, v1 = s0[F[name]], s1[F[name]]
        rv += CFG.C1 * (sig(v - lo) - sig(v - hi) + 0.5)
        rv -= CFG.C2 * max(0.0, abs(v1 - v) / max(abs(v), 1e-6) - 0.2)
    viol = sum(not lo <= s0[F[n]] <= hi for n, (lo, hi) in CFG.extubation_ranges.items())
    off = (CFG.C3 - CFG.C5 * viol if on0 else CFG.C4) if not on1 else 0.0
    on = (-CFG.C6 if on0 else -CFG.C7) if on1 else 0.0
    assert reward(s0, Action(int(on1), 0), s1, CFG) == pytest.approx(rv + off + on, rel=1e-9, abs=1e-9)


@given(v=st.floats(-1e4, 1e4), lo=st.floats(-100, 100), width=st.floats(20, 500))
def test_vitals_bracket_bounds(v, lo, width):
    b = sig(v - lo) - sig(v - lo - width) + 0.5
    cfg = RewardConfig(C2=0.0, C1=1.0, stability_ranges={"heart_rate": (lo, lo + width)})
    s = state(heart_rate=v)
    got = reward_components(s, s, cfg)[0][0]
    assert got == pytest.approx(b, abs=1e-12)
    assert 0.5 - 1e-6 <= got <= 1.5 + 1e-6


@given(fio2=st.floats(0, 100), spo2=st.floats(50, 100), peep=st.floats(0, 25))
def test_extubation_penalty_is_integer_multiple(fio2, spo2, peep):
    s0 = state(vent_on_flag=1, fio2=fio2, spo2=spo2, peep_set=peep)
    off = reward_components(s0, state(vent_on_flag=0), CFG)[1][0]
    k = (CFG.C3 - off) / CFG.C5
    assert k in (0, 1, 2, 3)


def test_invalid_reward_config():
    with pytest.raises(ValueError):
        RewardConfig(gamma=0.0)
    with pytest.raises(ValueError):
        RewardConfig(C5=-1.0)
    with pytest.raises(ValueError):
        RewardConfig(stability_ranges={"heart_rate": (100.0, 60.0)})


def test_reward_hash_tracks_values():
    assert RewardConfig().config_hash() == RewardConfig().config_hash()
    assert RewardConfig(C5=3.0).config_hash() != RewardConfig().config_hash()


# -- states and actions ----------------------------------------------------------

def test_counters_at_intubation():
    ep = make_episode()
    s = build_state(flat_series(ep), ep, 0)
    assert s[F["minutes_into_current_ventilation"]] == 0.0
    assert s[F["num_intubations_so_far"]] == 1.0
    assert s[F["vent_on_flag"]] == 1.0


def test_second_intubation_counted():
    ep = make_episode(vent=[(0.0, 600.0, "extubated"), (900.0, 1700.0, "extubated")])
    s = build_state(flat_series(ep), ep, 100)          # t = 1000
    assert s[F["num_intubations_so_far"]] == 2.0
    assert s[F["minutes_into_current_ventilation"]] == 100.0


def test_golden_state_vector():
    ep = make_episode(vent=[(0.0, 600.0, "extubated"), (900.0, 1700.0, "extubated")],
                      sedation=[("propofol", 40.0, "continuous_rate", 0.0, 500.0)],
                      age=71.0, weight=80.0, gender_flag=0, emergency_flag=1, white_flag=0)
    ser = flat_series(ep, {"rass": -2.0, "vent_mode": 1.0, "respiratory_rate": 35.0})
    # t = 700: off the ventilator 100 min after the first extubation; RR above 30
    # on every step so the last alarm is now.
    s = build_state(ser, ep, 70)
    expected = [71.0, 80.0, 0.0, 1.0, 0.0]
    expected += list(SIGNAL_CENTER)
    expected[6] = 35.0
    expected += [-2.0, 1.0]
    expected += [0.0] * 6                     # infusion stopped at 500
    expected += [0.0, 0.0, 0.0, 100.0, 1.0, 700.0, 0.0]
    np.testing.assert_array_equal(s, np.array(expected))

    s = build_state(ser, ep, 10)               # t = 100, propofol 0.5 mg/kg/h
    assert s[F["propofol_rate"]] == 0.5
    assert s[F["sed_level_current"]] == 1.0


def test_action_without_support_or_drugs():
    ep = make_episode(vent=[(0.0, 100.0, "extubated")], discharge_min=300.0)
    assert extract_action(ep, 20) == Action(0, 0)


def test_action_takes_max_of_concurrent_drugs():
    ep = make_episode(sedation=[("propofol", 40.0, "continuous_rate", 0.0, 300.0),
                                ("midazolam", 12.0, "continuous_rate", 100.0, 300.0)])
    assert extract_action(ep, 12) == Action(1, 3)
    assert extract_action(ep, 5) == Action(1, 1)


def test_bolus_counted_in_its_step():
    ep = make_episode(sedation=[("fentanyl", 100.0, "bolus", 205.0, None)])
    assert extract_action(ep, 20) == Action(1, 3)
    assert extract_action(ep, 21) == Action(1, 0)
    assert extract_action(ep, 19) == Action(1, 0)


def test_extubation_shows_as_vent_off_decision():
    ep = make_episode(vent=[(0.0, 600.0, "extubated")])
    assert extract_action(ep, 58) == Action(1, 0)
    assert extract_action(ep, 59) == Action(0, 0)


def test_action_index_round_trip():
    for k in range(8):
        assert Action.from_index(k).index == k
    with pytest.raises(ValueError):
        Action(2, 0)


# -- transitions -----------------------------------------------------------------

def test_ten_grid_points_give_nine_transitions():
    ep = make_episode(vent=[(0.0, 50.0, "extubated")], discharge_min=100.0)
    ts = build_transitions([ep], [flat_series(ep)])
    assert len(ts) == 9
    assert ts.terminal.tolist() == [False] * 8 + [True]
    assert np.all(np.isfinite(ts.rewards))


def test_golden_three_step_episode():
    ep = make_episode(vent=[(0.0, 15.0, "extubated")], discharge_min=30.0)
    ts = build_transitions([ep], [flat_series(ep)])
    hr, rr, ph = SIGNAL_CENTER[0], SIGNAL_CENTER[1], SIGNAL_CENTER[3]
    vit = 0.1 * ((sig(hr - 40) - sig(hr - 130) + 0.5) + (sig(rr - 4) - sig(rr - 30) + 0.5)
                 + (sig(ph - 7.3) - sig(ph - 7.7) + 0.5))
    assert len(ts) == 2
    assert ts.actions.tolist() == [[1, 0], [0, 0]]
    assert ts.steps.tolist() == [0, 1]
    assert ts.states[:, F["vent_on_flag"]].tolist() == [1.0, 1.0]
    assert ts.next_states[:, F["vent_on_flag"]].tolist() == [1.0, 0.0]
    assert ts.next_states[1, F["minutes_since_last_extubation"]] == 5.0
    np.testing.assert_allclose(ts.rewards, [vit - 0.1, vit + 10.0], rtol=0, atol=1e-12)
    assert ts.terminal.tolist() == [False, True]
    t0 = ts[0]
    assert t0.a_t == Action(1, 0) and t0.admission_id == "A1"


def test_build_transitions_deterministic_and_ordered():
    eps = [make_episode(aid=a, discharge_min=d) for a, d in (("B", 200.0), ("A", 1600.0))]
    sers = [flat_series(e) for e in eps]
    t1, t2 = build_transitions(eps, sers), build_transitions(eps, {e.admission_id: s for e, s in zip(eps, sers)})
    np.testing.assert_array_equal(t1.states, t2.states)
    assert [a for a, _ in t1.by_admission()] == ["B", "A"]
    assert len(t1) == (20 - 1) + (160 - 1)


def test_transition_file_round_trip(tmp_path):
    ep = make_episode(discharge_min=300.0, vent=[(0.0, 200.0, "extubated")])
    ts = build_transitions([ep], [flat_series(ep, {"heart_rate": 91.123456789})])
    path = tmp_path / "t.csv"
    write_transitions(ts, path)
    back = read_transitions(path, expected_reward_hash=CFG.config_hash())
    np.testing.assert_array_equal(back.states, ts.states)
    np.testing.assert_array_equal(back.next_states, ts.next_states)
    np.testing.assert_array_equal(back.rewards, ts.rewards)
    np.testing.assert_array_equal(back.actions, ts.actions)
    assert back.reward_hash == ts.reward_hash


def test_transition_file_refuses_other_reward_config(tmp_path):
    ep = make_episode(discharge_min=100.0, vent=[(0.0, 50.0, "extubated")])
    path = tmp_path / "t.csv"
    write_transitions(build_transitions([ep], [flat_series(ep)]), path)
    with pytest.raises(ArtifactError):
        read_transitions(path, expected_reward_hash=RewardConfig(C3=5.0).config_hash())


def test_states_are_finite_on_simulated_cohort(small_cohort):
    from ventwean.gp_impute import GPOptConfig, impute_episode
    ep = small_cohort[1]
    ser = impute_episode(ep, opt_config=GPOptConfig(max_iter=3, max_observations=100))
    S = episode_states(ser, ep)
    assert S.shape == (len(ser), 32) and np.all(np.isfinite(S))
    assert set(np.unique(S[:, F["sed_level_current"]])) <= {0.0, 1.0, 2.0, 3.0}
