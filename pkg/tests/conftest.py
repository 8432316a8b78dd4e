import numpy as np
import pytest

from ventwean.cohort import PatientEpisode, SedationEvent, VentilationInterval, VitalsSample
from ventwean.gp_impute import RegularSeries, make_grid
from ventwean.schema import DISCRETE_SIGNALS, SIGNAL_CENTER, SIGNAL_NAMES


def make_episode(aid="A1", vent=((0.0, 1500.0, "extubated"),), samples=(), sedation=(),
                 discharge_min=1800.0, alive=True, **demo):
    kw = dict(age=60.0, weight=80.0, gender_flag=1, emergency_flag=0, white_flag=1)
    kw.update(demo)
    return PatientEpisode(
        admission_id=aid,
        samples=tuple(VitalsSample(*s) for s in samples),
        vent_intervals=tuple(VentilationInterval(*v) for v in vent),
        sedation_events=tuple(SedationEvent(*e) for e in sedation),
        discharged_alive=alive, discharge_min=discharge_min, **kw)


def flat_series(episode, overrides=None):
    """Regular series holding every signal at its population center."""
    grid = make_grid(episode.discharge_min)
    vals = np.tile(np.array(SIGNAL_CENTER + (0.0, 0.0)), (len(grid), 1))
    cols = SIGNAL_NAMES + DISCRETE_SIGNALS
    for name, v in (overrides or {}).items():
        vals[:, cols.index(name)] = v
    return RegularSeries(episode.admission_id, grid, vals)


@pytest.fixture
def episode_factory():
    return make_episode


@pytest.fixture(scope="session")
def small_cohort():
    from ventwean.simulate import SimConfig, simulate_cohort
    return simulate_cohort(SimConfig(n_patients=12, seed=5))


def make_transitions(states, actions, rewards=None, aid="A1", next_states=None, terminal=None):
    """TransitionSet for one admission from raw arrays."""
    from ventwean.mdp import TransitionSet

    states = np.atleast_2d(np.asarray(states, dtype=float))
    n = len(states)
    ids = np.empty(n, dtype=object)
    ids[:] = aid
    return TransitionSet(
        ids, np.arange(n), states, np.asarray(actions, dtype=int).reshape(n, 2),
        states.copy() if next_states is None else np.asarray(next_states, dtype=float),
        np.zeros(n) if rewards is None else np.asarray(rewards, dtype=float),
        np.zeros(n, bool) if terminal is None else np.asarray(terminal, bool))
