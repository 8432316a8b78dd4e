"""Fixed signal, drug and state-feature vocabularies shared by every stage.

The twelve GP-modelled signals and the 32-feature state layout are one
consistent realization; users supplying real data should map their charted
items onto these names.
"""

SCHEMA_VERSION = 1

# (name, units, population center, population scale)
CONTINUOUS_SIGNALS = (
    ("heart_rate", "bpm", 90.0, 15.0),
    ("respiratory_rate", "breaths/min", 20.0, 5.0),
    ("spo2", "%", 95.0, 3.0),
    ("arterial_ph", "pH", 7.35, 0.08),
    ("pao2", "mmHg", 85.0, 20.0),
    ("paco2", "mmHg", 44.0, 7.0),
    ("fio2", "%", 45.0, 15.0),
    ("o2_flow", "L/min", 1.5, 2.0),
    ("peep_set", "cmH2O", 7.0, 4.0),
    ("tidal_volume", "mL", 440.0, 60.0),
    ("mean_bp", "mmHg", 78.0, 10.0),
    ("temperature", "degC", 37.3, 0.6),
)
SIGNAL_NAMES = tuple(s[0] for s in CONTINUOUS_SIGNALS)
SIGNAL_INDEX = {name: i for i, name in enumerate(SIGNAL_NAMES)}
SIGNAL_CENTER = tuple(s[2] for s in CONTINUOUS_SIGNALS)
SIGNAL_SCALE = tuple(s[3] for s in CONTINUOUS_SIGNALS)
N_SIGNALS = len(SIGNAL_NAMES)

# Discrete signals are binned and held forward, never GP-modelled.
DISCRETE_SIGNALS = ("rass", "vent_mode")
DISCRETE_DEFAULTS = {"rass": 0.0, "vent_mode": 0.0}
ALL_SIGNALS = SIGNAL_NAMES + DISCRETE_SIGNALS

# Six sedatives / analgesics. Rates are in the drug's unit per hour; the factor
# converts a weight-normalized rate (unit/kg/h) to propofol-equivalent mg/kg/h.
DRUGS = (
    ("propofol", "mg", 1.0),
    ("fentanyl", "mcg", 0.5),
    ("midazolam", "mg", 20.0),
    ("dexmedetomidine", "mcg", 2.0),
    ("morphine", "mg", 25.0),
    ("hydromorphone", "mg", 75.0),
)
DRUG_NAMES = tuple(d[0] for d in DRUGS)
DRUG_INDEX = {name: i for i, name in enumerate(DRUG_NAMES)}
DRUG_EQUIVALENCE = {d[0]: d[2] for d in DRUGS}

# Lower edges of sedation levels 1, 2, 3 in propofol-equivalent mg/kg/h.
# Bins are half-open [edge_k, edge_{k+1}), so a boundary value maps upward.
SEDATION_EDGES = (0.05, 1.0, 2.5)

DEMOGRAPHIC_FEATURES = ("age", "weight", "gender_flag", "emergency_flag", "white_flag")
DRUG_FEATURES = tuple(f"{d}_rate" for d in DRUG_NAMES)
STATE_FEATURES = (
    DEMOGRAPHIC_FEATURES
    + SIGNAL_NAMES
    + ("rass", "vent_mode_code")
    + DRUG_FEATURES
    + (
        "sed_level_current",
        "vent_on_flag",
        "minutes_into_current_ventilation",
        "minutes_since_last_extubation",
        "num_intubations_so_far",
        "minutes_since_admission",
        "minutes_since_last_vitals_alarm",
    )
)
STATE_DIM = len(STATE_FEATURES)
FEATURE_INDEX = {name: i for i, name in enumerate(STATE_FEATURES)}
assert STATE_DIM == 32

# Column offsets used by vectorized code.
SIGNAL_OFFSET = FEATURE_INDEX["heart_rate"]
DRUG_OFFSET = FEATURE_INDEX["propofol_rate"]

# Joint actions in (vent_bit, sed_level) lexicographic order; the class index of
# an action is 4 * vent_bit + sed_level.
ACTIONS = tuple((v, s) for v in (0, 1) for s in range(4))
N_ACTIONS = len(ACTIONS)

GRID_MINUTES = 10.0
