"""Command-line front end.

Stages write under ``<out_dir>/<stage>/`` and read their inputs from the
directories of earlier stages (or explicit paths)::

    ventwean simulate --config run.toml
    ventwean impute --config run.toml
    ventwean build-transitions --config run.toml
    ventwean train --config run.toml --algo fqit
    ventwean extract-policy --config run.toml --model out/train/fqit.npz
    ventwean evaluate --config run.toml --policy out/extract-policy/policy_fqit.npz
    ventwean report --config run.toml
    ventwean pipeline --config run.toml --seed 7

Existing outputs are only replaced with ``--force``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import artifacts
from .cohort import export_episodes, filter_admissions, ingest_episodes, split_train_test
from .config import load_config, to_dict
from .errors import ArtifactError, VentweanError
from .evaluation import build_report, replay_compare
from .fqi import NETWORK, TREES, fqi_train, greedy_action, q_learning_train, write_trace
from .gp_impute import impute_cohort, read_imputed, write_imputed
from .mdp import read_header, read_transitions, write_transitions
from .policy import extract_policy, recommend_batch, write_importances
from .schema import SCHEMA_VERSION
from .simulate import sample_patients

log = logging.getLogger("ventwean")

ALGOS = {"fqit": TREES, "nfq": NETWORK, "qlearn": NETWORK}
# Wall-clock measurements; everything else a run writes is reproducible.
TIMING_FILE = os.path.join("report", "timing.json")


class Stage:
    def __init__(self, cfg, force=False):
        self.cfg = cfg
        self.out = cfg.run.out_dir
        self.force = force

    def path(self, stage, name):
        return os.path.join(self.out, stage, name)

    def target(self, stage, name):
        p = self.path(stage, name)
        if os.path.exists(p) and not self.force:
            raise ArtifactError(f"{p} exists; pass --force to overwrite")
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def header(self):
        return [f"config_hash={self.cfg.config_hash()}", f"seed={self.cfg.seed}"]

    def require(self, path):
        if not os.path.exists(path):
            raise ArtifactError(f"missing input {path}; run the producing stage first")
        return path


# ------------------------------------------------------------------ stages

def cmd_simulate(st, args):
    from .simulate import simulate_cohort

    episodes = simulate_cohort(st.cfg.sim_config())
    for name in ("episodes.csv", "samples.csv", "events.csv"):
        st.target("simulate", name)
    export_episodes(episodes, os.path.join(st.out, "simulate"), st.header())
    log.info("simulated %d admissions", len(episodes))


def cmd_ingest(st, args):
    episodes = ingest_episodes(args.input)
    for name in ("episodes.csv", "samples.csv", "events.csv"):
        st.target("ingest", name)
    export_episodes(episodes, os.path.join(st.out, "ingest"), st.header())
    log.info("ingested %d admissions from %s", len(episodes), args.input)


def _episode_dir(st, args):
    if getattr(args, "episodes", None):
        return args.episodes
    ingest = os.path.join(st.out, "ingest")
    return ingest if os.path.exists(os.path.join(ingest, "episodes.csv")) else os.path.join(st.out, "simulate")


def _included(st, args):
    return filter_admissions(ingest_episodes(st.require(_episode_dir(st, args))))


def cmd_impute(st, args):
    episodes = _included(st, args)
    series = impute_cohort(episodes, st.cfg.gp_config(), threads=st.cfg.run.threads)
    write_imputed(series, st.target("impute", "imputed.csv"), st.header())
    log.info("imputed %d admissions", len(series))


def cmd_build_transitions(st, args):
    episodes = _included(st, args)
    series = {s.admission_id: s for s in read_imputed(st.require(st.path("impute", "imputed.csv")))}
    missing = [e.admission_id for e in episodes if e.admission_id not in series]
    if missing:
        raise ArtifactError(f"no imputed series for {len(missing)} admissions (first: {missing[0]})")
    from .mdp import build_transitions

    train, test = split_train_test(episodes, st.cfg.run.test_fraction, st.cfg.seed)
    rcfg = st.cfg.reward_config()
    for name, part in (("train", train), ("test", test)):
        ts = build_transitions(part, series, rcfg)
        write_transitions(ts, st.target("build-transitions", f"{name}.csv"), st.header())
    with open(st.target("build-transitions", "split.json"), "w", encoding="utf-8") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "train": [e.admission_id for e in train],
                   "test": [e.admission_id for e in test]}, fh, indent=2)
        fh.write("\n")
    log.info("split %d train / %d test admissions", len(train), len(test))


def _transitions(st, name, path=None):
    path = path or st.path("build-transitions", f"{name}.csv")
    return read_transitions(st.require(path), st.cfg.reward_config().config_hash())


def _timing_update(st, entries):
    path = os.path.join(st.out, TIMING_FILE)
    data = {}
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    data.update(entries)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_train(st, args):
    ts = _transitions(st, "train", args.transitions)
    rhash = st.cfg.reward_config().config_hash()
    model_path = st.target("train", f"{args.algo}.npz")
    if args.algo == "qlearn":
        q, trace = q_learning_train(ts, st.cfg.qlearning_config())
        trace_name = "trace_qlearning.csv"
    else:
        q, trace = fqi_train(ts, st.cfg.fqi_config(ALGOS[args.algo]))
        trace_name = f"trace_fqi_{args.algo}.csv"
    write_trace(trace, st.target("train", trace_name))
    artifacts.save_qfunction(q, model_path, rhash, st.cfg.config_hash(), {"algo": args.algo})
    _timing_update(st, {args.algo: {"mean_seconds_per_iteration": trace.mean_seconds(),
                                    "iterations": len(trace)}})
    log.info("trained %s: %d iterations, final mean |dQ| %.4g", args.algo, len(trace), trace.deltas[-1])


def _algo_of(path):
    return os.path.splitext(os.path.basename(path))[0]


def cmd_extract_policy(st, args):
    rhash = st.cfg.reward_config().config_hash()
    q, meta = artifacts.load_qfunction(st.require(args.model), rhash)
    ts = _transitions(st, "train", args.transitions)
    algo = meta.get("algo", _algo_of(args.model))
    policy = extract_policy(q, ts.states, st.cfg.policy_params(),
                            {"model": os.path.basename(args.model), "algo": algo})
    artifacts.save_policy(policy, st.target("extract-policy", f"policy_{algo}.npz"), rhash,
                          st.cfg.config_hash())
    write_importances(policy, st.target("extract-policy", f"importances_{algo}.csv"))


def cmd_evaluate(st, args):
    rhash = st.cfg.reward_config().config_hash()
    policy, meta = artifacts.load_policy(st.require(args.policy), rhash)
    ts = _transitions(st, "test", args.transitions)
    test_ids = set(ts.admission_ids.tolist())
    episodes = [e for e in _included(st, args) if e.admission_id in test_ids]
    algo = meta.get("provenance", {}).get("algo", _algo_of(args.policy))
    out_dir = os.path.join(st.out, "evaluate", algo)
    for name in ("admission_metrics.csv", "group_summary.csv", "accuracy.json", "importances.csv"):
        st.target(os.path.join("evaluate", algo), name)
    build_report(policy, episodes, ts, st.cfg.reward_config(), out_dir, header_lines=st.header())


def cmd_report(st, args):
    """Replay comparison against the clinician policy plus a summary of all runs."""
    rcfg = st.cfg.reward_config()
    rhash = rcfg.config_hash()
    ev = st.cfg.evaluate
    sim = st.cfg.sim_config(n_patients=ev.replay_patients, seed_offset=1_000_003)
    patients = sample_patients(sim)
    policies = {"behavior": None}
    for algo in ALGOS:
        p = st.path("train", f"{algo}.npz")
        if os.path.exists(p):
            q, _ = artifacts.load_qfunction(p, rhash)
            policies[algo] = (lambda qq: (lambda S: greedy_action(qq, S)))(q)
    for algo in ALGOS:
        p = st.path("extract-policy", f"policy_{algo}.npz")
        if os.path.exists(p):
            pol, _ = artifacts.load_policy(p, rhash)
            policies[f"{algo}_distilled"] = (lambda pp: (lambda S: recommend_batch(pp, S)))(pol)
    results = replay_compare(policies, sim, patients, ev.replay_seeds, rcfg)
    report = {"schema_version": SCHEMA_VERSION, "config_hash": st.cfg.config_hash(),
              "reward_hash": rhash, "replay_patients": ev.replay_patients,
              "replay_seeds": ev.replay_seeds, "replay": {}, "evaluation": {}}
    for label, r in results.items():
        report["replay"][label] = {"mean_reintubations": r.mean_reintubations,
                                   "mean_reward": r.mean_reward}
    for algo in ALGOS:
        p = os.path.join(st.out, "evaluate", algo, "accuracy.json")
        if os.path.exists(p):
            with open(p, encoding="utf-8") as fh:
                report["evaluation"][algo] = json.load(fh)
    with open(st.target("report", "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    timing = {}
    tp = os.path.join(st.out, TIMING_FILE)
    if os.path.exists(tp):
        with open(tp, encoding="utf-8") as fh:
            timing = json.load(fh)
    lines = ["# Run report", "", f"config hash `{st.cfg.config_hash()}`, seed {st.cfg.seed}", "",
             "## Simulator replay", "",
             f"{ev.replay_patients} fresh patients, {ev.replay_seeds} noise replicates.", "",
             "| policy | mean reintubations | mean per-step reward |", "|---|---|---|"]
    for label, r in results.items():
        lines.append(f"| {label} | {r.mean_reintubations:.4f} | {r.mean_reward:.5f} |")
    lines += ["", "## Logged test set", ""]
    for algo, acc in report["evaluation"].items():
        lines.append(f"- {algo}: ventilation accuracy {acc['ventilation_accuracy']:.3f}, "
                     f"sedation accuracy {acc['sedation_accuracy']:.3f}, Spearman(group, mean "
                     f"reintubations) {acc['spearman_group_vs_mean_reintubations']}")
    lines += ["", "## Wall time per training iteration", "",
              "Measured on this machine; varies between runs (see `timing.json`).", ""]
    for algo, t in sorted(timing.items()):
        lines.append(f"- {algo}: {t['mean_seconds_per_iteration']:.4f} s over {t['iterations']} iterations")
    if "fqit" in timing and "nfq" in timing and timing["nfq"]["mean_seconds_per_iteration"] > 0:
        ratio = timing["fqit"]["mean_seconds_per_iteration"] / timing["nfq"]["mean_seconds_per_iteration"]
        lines.append(f"- tree refit / warm-started network: {ratio:.2f}x")
    # report.md quotes wall-clock numbers, so it lives next to timing.json.
    with open(st.target("report", "timing.md"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_pipeline(st, args):
    for name, fn, extra in (
        ("simulate", cmd_simulate, {}),
        ("impute", cmd_impute, {}),
        ("build-transitions", cmd_build_transitions, {}),
        ("train fqit", cmd_train, {"algo": "fqit"}),
        ("train nfq", cmd_train, {"algo": "nfq"}),
        ("train qlearn", cmd_train, {"algo": "qlearn"}),
        ("extract-policy fqit", cmd_extract_policy, {"model": st.path("train", "fqit.npz")}),
        ("extract-policy nfq", cmd_extract_policy, {"model": st.path("train", "nfq.npz")}),
        ("evaluate fqit", cmd_evaluate, {"policy": st.path("extract-policy", "policy_fqit.npz")}),
        ("evaluate nfq", cmd_evaluate, {"policy": st.path("extract-policy", "policy_nfq.npz")}),
        ("report", cmd_report, {}),
    ):
        t0 = time.perf_counter()
        ns = argparse.Namespace(episodes=None, transitions=None, **extra)
        fn(st, ns)
        log.info("%s done in %.1fs", name, time.perf_counter() - t0)
    with open(st.target("", "config.json"), "w", encoding="utf-8") as fh:
        json.dump(to_dict(st.cfg, portable=True), fh, indent=2, sort_keys=True, default=list)
        fh.write("\n")


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="ventwean", description="Ventilator weaning batch RL pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration (default: $VENTWEAN_CONFIG)")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", help="override [run] out_dir")
    common.add_argument("--threads", type=int, help="override [run] threads")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="simulate a logged cohort")
    s = sub.add_parser("ingest", parents=[common], help="validate and import episode CSVs")
    s.add_argument("--input", required=True, help="directory with episodes/samples/events CSVs")
    s = sub.add_parser("impute", parents=[common], help="GP-impute included admissions")
    s.add_argument("--episodes", help="episode directory (default: ingest/ or simulate/)")
    s = sub.add_parser("build-transitions", parents=[common], help="split and build MDP transitions")
    s.add_argument("--episodes")
    s = sub.add_parser("train", parents=[common], help="fit a Q-function")
    s.add_argument("--algo", choices=sorted(ALGOS), required=True)
    s.add_argument("--transitions", help="training transitions CSV")
    s = sub.add_parser("extract-policy", parents=[common], help="distill a Q-function into a classifier")
    s.add_argument("--model", required=True)
    s.add_argument("--transitions")
    s = sub.add_parser("evaluate", parents=[common], help="score a policy on the test admissions")
    s.add_argument("--policy", required=True)
    s.add_argument("--transitions")
    s.add_argument("--episodes")
    sub.add_parser("report", parents=[common], help="replay comparison and run summary")
    sub.add_parser("pipeline", parents=[common], help="run every stage")
    return p


COMMANDS = {
    "simulate": cmd_simulate, "ingest": cmd_ingest, "impute": cmd_impute,
    "build-transitions": cmd_build_transitions, "train": cmd_train,
    "extract-policy": cmd_extract_policy, "evaluate": cmd_evaluate, "report": cmd_report,
    "pipeline": cmd_pipeline,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.out or args.threads:
            from dataclasses import replace

            run = cfg.run
            run = replace(run, out_dir=args.out or run.out_dir, threads=args.threads or run.threads)
            cfg = replace(cfg, run=run)
        COMMANDS[args.command](Stage(cfg, args.force), args)
    except (VentweanError, OSError) as exc:
        print(f"ventwean {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
