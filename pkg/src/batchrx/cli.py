"""Operator surface: simulate / train / evaluate / recommend / export-plots.

Every command reads the single JSON config, writes its artifacts under the
output directory, and drops a manifest JSON holding the config hash, seed
and sha256 of each artifact; two runs with equal manifests have
byte-identical outputs.

Exit codes: 0 success, 1 config parse, 2 I/O, 3 data validation,
4 checkpoint mismatch, 5 bad request.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .agent import Agent, AgentPolicy, Hyperparameters, TrainingDiverged, train
from .cohort import (
    CohortValidationError,
    N_ACTIONS,
    Normalizer,
    TransitionBuffer,
    load_cohort,
    load_prefix,
    write_cohort_csv,
)
from .config import ConfigError, RunConfig, load_config
from .nn import CheckpointError
from .simulator import (
    BehaviorPolicyAdapter,
    extrapolation_error,
    generate_cohort,
    monte_carlo_q,
    params_digest,
    sample_prefix_states,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_BAD_REQUEST = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _workers() -> int:
    raw = os.environ.get("BATCHRX_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _ensure_outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(EXIT_IO, f"output directory {out} is not writable: {exc}")
    return out


def _write_manifest(cfg: RunConfig, command: str, outputs: dict[str, Path],
                    extra: dict | None = None) -> Path:
    out = Path(cfg.output_dir)
    manifest = {
        "command": command,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "outputs": {name: _sha256(p) for name, p in sorted(outputs.items())},
    }
    if extra:
        manifest.update(extra)
    path = out / f"{command.replace('-', '_')}_manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_cohort_or_die(path: str):
    try:
        return load_cohort(path)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"cohort file missing: {exc}")
    except CohortValidationError as exc:
        lines = "\n  ".join(exc.diagnostics[:20])
        raise CliError(EXIT_DATA, f"cohort validation failed ({path}):\n  {lines}")


def _load_checkpoint_or_die(path: str) -> tuple[Agent, Normalizer]:
    try:
        agent, normalizer = Agent.load(path)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"checkpoint missing: {exc}")
    except (CheckpointError, KeyError, json.JSONDecodeError, TypeError) as exc:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint mismatch: {exc}")
    if normalizer is None:
        raise CliError(EXIT_CHECKPOINT, f"{path}: sidecar lacks normalization stats")
    return agent, normalizer


# --- commands ---

def cmd_simulate(cfg: RunConfig) -> int:
    _ensure_outdir(cfg)
    workers = _workers()
    train_cohort = generate_cohort(cfg.sim, cfg.n_train_patients, cfg.seed,
                                   workers=workers)
    test_cohort = generate_cohort(cfg.sim, cfg.n_test_patients, cfg.seed + 1,
                                  workers=workers)
    train_path = Path(cfg.resolved_train_csv())
    test_path = Path(cfg.resolved_test_csv())
    train_path.parent.mkdir(parents=True, exist_ok=True)
    test_path.parent.mkdir(parents=True, exist_ok=True)
    n_train = write_cohort_csv(train_cohort, train_path)
    n_test = write_cohort_csv(test_cohort, test_path)
    _write_manifest(cfg, "simulate",
                    {"train_csv": train_path, "test_csv": test_path},
                    extra={"rows": {"train": n_train, "test": n_test},
                           "sim_params_digest": params_digest(cfg.sim)})
    print(f"wrote {train_path} ({n_train} rows), {test_path} ({n_test} rows)")
    return EXIT_OK


def cmd_train(cfg: RunConfig, progressdelta: int = 0) -> int:
    out = _ensure_outdir(cfg)
    cohort = _load_cohort_or_die(cfg.resolved_train_csv())
    if not cohort.episodes:
        raise CliError(EXIT_DATA, "training cohort is empty")
    normalizer = Normalizer.fit(cohort, caps=cfg.sim.caps)
    buffer = TransitionBuffer(cohort, normalizer)
    try:
        agent, log = train(buffer, cfg.hyper, progressdelta=progressdelta)
    except TrainingDiverged as exc:
        raise CliError(EXIT_DATA, f"training aborted: {exc}")
    ckpt = Path(cfg.resolved_checkpoint())
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    agent.save(ckpt, normalizer=normalizer)
    log_path = out / "training_log.json"
    with open(log_path, "w", encoding="utf-8") as fh:
        json.dump(log.to_dict(), fh, sort_keys=True)
        fh.write("\n")
    _write_manifest(cfg, "train",
                    {"checkpoint": ckpt,
                     "checkpoint_sidecar": ckpt.with_suffix(".json"),
                     "training_log": log_path},
                    extra={"epochs": cfg.hyper.epochs, "transitions": len(buffer)})
    print(f"wrote {ckpt} after {cfg.hyper.epochs} epochs over {len(buffer)} transitions")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, checkpoint: str | None = None) -> int:
    out = _ensure_outdir(cfg)
    ckpt = checkpoint or cfg.resolved_checkpoint()
    agent, normalizer = _load_checkpoint_or_die(ckpt)
    cohort = _load_cohort_or_die(cfg.resolved_test_csv())
    if not cohort.episodes:
        raise CliError(EXIT_DATA, "test cohort is empty")
    es = cfg.eval
    epsilons = ev.default_epsilons(normalizer.caps, es.epsilon_frac)

    bins, rho = ev.q_survival_calibration(agent, normalizer, cohort,
                                          n_bins=es.n_bins, min_count=es.min_bin_count)
    recommended, logged, meta = ev.recommend_on_cohort(agent, normalizer, cohort,
                                                       seed=es.eval_seed)
    safe = ev.safe_rate(recommended, logged, meta, cohort, epsilons)
    dose_diff = {
        ev.COMPONENT_LABELS[j]: ev.dose_difference_mortality(
            recommended, logged, meta, cohort, j)
        for j in range(4)
    }
    distribution = ev.dose_distribution(recommended, logged, meta, epsilons)

    metrics = {
        "calibration": {
            "bins": ev.calibration_to_rows(bins),
            "spearman_rho": rho,
        },
        "safe_rate": safe.to_dict(),
        "dose_difference_mortality": {
            name: ev.dose_diff_to_rows(b) for name, b in dose_diff.items()
        },
        "dose_distribution": distribution,
        "zero_dose_epsilons": epsilons.tolist(),
        "n_test_patients": cohort.n_patients,
    }

    if es.folds > 0:
        fold_hyper = Hyperparameters(**{**cfg.hyper.__dict__, "epochs": es.fold_epochs})
        metrics["calibration_envelope"] = ev.calibration_envelope(
            cohort, fold_hyper, folds=es.folds, n_bins=es.n_bins,
            min_count=es.min_bin_count, seed=cfg.seed)

    if es.sim_oracles:
        gamma = agent.hyper.gamma
        policy = AgentPolicy(agent, normalizer)
        behavior = BehaviorPolicyAdapter(cfg.sim)
        q_agent, se_agent = monte_carlo_q(cfg.sim, policy, None,
                                          es.mc_rollouts, cfg.seed + 11, gamma)
        q_beh, se_beh = monte_carlo_q(cfg.sim, behavior, None,
                                      es.mc_rollouts, cfg.seed + 11, gamma)
        prefixes = sample_prefix_states(cfg.sim, es.extrap_states, cfg.seed + 13)
        extrap = extrapolation_error(agent, normalizer, cfg.sim, prefixes,
                                     es.extrap_rollouts, cfg.seed + 17, gamma)
        metrics["monte_carlo"] = {
            "agent_return": q_agent, "agent_se": se_agent,
            "behavior_return": q_beh, "behavior_se": se_beh,
            "rollouts": es.mc_rollouts,
        }
        metrics["extrapolation"] = {
            "mean_abs_error": extrap["mean_abs_error"],
            "states": extrap["states"],
        }

    metrics_path = out / "metrics.json"
    ev.write_metrics_json(metrics, metrics_path)
    plot_paths = _emit_plot_csvs(metrics, out)
    outputs = {"metrics": metrics_path}
    outputs.update(plot_paths)
    _write_manifest(cfg, "evaluate", outputs)
    print(f"wrote {metrics_path} (spearman_rho={rho}, safe_rate={safe.overall:.4f})")
    return EXIT_OK


_CAL_COLS = ["lo", "hi", "midpoint", "count", "survivors", "survival_rate"]
_DIFF_COLS = ["lo", "hi", "count", "deaths", "mortality"]
_DIST_COLS = ["t", "component", "clinician_mean", "agent_mean",
              "clinician_frac_nonzero", "agent_frac_nonzero"]


def _emit_plot_csvs(metrics: dict, out: Path) -> dict[str, Path]:
    paths: dict[str, Path] = {}
    p = out / "plot_calibration.csv"
    ev.write_plot_csv(metrics["calibration"]["bins"], p, cols=_CAL_COLS)
    paths["plot_calibration"] = p
    for name, rows in metrics["dose_difference_mortality"].items():
        p = out / f"plot_dose_diff_{name}.csv"
        ev.write_plot_csv(rows, p, cols=_DIFF_COLS)
        paths[f"plot_dose_diff_{name}"] = p
    p = out / "plot_dose_distribution.csv"
    ev.write_plot_csv(metrics["dose_distribution"], p, cols=_DIST_COLS)
    paths["plot_dose_distribution"] = p
    return paths


def cmd_recommend(checkpoint: str, history_csv: str, seed: int) -> int:
    agent, normalizer = _load_checkpoint_or_die(checkpoint)
    try:
        pid, obs, acts = load_prefix(history_csv)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"history file missing: {exc}")
    except CohortValidationError as exc:
        if "empty prefix" in str(exc) or "no rows" in str(exc):
            raise CliError(EXIT_BAD_REQUEST, f"empty history prefix: {exc}")
        raise CliError(EXIT_DATA, f"history validation failed: {exc}")
    obs_n = normalizer.normalize_obs(obs)
    noop = normalizer.normalize_action(np.zeros(N_ACTIONS))
    # the prefix's own actions are history; the final row's action is the
    # clinician's current entry and is not part of what the policy sees
    prev = np.vstack([noop.reshape(1, -1),
                      normalizer.normalize_action(acts[:-1])]) if obs.shape[0] > 1 \
        else noop.reshape(1, -1)
    emb = agent.encode_history(obs_n, prev)
    rng = np.random.default_rng(seed)
    a_norm = agent.select_action(emb, rng)
    dose = normalizer.denormalize_action(a_norm)
    q_value = float(agent.q_raw(emb, a_norm)[0, 0])
    print(f"patient_id: {pid}")
    print(f"history_steps: {obs.shape[0]}")
    print(f"liquid_ml_2h: {dose[0]:.3f}")
    print(f"vaso1_ug_kg_min: {dose[1]:.5f}")
    print(f"vaso2_u_min: {dose[2]:.5f}")
    print(f"vaso3_ug_kg_min: {dose[3]:.5f}")
    print(f"hydrocortisone: {int(dose[4])}")
    print(f"q_value: {q_value:.6f}")
    return EXIT_OK


def cmd_export_plots(metrics_path: str, out_dir: str) -> int:
    try:
        with open(metrics_path, "r", encoding="utf-8") as fh:
            metrics = json.load(fh)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"metrics file missing: {exc}")
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_BAD_REQUEST,
                       f"{metrics_path}: not a metrics JSON ({exc.msg})")
    if "calibration" not in metrics:
        raise CliError(EXIT_BAD_REQUEST, f"{metrics_path}: not a metrics JSON")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc}")
    paths = _emit_plot_csvs(metrics, out)
    print(f"wrote {len(paths)} plot CSV(s) under {out}")
    return EXIT_OK


# --- entry point ---

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="path to the run config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="batchrx",
        description="offline dosing-policy pipeline: simulate, train, evaluate, recommend")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate synthetic train/test cohort CSVs")
    _add_common(p)

    p = sub.add_parser("train", help="train the agent on the training cohort")
    _add_common(p)
    p.add_argument("--progress", type=int, default=0, metavar="K",
                   help="print a progress line every K epochs")

    p = sub.add_parser("evaluate", help="run the evaluation suite on the test cohort")
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="agent checkpoint (.bxp)")

    p = sub.add_parser("recommend", help="recommend a dose for one patient prefix")
    p.add_argument("--checkpoint", required=True, help="agent checkpoint (.bxp)")
    p.add_argument("--history", required=True, help="one patient's prefix CSV")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export-plots", help="regenerate plot CSVs from a metrics JSON")
    p.add_argument("--metrics", required=True, help="metrics.json from evaluate")
    p.add_argument("--out", required=True, help="directory for the plot CSVs")
    return parser


def _resolve_config(args) -> RunConfig:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc))
    if args.seed is not None:
        explicit_hyper_seed = cfg.hyper.seed != cfg.seed
        cfg.seed = args.seed
        if not explicit_hyper_seed:
            cfg.hyper.seed = args.seed
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(_resolve_config(args))
        if args.command == "train":
            return cmd_train(_resolve_config(args), progressdelta=args.progress)
        if args.command == "evaluate":
            return cmd_evaluate(_resolve_config(args), checkpoint=args.checkpoint)
        if args.command == "recommend":
            return cmd_recommend(args.checkpoint, args.history, args.seed)
        if args.command == "export-plots":
            return cmd_export_plots(args.metrics, args.out)
        raise CliError(EXIT_BAD_REQUEST, f"unknown command {args.command}")
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
