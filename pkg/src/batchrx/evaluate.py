"""Evaluation machinery: critic-value vs survival calibration, the safe
rate, dose-difference-vs-mortality binning, per-timestep dose distribution
comparison, and a rank-correlation summary with a cross-validation
envelope.

All reports are pure functions of (agent checkpoint, cohort, settings) and
are emitted as plain dicts/dataclasses so the CLI can serialize them to
metrics JSON and tidy plot CSVs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .agent import Agent, Hyperparameters, train
from .cohort import (
    N_ACTIONS,
    Cohort,
    Normalizer,
    TransitionBuffer,
    split_cohort,
)

COMPONENT_LABELS = ("liquid", "vaso1", "vaso2", "vaso3", "hydrocort")


def spearman(xs, ys) -> float | None:
    """Rank correlation with average ranks on ties; None when undefined
    (fewer than two points or zero rank variance)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape:
        raise ValueError(f"spearman: lengths differ ({xs.shape} vs {ys.shape})")
    if xs.size < 2:
        return None
    rx = rankdata(xs)
    ry = rankdata(ys)
    if np.std(rx) == 0.0 or np.std(ry) == 0.0:
        return None
    return float(np.corrcoef(rx, ry)[0, 1])


# --- shared plumbing: embeddings and recommendations over a cohort ---

def encode_prefixes(agent: Agent, normalizer: Normalizer,
                    cohort: Cohort) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Embed the history prefix at every (episode, t) of a cohort.

    Returns embeddings (M, H) and the matching (episode_index, t) list, in
    deterministic episode-then-time order.  Prefixes of equal length are
    batched through the recurrent encoder together.
    """
    buffer = TransitionBuffer(cohort, normalizer)
    groups: dict[int, list[int]] = {}
    meta: list[tuple[int, int]] = []
    samples = []
    for flat, (i, t) in enumerate(buffer.index):
        meta.append((i, t))
        s = buffer.get(flat)
        samples.append(s)
        groups.setdefault(s.prefix_length, []).append(flat)
    M = len(samples)
    emb = np.zeros((M, agent.hyper.lstm_hidden))
    for length, flats in groups.items():
        stack_steps = []
        for k in range(length):
            x = np.zeros((len(flats), agent.in_width))
            for row, flat in enumerate(flats):
                s = samples[flat]
                x[row, :s.obs_hist.shape[1]] = s.obs_hist[k]
                x[row, s.obs_hist.shape[1]:] = s.act_hist[k]
            stack_steps.append(x)
        emb[flats] = agent.encode_batch_raw(stack_steps, None)
    return emb, meta


def recommend_on_cohort(agent: Agent, normalizer: Normalizer, cohort: Cohort,
                        seed: int = 0) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]:
    """Agent recommendation at every logged (episode, t), from the same
    history the clinician saw.

    Returns (recommended clinical doses (M,5), logged clinical doses (M,5),
    meta).  Deterministic given (agent, cohort, seed).
    """
    emb, meta = encode_prefixes(agent, normalizer, cohort)
    rng = np.random.default_rng(seed)
    M = emb.shape[0]
    n = agent.hyper.n_candidates
    s_rep = np.repeat(emb, n, axis=0)
    cands = agent.sample_actions(emb, n, rng)
    cands = agent.perturb(s_rep, cands)
    q = agent.q_raw(s_rep, cands).reshape(M, n)
    best = q.argmax(axis=1)
    chosen = cands.reshape(M, n, N_ACTIONS)[np.arange(M), best]
    recommended = normalizer.denormalize_action(chosen)
    logged = np.vstack([cohort.episodes[i].actions[t] for i, t in meta])
    return recommended, logged, meta


def q_on_logged(agent: Agent, normalizer: Normalizer,
                cohort: Cohort) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]:
    """First-critic value of each logged (history, action) pair, plus the
    episode survival flag per pair."""
    emb, meta = encode_prefixes(agent, normalizer, cohort)
    actions = np.vstack([
        normalizer.normalize_action(cohort.episodes[i].actions[t]) for i, t in meta
    ])
    q = agent.q_raw(emb, actions).reshape(-1)
    survived = np.array([cohort.episodes[i].survived for i, _ in meta], dtype=bool)
    return q, survived, meta


# --- calibration ---

@dataclass
class CalibrationBin:
    lo: float
    hi: float
    count: int
    survivors: int

    @property
    def survival_rate(self) -> float | None:
        return self.survivors / self.count if self.count else None

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lo + self.hi)


def bin_q_survival(q: np.ndarray, survived: np.ndarray, n_bins: int = 20,
                   edges: np.ndarray | None = None) -> list[CalibrationBin]:
    """Equal-width bins over the observed value range (or given edges);
    the last bin is right-inclusive so the bins partition every pair."""
    if edges is None:
        lo, hi = float(q.min()), float(q.max())
        if lo == hi:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, q, side="right") - 1, 0, len(edges) - 2)
    bins = []
    for b in range(len(edges) - 1):
        mask = idx == b
        bins.append(CalibrationBin(
            lo=float(edges[b]), hi=float(edges[b + 1]),
            count=int(mask.sum()), survivors=int(survived[mask].sum())))
    return bins


def q_survival_calibration(agent: Agent, normalizer: Normalizer, cohort: Cohort,
                           n_bins: int = 20, min_count: int = 10,
                           edges: np.ndarray | None = None) -> tuple[list[CalibrationBin], float | None]:
    """Survival rate of logged pairs grouped by critic value, plus the rank
    correlation between bin midpoints and survival rates over bins holding
    at least `min_count` pairs (None when fewer than two such bins)."""
    q, survived, _ = q_on_logged(agent, normalizer, cohort)
    bins = bin_q_survival(q, survived, n_bins=n_bins, edges=edges)
    kept = [b for b in bins if b.count >= min_count]
    if len(kept) < 2:
        return bins, None
    rho = spearman([b.midpoint for b in kept], [b.survival_rate for b in kept])
    return bins, rho


def calibration_envelope(cohort: Cohort, hyper: Hyperparameters, folds: int = 5,
                         n_bins: int = 20, min_count: int = 10, seed: int = 0,
                         test_fraction: float = 0.2,
                         progressdelta: int = 0) -> dict:
    """Cross-validated calibration: seeded train/test splits, one agent per
    fold, each fold's curve rebinned on shared edges, min/max envelope.
    """
    fold_data = []
    for k in range(folds):
        tr, te = split_cohort(cohort, test_fraction=test_fraction, seed=seed + k)
        normalizer = Normalizer.fit(tr)
        buffer = TransitionBuffer(tr, normalizer)
        fold_hyper = Hyperparameters(**{**hyper.__dict__, "seed": hyper.seed + k})
        agent, _ = train(buffer, fold_hyper, progressdelta=progressdelta)
        q, survived, _ = q_on_logged(agent, normalizer, te)
        fold_data.append((q, survived))
    q_lo = min(float(q.min()) for q, _ in fold_data)
    q_hi = max(float(q.max()) for q, _ in fold_data)
    if q_lo == q_hi:
        q_hi = q_lo + 1.0
    edges = np.linspace(q_lo, q_hi, n_bins + 1)
    curves = []
    rhos = []
    for q, survived in fold_data:
        bins = bin_q_survival(q, survived, edges=edges)
        kept = [b for b in bins if b.count >= min_count]
        rho = (spearman([b.midpoint for b in kept], [b.survival_rate for b in kept])
               if len(kept) >= 2 else None)
        rhos.append(rho)
        curves.append(bins)
    env_lo, env_hi = [], []
    for b in range(n_bins):
        rates = [c[b].survival_rate for c in curves if c[b].count >= min_count]
        env_lo.append(min(rates) if rates else None)
        env_hi.append(max(rates) if rates else None)
    return {
        "edges": edges.tolist(),
        "folds": [
            [{"lo": b.lo, "hi": b.hi, "count": b.count, "survivors": b.survivors,
              "survival_rate": b.survival_rate} for b in curve]
            for curve in curves
        ],
        "rhos": rhos,
        "envelope_lo": env_lo,
        "envelope_hi": env_hi,
    }


# --- safe rate ---

@dataclass
class SafeRateReport:
    overall: float
    marginal: dict[str, float]
    n_patients: int
    steps_per_patient: list[int]

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "marginal": self.marginal,
            "n_patients": self.n_patients,
            "steps_per_patient": self.steps_per_patient,
        }


def default_epsilons(caps, frac: float = 0.02) -> np.ndarray:
    """Near-zero thresholds for the ratio's undefined zero-dose case."""
    return np.asarray(caps, dtype=np.float64) * frac


def safe_rate(recommended: np.ndarray, logged: np.ndarray,
              meta: list[tuple[int, int]], cohort: Cohort,
              epsilons: np.ndarray, lo: float = 0.7, hi: float = 1.3) -> SafeRateReport:
    """Fraction of patient-steps where every compared dose component is
    inside the (lo, hi) ratio band of the clinician's dose.

    When the clinician's dose is zero the ratio is undefined; such a
    component is safe iff the recommendation stays under its near-zero
    epsilon.  The binary component compares by equality.  The per-patient
    step means are averaged over patients (each patient weighs equally).
    """
    if not meta:
        raise ValueError("safe_rate: empty cohort")
    M = recommended.shape[0]
    comp_safe = np.zeros((M, N_ACTIONS), dtype=bool)
    for j in range(4):
        real = logged[:, j]
        ai = recommended[:, j]
        zero = real == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(zero, np.nan, ai / np.where(zero, 1.0, real))
        comp_safe[:, j] = np.where(zero, ai < epsilons[j],
                                   (ratio > lo) & (ratio < hi))
    comp_safe[:, 4] = recommended[:, 4] == logged[:, 4]
    all_safe = comp_safe.all(axis=1)

    patients = sorted({i for i, _ in meta})
    rows_of = {i: [] for i in patients}
    for row, (i, _) in enumerate(meta):
        rows_of[i].append(row)
    per_patient = np.array([all_safe[rows_of[i]].mean() for i in patients])
    marginal = {}
    for j, name in enumerate(COMPONENT_LABELS):
        marginal[name] = float(np.mean(
            [comp_safe[rows_of[i], j].mean() for i in patients]))
    return SafeRateReport(
        overall=float(per_patient.mean()),
        marginal=marginal,
        n_patients=len(patients),
        steps_per_patient=[len(rows_of[i]) for i in patients],
    )


# --- dose difference vs mortality ---

@dataclass
class DoseDiffBin:
    lo: float
    hi: float
    count: int
    deaths: int

    @property
    def mortality(self) -> float | None:
        return self.deaths / self.count if self.count else None


def dose_difference_mortality(recommended: np.ndarray, logged: np.ndarray,
                              meta: list[tuple[int, int]], cohort: Cohort,
                              action_index: int,
                              bin_edges: np.ndarray | None = None,
                              n_bins: int = 9) -> list[DoseDiffBin]:
    """Bin patient-steps by (recommended - logged) dose in clinical units
    for one continuous component; per-bin mortality is the death rate of
    the contributing episodes (step-weighted)."""
    diff = recommended[:, action_index] - logged[:, action_index]
    died = np.array([not cohort.episodes[i].survived for i, _ in meta])
    if bin_edges is None:
        lo, hi = float(diff.min()), float(diff.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        bin_edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.searchsorted(bin_edges, diff, side="right") - 1,
                  0, len(bin_edges) - 2)
    out = []
    for b in range(len(bin_edges) - 1):
        mask = idx == b
        out.append(DoseDiffBin(
            lo=float(bin_edges[b]), hi=float(bin_edges[b + 1]),
            count=int(mask.sum()), deaths=int(died[mask].sum())))
    return out


# --- per-timestep dose distribution ---

def dose_distribution(recommended: np.ndarray, logged: np.ndarray,
                      meta: list[tuple[int, int]], epsilons: np.ndarray,
                      episode_length: int = 12) -> list[dict]:
    """Mean dose per timestep per component for the clinician and the
    agent, plus the fraction of patients with a nonzero dose (above the
    component's near-zero epsilon, both policies alike)."""
    eps5 = np.concatenate([epsilons, [0.5]])
    rows = []
    meta_t = np.array([t for _, t in meta])
    for t in range(episode_length):
        mask = meta_t == t
        if not mask.any():
            continue
        for j, name in enumerate(COMPONENT_LABELS):
            rows.append({
                "t": t,
                "component": name,
                "clinician_mean": float(logged[mask, j].mean()),
                "agent_mean": float(recommended[mask, j].mean()),
                "clinician_frac_nonzero": float((logged[mask, j] > eps5[j]).mean()),
                "agent_frac_nonzero": float((recommended[mask, j] > eps5[j]).mean()),
            })
    return rows


# --- serialization helpers ---

def calibration_to_rows(bins: list[CalibrationBin]) -> list[dict]:
    return [
        {"lo": b.lo, "hi": b.hi, "midpoint": b.midpoint, "count": b.count,
         "survivors": b.survivors, "survival_rate": b.survival_rate}
        for b in bins
    ]


def dose_diff_to_rows(bins: list[DoseDiffBin]) -> list[dict]:
    return [
        {"lo": b.lo, "hi": b.hi, "count": b.count, "deaths": b.deaths,
         "mortality": b.mortality}
        for b in bins
    ]


def write_metrics_json(metrics: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_plot_csv(rows: list[dict], path, cols: list[str] | None = None) -> None:
    """Tidy one-row-per-bin/timestep CSV for external plotting."""
    if not rows:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("\n")
        return
    if cols is None:
        cols = list(rows[0].keys())
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
