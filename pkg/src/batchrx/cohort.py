"""Patient-trajectory data model: the 41-feature observation schema, the
five-component dose action, CSV ingestion with validation and imputation,
reward labeling, normalization, and the transition buffer that training
samples from.

Cohort CSV schema (header mandatory, UTF-8), one row per (patient, step):

    patient_id, t, <41 features in FEATURE_NAMES order>,
    act_liquid, act_vaso1, act_vaso2, act_vaso3, act_hydrocort,
    done, survived

with t in {0, ..., 11} consecutive from 0 within a patient.  Rewards are
not stored; they are labeled on load from adjacent observations plus the
terminal survival flag.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

# Observation layout: demographics (3), comorbidity burden (1), vitals (6),
# labs (24), organ-function score, urine output, and the five previous-
# interval intervention summaries.
FEATURE_NAMES: tuple[str, ...] = (
    "gender", "age", "ethnicity",
    "elixhauser",
    "heart_rate", "map", "temperature", "resp_rate", "spo2", "gcs",
    "wbc", "neutrophils", "lymphocytes", "platelets", "hemoglobin",
    "alt", "ast", "total_bilirubin", "bun", "creatinine",
    "albumin", "glucose", "potassium", "sodium", "calcium",
    "chloride", "ph", "pao2", "paco2", "bicarbonate",
    "pao2_fio2", "lactate", "pt", "aptt",
    "sofa",
    "urine_output",
    "prev_fluid", "prev_vaso1", "prev_vaso2", "prev_vaso3", "prev_hydrocort",
)
N_FEATURES = len(FEATURE_NAMES)  # 41

ACTION_NAMES: tuple[str, ...] = (
    "act_liquid", "act_vaso1", "act_vaso2", "act_vaso3", "act_hydrocort")
N_ACTIONS = len(ACTION_NAMES)

CSV_COLUMNS: tuple[str, ...] = (
    "patient_id", "t", *FEATURE_NAMES, *ACTION_NAMES, "done", "survived")

MAX_EPISODE_STEPS = 12

IDX_SOFA = FEATURE_NAMES.index("sofa")
IDX_LACTATE = FEATURE_NAMES.index("lactate")
IDX_MAP = FEATURE_NAMES.index("map")
IDX_GCS = FEATURE_NAMES.index("gcs")

# Reward shaping constants: standing organ-dysfunction penalty, penalty on
# worsening SOFA, and a saturating penalty on rising lactate.
REWARD_C0 = -0.1
REWARD_C1 = -1.0
REWARD_C2 = -2.0
TERMINAL_REWARD = 25.0

# Per-action physiologic ceilings used for validation, normalization and
# clamping: mL/2h, ug/kg/min, U/min, ug/kg/min.  Generous by design.
DEFAULT_DOSE_CAPS = (2000.0, 2.0, 0.2, 2.0)


class CohortValidationError(ValueError):
    """Structural problems found while ingesting a cohort CSV."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        preview = "; ".join(diagnostics[:5])
        more = f" (+{len(diagnostics) - 5} more)" if len(diagnostics) > 5 else ""
        super().__init__(f"{len(diagnostics)} validation error(s): {preview}{more}")


@dataclass
class Episode:
    """One patient's trajectory: per-step observations, actions and rewards."""

    patient_id: str
    observations: np.ndarray  # (L, 41)
    actions: np.ndarray       # (L, 5) clinical units
    rewards: np.ndarray       # (L,)
    survived: bool

    @property
    def length(self) -> int:
        return self.observations.shape[0]


@dataclass
class Cohort:
    episodes: list[Episode]
    warnings: list[str] = field(default_factory=list)

    @property
    def n_patients(self) -> int:
        return len(self.episodes)

    @property
    def n_steps(self) -> int:
        return sum(ep.length for ep in self.episodes)


def compute_reward(obs_t: np.ndarray, obs_next: np.ndarray,
                   c0: float = REWARD_C0, c1: float = REWARD_C1,
                   c2: float = REWARD_C2) -> float:
    """Intermediate reward from adjacent observations: a standing SOFA
    penalty plus penalties on the SOFA and (tanh-saturated) lactate deltas."""
    sofa_t = obs_t[IDX_SOFA]
    sofa_n = obs_next[IDX_SOFA]
    lact_t = obs_t[IDX_LACTATE]
    lact_n = obs_next[IDX_LACTATE]
    return c0 * sofa_t + c1 * (sofa_n - sofa_t) + c2 * math.tanh(lact_n - lact_t)


def terminal_reward(survived: bool) -> float:
    return TERMINAL_REWARD if survived else -TERMINAL_REWARD


def label_rewards(observations: np.ndarray, survived: bool) -> np.ndarray:
    """Per-step rewards: intermediate deltas for all but the last step,
    the survival outcome at the last."""
    L = observations.shape[0]
    rewards = np.zeros(L)
    for t in range(L - 1):
        rewards[t] = compute_reward(observations[t], observations[t + 1])
    rewards[L - 1] = terminal_reward(survived)
    return rewards


# --- CSV ingestion ---

def _parse_float(text: str) -> float:
    text = text.strip()
    if text == "" or text.lower() in ("nan", "na"):
        return math.nan
    return float(text)


def load_cohort(path, caps: tuple[float, ...] = DEFAULT_DOSE_CAPS) -> Cohort:
    """Read and validate a cohort CSV.

    Structural errors (missing columns, non-monotone or non-contiguous
    timesteps, episodes over 12 steps, negative or over-cap doses, bad
    flags, out-of-range SOFA/GCS) are collected with their row numbers and
    reject the whole file.  Missing feature values are imputed by forward
    fill within the episode and cohort-median fill after, with counts
    reported in the cohort warnings.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return Cohort(episodes=[], warnings=["empty cohort file (no header)"])
        header = [h.strip() for h in header]
        if header != list(CSV_COLUMNS):
            missing = sorted(set(CSV_COLUMNS) - set(header))
            extra = sorted(set(header) - set(CSV_COLUMNS))
            problems = []
            if missing:
                problems.append(f"missing column(s) {missing}")
            if extra:
                problems.append(f"unexpected column(s) {extra}")
            if not problems:
                problems.append("columns present but out of documented order")
            raise CohortValidationError([f"header: {p}" for p in problems])
        rows = list(reader)

    if not rows:
        return Cohort(episodes=[], warnings=["empty cohort file (header only)"])

    diagnostics: list[str] = []
    # patient_id -> list of (row_number, t, features, actions, done, survived)
    by_patient: dict[str, list] = {}
    order: list[str] = []
    n_cols = len(CSV_COLUMNS)
    for line_no, row in enumerate(rows, start=2):
        if len(row) != n_cols:
            diagnostics.append(f"row {line_no}: {len(row)} fields, expected {n_cols}")
            continue
        pid = row[0].strip()
        if not pid:
            diagnostics.append(f"row {line_no}: empty patient_id")
            continue
        try:
            t = int(row[1])
        except ValueError:
            diagnostics.append(f"row {line_no}: column 't': not an integer ({row[1]!r})")
            continue
        if not 0 <= t < MAX_EPISODE_STEPS:
            diagnostics.append(f"row {line_no}: column 't': {t} outside 0..{MAX_EPISODE_STEPS - 1}")
            continue
        feats = np.empty(N_FEATURES)
        row_ok = True
        for j, name in enumerate(FEATURE_NAMES):
            try:
                feats[j] = _parse_float(row[2 + j])
            except ValueError:
                diagnostics.append(f"row {line_no}: column {name!r}: not numeric ({row[2 + j]!r})")
                row_ok = False
        acts = np.empty(N_ACTIONS)
        for j, name in enumerate(ACTION_NAMES):
            try:
                acts[j] = _parse_float(row[2 + N_FEATURES + j])
            except ValueError:
                diagnostics.append(
                    f"row {line_no}: column {name!r}: not numeric "
                    f"({row[2 + N_FEATURES + j]!r})")
                row_ok = False
        if not row_ok:
            continue
        infinite = ~np.isfinite(feats) & ~np.isnan(feats)
        if np.any(infinite):
            j = int(np.where(infinite)[0][0])
            diagnostics.append(
                f"row {line_no}: column {FEATURE_NAMES[j]!r}: non-finite value")
            continue
        if np.any(np.isnan(acts)):
            j = int(np.where(np.isnan(acts))[0][0])
            diagnostics.append(f"row {line_no}: column {ACTION_NAMES[j]!r}: missing dose")
            continue
        for j in range(4):
            if acts[j] < 0.0:
                diagnostics.append(
                    f"row {line_no}: column {ACTION_NAMES[j]!r}: negative dose {acts[j]}")
            elif acts[j] > caps[j]:
                diagnostics.append(
                    f"row {line_no}: column {ACTION_NAMES[j]!r}: dose {acts[j]} "
                    f"exceeds cap {caps[j]}")
        if acts[4] not in (0.0, 1.0):
            diagnostics.append(
                f"row {line_no}: column 'act_hydrocort': {acts[4]} not in {{0,1}}")
        done_txt = row[2 + N_FEATURES + N_ACTIONS].strip()
        surv_txt = row[3 + N_FEATURES + N_ACTIONS].strip()
        if done_txt not in ("0", "1"):
            diagnostics.append(f"row {line_no}: column 'done': {done_txt!r} not in {{0,1}}")
            continue
        if surv_txt not in ("0", "1"):
            diagnostics.append(f"row {line_no}: column 'survived': {surv_txt!r} not in {{0,1}}")
            continue
        sofa = feats[IDX_SOFA]
        if not np.isnan(sofa) and not 0.0 <= sofa <= 24.0:
            diagnostics.append(f"row {line_no}: column 'sofa': {sofa} outside [0, 24]")
        gcs = feats[IDX_GCS]
        if not np.isnan(gcs) and not 3.0 <= gcs <= 15.0:
            diagnostics.append(f"row {line_no}: column 'gcs': {gcs} outside [3, 15]")
        if pid not in by_patient:
            by_patient[pid] = []
            order.append(pid)
        by_patient[pid].append((line_no, t, feats, acts, done_txt == "1", surv_txt == "1"))

    # Per-patient structure: steps sorted by t, contiguous from 0, at most 12,
    # done exactly on the last row, constant survival flag.
    episodes_raw = []
    for pid in order:
        steps = sorted(by_patient[pid], key=lambda s: s[1])
        ts = [s[1] for s in steps]
        first_row = steps[0][0]
        if len(set(ts)) != len(ts):
            diagnostics.append(f"row {first_row}: patient {pid!r}: duplicate timestep values")
            continue
        if ts != list(range(len(ts))):
            diagnostics.append(
                f"row {first_row}: patient {pid!r}: timesteps {ts} not consecutive from 0")
            continue
        if len(ts) > MAX_EPISODE_STEPS:
            diagnostics.append(
                f"row {first_row}: patient {pid!r}: {len(ts)} steps exceed {MAX_EPISODE_STEPS}")
            continue
        dones = [s[4] for s in steps]
        if dones != [False] * (len(steps) - 1) + [True]:
            diagnostics.append(
                f"row {first_row}: patient {pid!r}: 'done' must be 1 exactly on the last step")
            continue
        survs = {s[5] for s in steps}
        if len(survs) != 1:
            diagnostics.append(
                f"row {first_row}: patient {pid!r}: 'survived' flag not constant")
            continue
        episodes_raw.append((pid, steps, survs.pop()))

    if diagnostics:
        raise CohortValidationError(diagnostics)

    # Imputation: forward fill within an episode, cohort-median fill after.
    warnings: list[str] = []
    all_feats = np.vstack([s[2] for _, steps, _ in episodes_raw for s in steps])
    n_missing = int(np.isnan(all_feats).sum())
    with np.errstate(all="ignore"):
        medians = np.nanmedian(all_feats, axis=0)
    medians = np.where(np.isnan(medians), 0.0, medians)

    episodes = []
    for pid, steps, survived in episodes_raw:
        obs = np.vstack([s[2] for s in steps])
        for j in range(N_FEATURES):
            col = obs[:, j]
            for t in range(1, len(col)):
                if np.isnan(col[t]):
                    col[t] = col[t - 1]
            col[np.isnan(col)] = medians[j]
        acts = np.vstack([s[3] for s in steps])
        rewards = label_rewards(obs, survived)
        episodes.append(Episode(pid, obs, acts, rewards, survived))

    if n_missing:
        warnings.append(f"imputed {n_missing} missing feature value(s)")
    return Cohort(episodes=episodes, warnings=warnings)


def load_prefix(path) -> tuple[str, np.ndarray, np.ndarray]:
    """Read one patient's history prefix in the cohort schema.

    A prefix need not be a finished episode, so the done/survived flags are
    ignored.  Returns (patient_id, observations (K, 41), actions (K, 5))
    where the last row's action is the one about to be superseded by a
    recommendation; earlier actions form the treatment history.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortValidationError(["empty prefix file"]) from None
        if [h.strip() for h in header] != list(CSV_COLUMNS):
            raise CohortValidationError(["header: prefix must use the cohort CSV schema"])
        rows = list(reader)
    if not rows:
        raise CohortValidationError(["prefix file has a header but no rows"])
    diagnostics: list[str] = []
    pids = {row[0].strip() for row in rows}
    if len(pids) != 1:
        diagnostics.append(f"prefix holds {len(pids)} patients, expected 1")
    parsed = []
    for line_no, row in enumerate(rows, start=2):
        if len(row) != len(CSV_COLUMNS):
            diagnostics.append(f"row {line_no}: {len(row)} fields, expected {len(CSV_COLUMNS)}")
            continue
        try:
            t = int(row[1])
            feats = np.array([_parse_float(row[2 + j]) for j in range(N_FEATURES)])
            acts = np.array([_parse_float(row[2 + N_FEATURES + j]) for j in range(N_ACTIONS)])
        except ValueError as exc:
            diagnostics.append(f"row {line_no}: {exc}")
            continue
        if np.any(np.isnan(feats)) or np.any(np.isnan(acts)):
            diagnostics.append(f"row {line_no}: missing value in prefix")
            continue
        parsed.append((t, feats, acts))
    if diagnostics:
        raise CohortValidationError(diagnostics)
    parsed.sort(key=lambda p: p[0])
    ts = [p[0] for p in parsed]
    if ts != list(range(len(ts))):
        raise CohortValidationError([f"prefix timesteps {ts} not consecutive from 0"])
    obs = np.vstack([p[1] for p in parsed])
    acts = np.vstack([p[2] for p in parsed])
    return pids.pop(), obs, acts


def _fmt(x: float) -> str:
    # repr of a Python float is the shortest round-trip form; keeps files
    # byte-identical across runs and exact through load.
    return repr(float(x))


def write_cohort_csv(cohort: Cohort, path) -> int:
    """Write episodes in the documented schema; returns the row count."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for ep in cohort.episodes:
            for t in range(ep.length):
                row = [ep.patient_id, str(t)]
                row.extend(_fmt(v) for v in ep.observations[t])
                row.extend(_fmt(v) for v in ep.actions[t])
                row.append("1" if t == ep.length - 1 else "0")
                row.append("1" if ep.survived else "0")
                writer.writerow(row)
                n += 1
    return n


# --- normalization ---

class Normalizer:
    """Frozen feature and action scaling fitted on a training cohort.

    Features are z-scored (zero-variance features get std 1).  Continuous
    doses map through x -> 2*log1p(x)/log1p(cap) - 1 into [-1, 1]; the
    binary hydrocortisone flag maps {0,1} -> {-1,+1}.  Denormalization is
    the exact inverse, clamped into [0, cap], with the hydrocortisone
    component thresholded at 0.
    """

    def __init__(self, feature_mean: np.ndarray, feature_std: np.ndarray,
                 caps: tuple[float, ...] = DEFAULT_DOSE_CAPS):
        self.feature_mean = np.asarray(feature_mean, dtype=np.float64)
        self.feature_std = np.asarray(feature_std, dtype=np.float64)
        self.caps = tuple(float(c) for c in caps)
        if self.feature_mean.shape != (N_FEATURES,) or self.feature_std.shape != (N_FEATURES,):
            raise ValueError("Normalizer: stats must cover all features")
        if np.any(self.feature_std <= 0.0):
            raise ValueError("Normalizer: feature std must be positive")
        self._log_caps = np.log1p(np.asarray(self.caps))

    @classmethod
    def fit(cls, cohort: Cohort, caps: tuple[float, ...] = DEFAULT_DOSE_CAPS) -> "Normalizer":
        if not cohort.episodes:
            raise ValueError("fit: empty training cohort")
        feats = np.vstack([ep.observations for ep in cohort.episodes])
        mean = feats.mean(axis=0)
        std = feats.std(axis=0)
        std[std == 0.0] = 1.0
        return cls(mean, std, caps)

    def normalize_obs(self, obs: np.ndarray) -> np.ndarray:
        return (obs - self.feature_mean) / self.feature_std

    def denormalize_obs(self, z: np.ndarray) -> np.ndarray:
        return z * self.feature_std + self.feature_mean

    def normalize_action(self, action: np.ndarray) -> np.ndarray:
        action = np.asarray(action, dtype=np.float64)
        out = np.empty(action.shape)
        cont = np.clip(action[..., :4], 0.0, None)
        out[..., :4] = 2.0 * np.log1p(cont) / self._log_caps - 1.0
        out[..., 4] = np.where(action[..., 4] > 0.5, 1.0, -1.0)
        return out

    def denormalize_action(self, normed: np.ndarray) -> np.ndarray:
        normed = np.asarray(normed, dtype=np.float64)
        out = np.empty(normed.shape)
        raw = np.expm1((np.clip(normed[..., :4], -1.0, 1.0) + 1.0) / 2.0 * self._log_caps)
        out[..., :4] = np.clip(raw, 0.0, np.asarray(self.caps))
        out[..., 4] = np.where(normed[..., 4] >= 0.0, 1.0, 0.0)
        return out

    def to_dict(self) -> dict:
        return {
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "caps": list(self.caps),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["feature_mean"]), np.asarray(d["feature_std"]),
                   tuple(d["caps"]))


def split_cohort(cohort: Cohort, test_fraction: float = 0.2,
                 seed: int = 0) -> tuple[Cohort, Cohort]:
    """Split by patient id, seeded, so no patient straddles the boundary."""
    n = cohort.n_patients
    n_test = int(round(n * test_fraction))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    test_idx = set(perm[:n_test].tolist())
    train = [ep for i, ep in enumerate(cohort.episodes) if i not in test_idx]
    test = [ep for i, ep in enumerate(cohort.episodes) if i in test_idx]
    return Cohort(train), Cohort(test)


# --- transition buffer ---

@dataclass
class TransitionSample:
    """One history-prefixed transition in normalized coordinates.

    `obs_hist`/`act_hist` hold the extended history: row k pairs
    observation o_k with the previous action a_{k-1} (row 0 carries the
    all-zero no-operation action).  The prefix the policy saw is the first
    t+1 rows; the extended history is all t+2 rows.  On terminal samples
    the successor observation repeats the final one; it is never
    bootstrapped through.
    """

    obs_hist: np.ndarray   # (t+2, 41) normalized
    act_hist: np.ndarray   # (t+2, 5) normalized, row 0 = no-op
    action: np.ndarray     # (5,) normalized a_t
    reward: float
    done: bool
    episode_index: int
    t: int
    survived: bool

    @property
    def prefix_length(self) -> int:
        return self.obs_hist.shape[0] - 1


class TransitionBuffer:
    """All (patient, t) transitions of a cohort in normalized coordinates,
    with uniform seeded minibatch sampling."""

    def __init__(self, cohort: Cohort, normalizer: Normalizer):
        self.normalizer = normalizer
        self.episodes = []
        noop = normalizer.normalize_action(np.zeros(N_ACTIONS))
        for ep in cohort.episodes:
            obs = normalizer.normalize_obs(ep.observations)
            acts = normalizer.normalize_action(ep.actions)
            # prev-action rows: a_{-1} = no-op, then a_0 .. a_{L-2}
            prev = np.vstack([noop, acts[:-1]])
            self.episodes.append((obs, acts, prev, ep.rewards, ep.survived))
        self.index = [
            (i, t)
            for i, ep in enumerate(cohort.episodes)
            for t in range(ep.length)
        ]

    def __len__(self) -> int:
        return len(self.index)

    def get(self, flat_index: int) -> TransitionSample:
        i, t = self.index[flat_index]
        obs, acts, prev, rewards, survived = self.episodes[i]
        L = obs.shape[0]
        done = t == L - 1
        obs_hist = np.vstack([obs[: t + 1], obs[t + 1: t + 2] if not done else obs[t: t + 1]])
        act_hist = np.vstack([prev[: t + 1], acts[t: t + 1]])
        return TransitionSample(
            obs_hist=obs_hist,
            act_hist=act_hist,
            action=acts[t].copy(),
            reward=float(rewards[t]),
            done=done,
            episode_index=i,
            t=t,
            survived=survived,
        )

    def sample_minibatch(self, n: int, rng: np.random.Generator) -> list[TransitionSample]:
        """Uniform over all (patient, t) pairs; deterministic given rng state."""
        if not self.index:
            raise ValueError("sample_minibatch: empty buffer")
        if n < 1:
            raise ValueError(f"sample_minibatch: n must be >= 1, got {n}")
        picks = rng.integers(0, len(self.index), size=n)
        return [self.get(int(k)) for k in picks]

    def iter_all(self):
        for k in range(len(self.index)):
            yield self.get(k)
