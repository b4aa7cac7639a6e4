"""Synthetic sepsis-like cohort generator with known ground truth.

The world is a damped three-variable latent system (illness severity,
hemodynamic tone, fluid balance) with saturating dose-response terms, a
heuristic noisy "clinician" behavior policy, and a logistic mortality model
on final severity.  Observations project the latent state into the
41-feature schema: organ-function score and lactate are strictly monotone
functions of severity plus noise, pressure reflects tone, and everything
not modeled mechanistically is emitted as severity-correlated noise so
the full schema stays populated.

Intentional structure, so that optimal dosing is visibly nontrivial:

* hypoperfusion (low tone) feeds severity growth, so maintaining pressure
  pays off across steps;
* the first vasopressor class is reliably beneficial within its cap, and
  the behavior policy systematically under-doses it;
* the third class raises pressure but adds direct severity stress, making
  its net effect harmful at the doses the behavior policy sometimes uses;
* fluid overload beyond a threshold adds severity.

Everything is deterministic given (params, seed): patients get spawned
seed streams and are generated independently, so cohorts can be produced
in parallel and merged in patient-id order without changing a byte.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict, replace

import numpy as np
from scipy.special import expit

from .cohort import (
    DEFAULT_DOSE_CAPS,
    FEATURE_NAMES,
    IDX_MAP,
    IDX_SOFA,
    N_ACTIONS,
    N_FEATURES,
    Cohort,
    Episode,
    compute_reward,
    label_rewards,
)


def _softplus(x: float) -> float:
    if x > 30.0:
        return x
    return math.log1p(math.exp(x))


@dataclass
class SimParams:
    """Dynamics, emission, behavior-policy and mortality coefficients.

    Noise scales are separated from structural coefficients; `zero_noise()`
    returns a copy with every stochastic element switched off, under which
    trajectories are fully deterministic functions of the dose sequence.
    """

    episode_length: int = 12
    caps: tuple[float, float, float, float] = DEFAULT_DOSE_CAPS

    # initial latent state
    init_severity_mean: float = 2.1
    init_severity_std: float = 0.85
    init_tone_coupling: float = -0.45   # tone0 = coupling * (sev0 - ref)
    init_tone_std: float = 0.25
    severity_ref: float = 2.0

    # latent transition
    sev_persist: float = 0.92
    sev_drift: float = 0.24
    perf_gain: float = 0.55            # severity relief from perfusion (tanh tone)
    tone_persist: float = 0.60
    sev_pull: float = 0.78             # severity dragging tone down
    sev_pull_scale: float = 2.2
    v1_tone: float = 1.25
    v1_sat: float = 0.95
    v2_tone: float = 0.45
    v2_sat: float = 0.07
    v3_tone: float = 0.25
    v3_sat: float = 0.60
    v3_stress: float = 0.70            # direct severity cost of class-3 agents
    fluid_tone: float = 0.35
    fluid_sat: float = 900.0
    fb_persist: float = 0.70
    fb_unit: float = 1500.0
    overload_gain: float = 0.20
    overload_threshold: float = 1.6
    hc_gain: float = 0.18
    hc_ref: float = 4.5
    hc_scale: float = 1.2
    trans_noise_sev: float = 0.14
    trans_noise_tone: float = 0.10
    trans_noise_fb: float = 0.04

    # mortality logistic on final severity
    mort_slope: float = 1.15
    mort_mid: float = 3.9

    # behavior policy heuristics (thresholds on observed pressure/score)
    bp_fluid_base: float = 110.0
    bp_fluid_gain: float = 38.0
    bp_fluid_target: float = 66.0
    bp_v1_gain: float = 0.065
    bp_v1_threshold: float = 65.0
    bp_v2_gain: float = 0.10
    bp_v2_trigger: float = 0.70        # fraction of the class-1 cap
    bp_v3_gain: float = 0.045
    bp_v3_threshold: float = 58.0
    bp_hc_sofa: float = 14.5
    bp_noise: float = 0.55             # log-normal dose noise

    # observation emission
    obs_noise: float = 1.0             # global multiplier on per-feature sigmas
    static_noise: float = 1.0          # demographics randomization switch

    seed_note: str = ""                # free-form provenance tag for manifests

    def zero_noise(self) -> "SimParams":
        return replace(
            self,
            init_severity_std=0.0, init_tone_std=0.0,
            trans_noise_sev=0.0, trans_noise_tone=0.0, trans_noise_fb=0.0,
            bp_noise=0.0, obs_noise=0.0, static_noise=0.0,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["caps"] = list(self.caps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimParams":
        d = dict(d)
        if "caps" in d:
            d["caps"] = tuple(d["caps"])
        return cls(**d)


@dataclass
class LatentState:
    severity: float
    tone: float
    fluid_balance: float


@dataclass
class PatientStatics:
    gender: float
    age: float
    ethnicity: float
    elixhauser: float


@dataclass
class PrefixState:
    """A mid-episode snapshot sufficient to continue the trajectory: the
    raw history so far plus the (never-observed) latent state and statics."""

    state: LatentState
    statics: PatientStatics
    obs_hist: list          # raw (41,) arrays, o_0 .. o_t
    act_hist: list          # raw (5,) arrays, a_0 .. a_{t-1}
    t: int


def sample_statics(params: SimParams, rng: np.random.Generator) -> PatientStatics:
    if params.static_noise == 0.0:
        return PatientStatics(gender=0.0, age=66.0, ethnicity=0.0, elixhauser=3.0)
    return PatientStatics(
        gender=float(rng.integers(0, 2)),
        age=float(np.clip(rng.normal(66.0, 14.0), 18.0, 95.0)),
        ethnicity=float(rng.integers(0, 5)),
        elixhauser=float(np.clip(round(rng.normal(3.0, 2.0)), 0, 12)),
    )


def sample_initial_state(params: SimParams, rng: np.random.Generator) -> LatentState:
    sev = params.init_severity_mean + params.init_severity_std * rng.standard_normal()
    tone = (params.init_tone_coupling * (sev - params.severity_ref)
            + params.init_tone_std * rng.standard_normal())
    return LatentState(severity=sev, tone=tone, fluid_balance=0.0)


def step_dynamics(params: SimParams, state: LatentState, action: np.ndarray,
                  rng: np.random.Generator | None = None) -> LatentState:
    """One 2-hour latent transition under a clinical-units action.

    Tone updates first so a dose's perfusion benefit reaches severity in
    the same step: raising the class-1 dose weakly raises next tone (hence
    next pressure) and weakly lowers next severity.
    """
    liquid, v1, v2, v3, hc = (float(action[k]) for k in range(5))
    p = params
    fb_next = p.fb_persist * state.fluid_balance + liquid / p.fb_unit
    tone_next = (
        p.tone_persist * state.tone
        - p.sev_pull * math.tanh((state.severity - p.severity_ref) / p.sev_pull_scale)
        + p.v1_tone * math.tanh(v1 / p.v1_sat)
        + p.v2_tone * math.tanh(v2 / p.v2_sat)
        + p.v3_tone * math.tanh(v3 / p.v3_sat)
        + p.fluid_tone * math.tanh(liquid / p.fluid_sat)
    )
    sev_next = (
        p.sev_persist * state.severity
        + p.sev_drift
        - p.perf_gain * math.tanh(tone_next)
        + p.v3_stress * math.tanh(v3 / p.v3_sat)
        + p.overload_gain * _softplus(fb_next - p.overload_threshold)
        - p.hc_gain * (1.0 if hc > 0.5 else 0.0)
        * expit((state.severity - p.hc_ref) / p.hc_scale)
    )
    if rng is not None:
        sev_next += p.trans_noise_sev * rng.standard_normal()
        tone_next += p.trans_noise_tone * rng.standard_normal()
        fb_next += p.trans_noise_fb * rng.standard_normal()
    return LatentState(severity=sev_next, tone=tone_next, fluid_balance=fb_next)


# (base, severity slope, noise sigma, floor) for the 24 lab values, in the
# schema's lab order.  Pure emission texture; only lactate is load-bearing.
_LAB_TABLE = {
    "wbc": (11.0, 1.1, 1.5, 0.5),
    "neutrophils": (74.0, 1.6, 4.0, 5.0),
    "lymphocytes": (14.0, -0.9, 3.0, 0.5),
    "platelets": (220.0, -16.0, 30.0, 10.0),
    "hemoglobin": (11.5, -0.35, 1.0, 3.0),
    "alt": (45.0, 16.0, 14.0, 5.0),
    "ast": (55.0, 20.0, 16.0, 5.0),
    "total_bilirubin": (1.1, 0.33, 0.3, 0.1),
    "bun": (22.0, 3.2, 4.0, 2.0),
    "creatinine": (1.1, 0.30, 0.2, 0.2),
    "albumin": (3.4, -0.16, 0.3, 1.0),
    "glucose": (135.0, 7.0, 18.0, 40.0),
    "potassium": (4.1, 0.12, 0.3, 2.0),
    "sodium": (138.0, 0.5, 2.5, 115.0),
    "calcium": (8.6, -0.12, 0.4, 5.0),
    "chloride": (104.0, 0.5, 2.5, 80.0),
    "ph": (7.38, -0.022, 0.02, 6.8),
    "pao2": (95.0, -3.5, 9.0, 40.0),
    "paco2": (40.0, -0.8, 3.5, 15.0),
    "bicarbonate": (24.0, -1.1, 1.8, 5.0),
    "pao2_fio2": (280.0, -26.0, 25.0, 40.0),
    "pt": (14.0, 0.75, 1.2, 8.0),
    "aptt": (34.0, 2.2, 3.5, 18.0),
}


def observe(params: SimParams, state: LatentState, prev_action: np.ndarray,
            statics: PatientStatics, rng: np.random.Generator | None = None) -> np.ndarray:
    """Project the latent state into the 41-feature observation."""
    p = params
    sev = state.severity
    scale = p.obs_noise

    def n(sigma: float) -> float:
        if rng is None or scale == 0.0:
            return 0.0
        return scale * sigma * rng.standard_normal()

    obs = np.zeros(N_FEATURES)
    vals = {
        "gender": statics.gender,
        "age": statics.age,
        "ethnicity": statics.ethnicity,
        "elixhauser": statics.elixhauser,
        "heart_rate": 78.0 + 14.0 * math.tanh((sev - 2.0) / 2.0)
                      - 6.0 * math.tanh(state.tone) + n(3.0),
        "map": float(np.clip(65.0 + 18.0 * math.tanh(state.tone) + n(2.5), 30.0, 140.0)),
        "temperature": 37.2 + 0.9 * math.tanh((sev - 2.0) / 3.0) + n(0.2),
        "resp_rate": 17.0 + 5.0 * math.tanh((sev - 2.0) / 2.5) + n(1.2),
        "spo2": float(np.clip(97.5 - 3.2 * expit(sev - 3.0) + n(0.8), 75.0, 100.0)),
        "gcs": float(np.clip(15.0 - 5.5 * expit((sev - 3.2) / 1.4) + n(0.5), 3.0, 15.0)),
        "sofa": float(np.clip(11.5 + 7.5 * math.tanh((sev - 2.2) / 2.6) + n(0.7), 0.0, 24.0)),
        "lactate": float(np.clip(0.6 + 2.1 * _softplus((sev - 1.2) / 1.6) + n(0.3),
                                 0.2, 30.0)),
        "urine_output": max(0.0, 105.0 * math.exp(-0.30 * max(0.0, sev - 0.8))
                            + 22.0 * math.tanh(state.fluid_balance) + n(8.0)),
        "prev_fluid": float(prev_action[0]),
        "prev_vaso1": float(prev_action[1]),
        "prev_vaso2": float(prev_action[2]),
        "prev_vaso3": float(prev_action[3]),
        "prev_hydrocort": float(prev_action[4]),
    }
    for name, (base, slope, sigma, floor) in _LAB_TABLE.items():
        vals[name] = max(floor, base + slope * sev + n(sigma))
    for i, name in enumerate(FEATURE_NAMES):
        obs[i] = vals[name]
    return obs


def behavior_policy(params: SimParams, obs: np.ndarray,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Heuristic clinician: maintenance plus resuscitation fluid keyed on
    hypotension depth, class-1 pressor below a pressure threshold, class-2
    added once class-1 nears its cap, class-3 in deep shock only,
    hydrocortisone on persistent high organ dysfunction.  Continuous doses
    get multiplicative log-normal noise, everything clamped to caps."""
    p = params
    pressure = obs[IDX_MAP]
    sofa = obs[IDX_SOFA]
    hypo = max(0.0, p.bp_fluid_target - pressure)
    fluid = p.bp_fluid_base + p.bp_fluid_gain * hypo
    v1 = p.bp_v1_gain * max(0.0, p.bp_v1_threshold - pressure)
    v2 = p.bp_v2_gain * max(0.0, v1 - p.bp_v2_trigger * p.caps[1])
    v3 = p.bp_v3_gain * max(0.0, p.bp_v3_threshold - pressure)
    hc = 1.0 if sofa > p.bp_hc_sofa else 0.0
    doses = np.array([fluid, v1, v2, v3])
    if rng is not None and p.bp_noise > 0.0:
        doses = doses * np.exp(p.bp_noise * rng.standard_normal(4))
    doses = np.minimum(doses, np.asarray(p.caps))
    return np.array([doses[0], doses[1], doses[2], doses[3], hc])


class BehaviorPolicyAdapter:
    """History-signature wrapper: looks only at the latest observation."""

    def __init__(self, params: SimParams):
        self.params = params

    def __call__(self, obs_hist: list, act_hist: list,
                 rng: np.random.Generator) -> np.ndarray:
        return behavior_policy(self.params, obs_hist[-1], rng)


def survival_probability(params: SimParams, final_severity: float) -> float:
    return float(expit(-params.mort_slope * (final_severity - params.mort_mid)))


@dataclass
class SimulatedPatient:
    episode: Episode
    final_severity: float
    survival_prob: float
    latents: list            # LatentState at t = 0 .. episode_length


def simulate_patient(params: SimParams, patient_id: str,
                     seed: np.random.SeedSequence,
                     policy=None) -> SimulatedPatient:
    """Roll one patient under `policy` (behavior policy by default)."""
    rng = np.random.default_rng(seed)
    if policy is None:
        policy = BehaviorPolicyAdapter(params)
    statics = sample_statics(params, rng)
    state = sample_initial_state(params, rng)
    latents = [state]
    obs_hist: list[np.ndarray] = [observe(params, state, np.zeros(N_ACTIONS), statics, rng)]
    act_hist: list[np.ndarray] = []
    for t in range(params.episode_length):
        action = policy(obs_hist, act_hist, rng)
        act_hist.append(np.asarray(action, dtype=np.float64))
        state = step_dynamics(params, state, action, rng)
        latents.append(state)
        if t < params.episode_length - 1:
            obs_hist.append(observe(params, state, act_hist[-1], statics, rng))
    p_surv = survival_probability(params, state.severity)
    survived = bool(rng.random() < p_surv)
    observations = np.vstack(obs_hist)
    actions = np.vstack(act_hist)
    rewards = label_rewards(observations, survived)
    episode = Episode(patient_id, observations, actions, rewards, survived)
    return SimulatedPatient(episode, state.severity, p_surv, latents)


def _simulate_chunk(args) -> list[SimulatedPatient]:
    params_dict, ids, seed_specs = args
    params = SimParams.from_dict(params_dict)
    return [
        simulate_patient(params, pid,
                         np.random.SeedSequence(entropy=e, spawn_key=k))
        for pid, (e, k) in zip(ids, seed_specs)
    ]


def simulate_cohort(params: SimParams, n_patients: int, seed: int,
                    workers: int = 1) -> list[SimulatedPatient]:
    """Generate n patients under the behavior policy; deterministic in
    (params, n, seed) regardless of worker count."""
    if n_patients < 1:
        raise ValueError(f"simulate_cohort: n_patients must be >= 1, got {n_patients}")
    seeds = np.random.SeedSequence(seed).spawn(n_patients)
    ids = [f"sim-{i:06d}" for i in range(n_patients)]
    if workers <= 1:
        return [simulate_patient(params, pid, s) for pid, s in zip(ids, seeds)]
    chunks = np.array_split(np.arange(n_patients), workers * 4)
    jobs = [
        (params.to_dict(),
         [ids[i] for i in chunk],
         [(seeds[i].entropy, seeds[i].spawn_key) for i in chunk])
        for chunk in chunks if len(chunk)
    ]
    out: list[SimulatedPatient] = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(_simulate_chunk, jobs):
            out.extend(part)
    return out


def generate_cohort(params: SimParams, n_patients: int, seed: int,
                    workers: int = 1) -> Cohort:
    patients = simulate_cohort(params, n_patients, seed, workers=workers)
    return Cohort(episodes=[p.episode for p in patients])


# --- Monte-Carlo oracles ---

def _continue_rollout(params: SimParams, policy, prefix: PrefixState,
                      gamma: float, rng: np.random.Generator,
                      first_action: np.ndarray | None) -> float:
    """Discounted return of one continuation from the prefix endpoint."""
    obs_hist = list(prefix.obs_hist)
    act_hist = list(prefix.act_hist)
    state = prefix.state
    total = 0.0
    disc = 1.0
    for t in range(prefix.t, params.episode_length):
        if t == prefix.t and first_action is not None:
            action = np.asarray(first_action, dtype=np.float64)
        else:
            action = np.asarray(policy(obs_hist, act_hist, rng), dtype=np.float64)
        act_hist.append(action)
        state = step_dynamics(params, state, action, rng)
        if t < params.episode_length - 1:
            obs_next = observe(params, state, action, prefix.statics, rng)
            total += disc * compute_reward(obs_hist[-1], obs_next)
            obs_hist.append(obs_next)
        else:
            p_surv = survival_probability(params, state.severity)
            survived = rng.random() < p_surv
            total += disc * (25.0 if survived else -25.0)
        disc *= gamma
    return total


def initial_prefix(params: SimParams, rng: np.random.Generator) -> PrefixState:
    statics = sample_statics(params, rng)
    state = sample_initial_state(params, rng)
    obs0 = observe(params, state, np.zeros(N_ACTIONS), statics, rng)
    return PrefixState(state=state, statics=statics, obs_hist=[obs0], act_hist=[], t=0)


def monte_carlo_q(params: SimParams, policy, prefix: PrefixState | None,
                  rollouts: int, seed: int, gamma: float,
                  first_action: np.ndarray | None = None) -> tuple[float, float]:
    """Mean discounted return (and its standard error) over independent
    continuations under the true dynamics.

    With `prefix=None` each rollout starts a fresh patient, estimating the
    policy's value over the initial-state distribution.  A prefix at the
    terminal time has no remaining return: (0, 0).
    """
    if rollouts < 1:
        raise ValueError(f"monte_carlo_q: rollouts must be >= 1, got {rollouts}")
    if prefix is not None and prefix.t >= params.episode_length:
        return 0.0, 0.0
    seeds = np.random.SeedSequence(seed).spawn(rollouts)
    returns = np.empty(rollouts)
    for k, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        start = prefix if prefix is not None else initial_prefix(params, rng)
        returns[k] = _continue_rollout(params, policy, start, gamma, rng, first_action)
    mean = float(returns.mean())
    se = float(returns.std(ddof=1) / math.sqrt(rollouts)) if rollouts > 1 else 0.0
    return mean, se


def sample_prefix_states(params: SimParams, n_states: int, seed: int,
                         t_range: tuple[int, int] | None = None) -> list[PrefixState]:
    """Cut behavior-policy episodes at random times, keeping the latent
    state alongside the raw history, for oracle evaluations."""
    lo, hi = t_range if t_range is not None else (0, params.episode_length - 1)
    seeds = np.random.SeedSequence(seed).spawn(n_states)
    prefixes = []
    for k, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        cut = int(rng.integers(lo, hi + 1))
        statics = sample_statics(params, rng)
        state = sample_initial_state(params, rng)
        policy = BehaviorPolicyAdapter(params)
        obs_hist = [observe(params, state, np.zeros(N_ACTIONS), statics, rng)]
        act_hist: list[np.ndarray] = []
        for t in range(cut):
            action = policy(obs_hist, act_hist, rng)
            act_hist.append(np.asarray(action, dtype=np.float64))
            state = step_dynamics(params, state, action, rng)
            obs_hist.append(observe(params, state, act_hist[-1], statics, rng))
        prefixes.append(PrefixState(state=state, statics=statics,
                                    obs_hist=obs_hist, act_hist=act_hist, t=cut))
    return prefixes


def extrapolation_error(agent, normalizer, params: SimParams,
                        prefixes: list[PrefixState], rollouts: int, seed: int,
                        gamma: float) -> dict:
    """Mean absolute gap between the critic's value and the true
    Monte-Carlo value of the agent's own action, over sampled states.

    Returns the mean plus a per-state breakdown of (critic, oracle, gap).
    """
    from .agent import AgentPolicy
    from .cohort import N_ACTIONS as _NA

    policy = AgentPolicy(agent, normalizer)
    seeds = np.random.SeedSequence(seed).spawn(len(prefixes))
    rows = []
    for prefix, s in zip(prefixes, seeds):
        pick_rng = np.random.default_rng(s)
        action = policy(prefix.obs_hist, prefix.act_hist, pick_rng)
        obs_n = normalizer.normalize_obs(np.vstack(prefix.obs_hist))
        noop = normalizer.normalize_action(np.zeros(_NA))
        prev = [noop] + [normalizer.normalize_action(a) for a in prefix.act_hist]
        emb = agent.encode_history(obs_n, np.vstack(prev))
        q_critic = float(agent.q_raw(emb, normalizer.normalize_action(action))[0, 0])
        q_true, se = monte_carlo_q(params, policy, prefix, rollouts,
                                   seed=int(s.generate_state(1)[0]), gamma=gamma,
                                   first_action=action)
        rows.append({
            "t": prefix.t,
            "critic": q_critic,
            "oracle": q_true,
            "oracle_se": se,
            "gap": abs(q_critic - q_true),
        })
    mean_gap = float(np.mean([r["gap"] for r in rows])) if rows else 0.0
    return {"mean_abs_error": mean_gap, "states": rows}


def params_digest(params: SimParams) -> str:
    """Stable short hash of the parameter set, for manifests."""
    import hashlib
    blob = json.dumps(params.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
