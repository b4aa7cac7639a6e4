"""Batch-constrained recurrent Q-learning over continuous dose vectors.

The agent keeps four learned pieces plus target copies:

* a recurrent history encoder turning each (observation, previous-action)
  prefix into a fixed-width state embedding;
* a conditional VAE that imitates the logged dosing distribution given the
  embedding, keeping candidate actions inside the data support;
* a bounded perturbation head that nudges generated candidates within
  [-phi, phi] per component to improve value;
* twin critics scored with a pessimism-weighted blend of their target
  copies when building Bellman targets.

Action selection samples n candidates from the VAE, perturbs them, and
returns the candidate the first critic scores highest.  With phi = 0 and
n = 1 the agent collapses to pure imitation of the logged policy.

All training runs on one seeded rng stream, so a (buffer, hyperparameters)
pair fixes every learned weight bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nn
from .autodiff import Adam, NonFiniteError, ShapeError, Tape, Tensor
from .cohort import (
    N_ACTIONS,
    N_FEATURES,
    Normalizer,
    TransitionBuffer,
    TransitionSample,
)


@dataclass
class Hyperparameters:
    """Training knobs; every field has a documented default.

    Only `phi` carries an externally fixed value (0.05); the rest are
    conventional defaults for batch-constrained continuous control, all
    overridable through the run config.
    """

    gamma: float = 0.99            # discount
    tau: float = 0.005             # soft target blend rate
    batch_size: int = 64           # minibatch size N
    n_candidates: int = 10         # sampled candidate actions n
    phi: float = 0.05              # max perturbation per component
    lam: float = 0.75              # weight on the pessimistic critic
    epochs: int = 10000            # minibatch updates M
    lr_vae: float = 1e-3
    lr_critic: float = 1e-3
    lr_perturb: float = 1e-4
    latent_dim: int = 10
    z_clip: float = 0.5            # latent sample clamp for candidates
    lstm_hidden: int = 64
    mlp_hidden: int = 128
    seed: int = 0
    candidate_source: str = "vae"  # "vae", or "uniform" for the unconstrained ablation

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0,1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0,1], got {self.tau}")
        if self.phi < 0.0:
            raise ValueError(f"phi must be >= 0, got {self.phi}")
        if self.n_candidates < 1:
            raise ValueError(f"n_candidates must be >= 1, got {self.n_candidates}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [0,1], got {self.lam}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if min(self.lr_vae, self.lr_critic, self.lr_perturb) <= 0.0:
            raise ValueError("learning rates must be positive")
        if self.candidate_source not in ("vae", "uniform"):
            raise ValueError(f"unknown candidate_source {self.candidate_source!r}")


@dataclass
class TrainingLog:
    """Per-epoch scalars: losses, the perturbation objective, grad norms."""

    vae_loss: list[float] = field(default_factory=list)
    critic_loss: list[float] = field(default_factory=list)
    perturb_q: list[float] = field(default_factory=list)
    grad_norm_vae: list[float] = field(default_factory=list)
    grad_norm_critic: list[float] = field(default_factory=list)
    grad_norm_perturb: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.vae_loss)

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    """A loss or gradient went non-finite; carries the epoch index."""


def vae_loss_terms(tape: Tape, mu: Tensor, log_sigma: Tensor,
                   recon: Tensor, target: Tensor) -> Tensor:
    """Reconstruction squared error plus the closed-form Gaussian KL,
    0.5*(sigma^2 + mu^2 - 1 - 2*log sigma) summed per latent dimension,
    averaged over the batch."""
    sq = tape.sum(tape.square(tape.sub(recon, target)), axis=1)
    sigma = tape.exp(log_sigma)
    kl = tape.mul(
        Tensor(0.5),
        tape.sub(
            tape.sub(tape.add(tape.square(sigma), tape.square(mu)), Tensor(1.0)),
            tape.mul(Tensor(2.0), log_sigma),
        ),
    )
    return tape.mean(tape.add(sq, tape.sum(kl, axis=1)))


def soft_update(main: list[tuple[str, Tensor]], target: list[tuple[str, Tensor]],
                tau: float) -> None:
    """target <- tau * main + (1 - tau) * target, parameter by parameter."""
    for (name_m, p_m), (name_t, p_t) in zip(main, target):
        if p_m.shape != p_t.shape:
            raise ShapeError(f"soft_update: {name_m} vs {name_t} shapes differ")
        p_t.values = tau * p_m.values + (1.0 - tau) * p_t.values


def _batchify(samples: list[TransitionSample], extended: bool,
              in_width: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Right-pad a minibatch of ragged histories into per-step inputs and
    live masks for the batched LSTM unroll."""
    B = len(samples)
    lengths = [s.prefix_length + (1 if extended else 0) for s in samples]
    t_max = max(lengths)
    steps, masks = [], []
    for k in range(t_max):
        x = np.zeros((B, in_width))
        m = np.zeros((B, 1))
        for i, s in enumerate(samples):
            if k < lengths[i]:
                x[i, :N_FEATURES] = s.obs_hist[k]
                x[i, N_FEATURES:] = s.act_hist[k]
                m[i, 0] = 1.0
        steps.append(x)
        masks.append(m)
    return steps, masks


class Agent:
    """The four parameterized networks, their target copies, and the
    policy/value operations built on them."""

    LOG_SIGMA_CLAMP = 4.0  # numeric guard on the encoder's log-sigma head

    def __init__(self, hyper: Hyperparameters, rng: np.random.Generator | None = None):
        hyper.validate()
        self.hyper = hyper
        if rng is None:
            rng = np.random.default_rng(hyper.seed)
        H = hyper.lstm_hidden
        W = hyper.mlp_hidden
        L = hyper.latent_dim
        self.in_width = N_FEATURES + N_ACTIONS
        self.encoder = nn.make_lstm(rng, self.in_width, H, name="encoder.")
        self.vae_encoder = nn.make_mlp(
            rng, [H + N_ACTIONS, W, W, 2 * L], ["relu", "relu", "linear"], name="vae_enc.")
        self.vae_decoder = nn.make_mlp(
            rng, [H + L, W, W, N_ACTIONS], ["relu", "relu", "tanh"], name="vae_dec.")
        self.perturb_net = nn.make_mlp(
            rng, [H + N_ACTIONS, W, W, N_ACTIONS], ["relu", "relu", "tanh"], name="perturb.")
        self.q1 = nn.make_mlp(
            rng, [H + N_ACTIONS, W, W, 1], ["relu", "relu", "linear"], name="q1.")
        self.q2 = nn.make_mlp(
            rng, [H + N_ACTIONS, W, W, 1], ["relu", "relu", "linear"], name="q2.")
        self.target_perturb = self._clone_mlp(self.perturb_net, "target_perturb.")
        self.target_q1 = self._clone_mlp(self.q1, "target_q1.")
        self.target_q2 = self._clone_mlp(self.q2, "target_q2.")

    @staticmethod
    def _clone_mlp(src: nn.Mlp, name: str) -> nn.Mlp:
        layers = []
        for i, layer in enumerate(src.layers):
            w = Tensor(layer.w.values.copy(), name=f"{name}l{i}.w")
            b = Tensor(layer.b.values.copy(), name=f"{name}l{i}.b")
            layers.append(nn.DenseLayer(w, b, layer.activation))
        return nn.Mlp(layers)

    # --- parameter bookkeeping ---

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = self.encoder.named_params("encoder.")
        out += self.vae_encoder.named_params("vae_enc.")
        out += self.vae_decoder.named_params("vae_dec.")
        out += self.perturb_net.named_params("perturb.")
        out += self.q1.named_params("q1.")
        out += self.q2.named_params("q2.")
        out += self.target_perturb.named_params("target_perturb.")
        out += self.target_q1.named_params("target_q1.")
        out += self.target_q2.named_params("target_q2.")
        return out

    def vae_params(self) -> list[Tensor]:
        named = (self.encoder.named_params() + self.vae_encoder.named_params()
                 + self.vae_decoder.named_params())
        return [t for _, t in named]

    def critic_params(self) -> list[Tensor]:
        return [t for _, t in self.q1.named_params() + self.q2.named_params()]

    def perturb_params(self) -> list[Tensor]:
        return [t for _, t in self.perturb_net.named_params()]

    # --- history encoding ---

    def encode_history(self, obs_hist: np.ndarray, act_hist: np.ndarray) -> np.ndarray:
        """Embed one normalized (observation, previous-action) prefix."""
        obs_hist = np.atleast_2d(np.asarray(obs_hist, dtype=np.float64))
        act_hist = np.atleast_2d(np.asarray(act_hist, dtype=np.float64))
        if obs_hist.shape[0] == 0:
            raise ShapeError("encode_history: empty history prefix")
        if obs_hist.shape[1] != N_FEATURES or act_hist.shape[1] != N_ACTIONS:
            raise ShapeError(
                f"encode_history: widths {obs_hist.shape[1]}/{act_hist.shape[1]} "
                f"do not match {N_FEATURES}/{N_ACTIONS}")
        if obs_hist.shape[0] != act_hist.shape[0]:
            raise ShapeError("encode_history: observation/action prefix lengths differ")
        steps = [np.concatenate([obs_hist[k], act_hist[k]]).reshape(1, -1)
                 for k in range(obs_hist.shape[0])]
        return nn.lstm_unroll_raw(self.encoder, steps)[0]

    def encode_batch_raw(self, steps: list[np.ndarray],
                         masks: list[np.ndarray] | None) -> np.ndarray:
        return nn.lstm_unroll_raw(self.encoder, steps, masks)

    def encode_batch_taped(self, tape: Tape, steps: list[np.ndarray],
                           masks: list[np.ndarray]) -> tuple[Tensor, Tensor]:
        return nn.lstm_unroll_batch(tape, self.encoder, [Tensor(x) for x in steps], masks)

    # --- generative model ---

    def vae_forward(self, tape: Tape, s: Tensor, a: Tensor,
                    eps: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """Taped encoder/decoder pass with reparameterized latent sample."""
        L = self.hyper.latent_dim
        h = self.vae_encoder.forward(tape, tape.concat([s, a], axis=1))
        mu = tape.slice(h, 0, L)
        log_sigma = tape.clamp(tape.slice(h, L, 2 * L),
                               -self.LOG_SIGMA_CLAMP, self.LOG_SIGMA_CLAMP)
        z = tape.add(mu, tape.mul(tape.exp(log_sigma), Tensor(eps)))
        recon = self.vae_decoder.forward(tape, tape.concat([s, z], axis=1))
        return mu, log_sigma, recon

    def vae_loss(self, tape: Tape, s: Tensor, a: Tensor, eps: np.ndarray) -> Tensor:
        mu, log_sigma, recon = self.vae_forward(tape, s, a, eps)
        return vae_loss_terms(tape, mu, log_sigma, recon, a)

    def decode_raw(self, s: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.vae_decoder.forward_raw(np.concatenate([s, z], axis=1))

    def sample_actions(self, s: np.ndarray, n: int,
                       rng: np.random.Generator) -> np.ndarray:
        """Draw n candidate actions per state row; (B*n, 5) in [-1, 1].

        VAE candidates decode clamped standard-normal latents; the
        unconstrained ablation draws uniformly over the action cube.
        """
        s = np.atleast_2d(s)
        B = s.shape[0]
        s_rep = np.repeat(s, n, axis=0)
        if self.hyper.candidate_source == "uniform":
            return rng.uniform(-1.0, 1.0, size=(B * n, N_ACTIONS))
        z = rng.standard_normal((B * n, self.hyper.latent_dim))
        z = np.clip(z, -self.hyper.z_clip, self.hyper.z_clip)
        return self.decode_raw(s_rep, z)

    # --- perturbation and policy ---

    def perturb(self, s: np.ndarray, a: np.ndarray, phi: float | None = None,
                net: nn.Mlp | None = None) -> np.ndarray:
        """a + phi * tanh-head(s, a), clamped into the action cube."""
        phi = self.hyper.phi if phi is None else phi
        net = self.perturb_net if net is None else net
        adj = phi * net.forward_raw(np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1))
        return np.clip(np.atleast_2d(a) + adj, -1.0, 1.0)

    def q_raw(self, s: np.ndarray, a: np.ndarray, net: nn.Mlp | None = None) -> np.ndarray:
        net = self.q1 if net is None else net
        return net.forward_raw(np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1))

    def select_action(self, s: np.ndarray, rng: np.random.Generator,
                      n: int | None = None, phi: float | None = None) -> np.ndarray:
        """Among n perturbed candidates, return the one the first critic
        scores highest (normalized coordinates; thresholding of the binary
        component happens only at denormalization)."""
        n = self.hyper.n_candidates if n is None else n
        s = np.atleast_2d(s)
        if s.shape[0] != 1:
            raise ShapeError(f"select_action: expected one state, got {s.shape[0]}")
        cands = self.sample_actions(s, n, rng)
        cands = self.perturb(np.repeat(s, n, axis=0), cands, phi=phi)
        q = self.q_raw(np.repeat(s, n, axis=0), cands)
        return cands[int(np.argmax(q.reshape(-1)))]

    # --- Bellman target ---

    def q_target(self, r: np.ndarray, s_next: np.ndarray, done: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
        """Pessimism-blended clipped double-Q target.

        Candidates at s' come from the generative model and are perturbed
        by the *target* perturbation net; each is scored with
        lam*min + (1-lam)*max over the target critics, the best candidate
        bootstraps.  Terminal rows take y = r exactly.
        """
        h = self.hyper
        B = s_next.shape[0]
        n = h.n_candidates
        s_rep = np.repeat(s_next, n, axis=0)
        cands = self.sample_actions(s_next, n, rng)
        cands = self.perturb(s_rep, cands, net=self.target_perturb)
        sa = np.concatenate([s_rep, cands], axis=1)
        q1v = self.target_q1.forward_raw(sa).reshape(B, n)
        q2v = self.target_q2.forward_raw(sa).reshape(B, n)
        blend = h.lam * np.minimum(q1v, q2v) + (1.0 - h.lam) * np.maximum(q1v, q2v)
        best = blend.max(axis=1)
        r = np.asarray(r, dtype=np.float64).reshape(-1)
        done = np.asarray(done, dtype=np.float64).reshape(-1)
        return (r + h.gamma * (1.0 - done) * best).reshape(B, 1)

    # --- gradient updates (one Adam step each; the embedding inputs are
    # constants here, the encoder trains only through the generative loss) ---

    def critic_update(self, optimizer: Adam, s: np.ndarray, actions: np.ndarray,
                      y: np.ndarray) -> float:
        """One descent step on the summed squared Bellman residual of both
        critics against fixed targets; returns the loss value."""
        tape = Tape()
        sa = tape.concat([Tensor(s), Tensor(actions)], axis=1)
        q1_pred = self.q1.forward(tape, sa)
        q2_pred = self.q2.forward(tape, sa)
        y_const = Tensor(y)
        loss = tape.mean(tape.add(
            tape.square(tape.sub(y_const, q1_pred)),
            tape.square(tape.sub(y_const, q2_pred)),
        ))
        if not np.isfinite(loss.item()):
            raise NonFiniteError(f"critic_update: loss is {loss.item()}")
        tape.backward(loss)
        optimizer.step()
        return loss.item()

    def perturbation_update(self, optimizer: Adam, s: np.ndarray,
                            a_gen: np.ndarray, phi: float | None = None) -> float:
        """One ascent step of the perturbation head on the first critic's
        value of the adjusted actions; generator samples and critic weights
        are held fixed.  Returns the objective value."""
        phi = self.hyper.phi if phi is None else phi
        tape = Tape()
        s_c = Tensor(s)
        a_c = Tensor(a_gen)
        adj = tape.mul(Tensor(phi),
                       self.perturb_net.forward(tape, tape.concat([s_c, a_c], axis=1)))
        a_adj = tape.clamp(tape.add(a_c, adj), -1.0, 1.0)
        obj = tape.mean(self.q1.forward(tape, tape.concat([s_c, a_adj], axis=1)))
        if not np.isfinite(obj.item()):
            raise NonFiniteError(f"perturbation_update: objective is {obj.item()}")
        tape.backward(tape.mul(obj, Tensor(-1.0)), params=self.perturb_params())
        optimizer.step()
        return obj.item()

    # --- checkpointing ---

    def save(self, path, normalizer: Normalizer | None = None,
             meta: dict | None = None) -> None:
        """Write the .bxp weights plus a JSON sidecar (hyperparameters and,
        when given, normalization stats) at the same stem."""
        path = Path(path)
        nn.save_params(self.named_params(), path, meta={"kind": "batchrx-agent"})
        sidecar = {"hyperparameters": asdict(self.hyper)}
        if normalizer is not None:
            sidecar["normalizer"] = normalizer.to_dict()
        if meta:
            sidecar["meta"] = meta
        with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> tuple["Agent", Normalizer | None]:
        path = Path(path)
        with open(path.with_suffix(".json"), "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
        hyper = Hyperparameters(**sidecar["hyperparameters"])
        agent = cls(hyper)
        nn.load_params(agent.named_params(), path)
        normalizer = None
        if "normalizer" in sidecar:
            normalizer = Normalizer.from_dict(sidecar["normalizer"])
        return agent, normalizer


class AgentPolicy:
    """Adapter exposing a trained agent as a clinical-units policy:
    raw observation/action history in, denormalized dose vector out."""

    def __init__(self, agent: Agent, normalizer: Normalizer):
        self.agent = agent
        self.normalizer = normalizer

    def __call__(self, obs_hist: list[np.ndarray], act_hist: list[np.ndarray],
                 rng: np.random.Generator) -> np.ndarray:
        obs = self.normalizer.normalize_obs(np.vstack(obs_hist))
        noop = self.normalizer.normalize_action(np.zeros(N_ACTIONS))
        prev = [noop] + [self.normalizer.normalize_action(a) for a in act_hist]
        s = self.agent.encode_history(obs, np.vstack(prev))
        a_norm = self.agent.select_action(s, rng)
        return self.normalizer.denormalize_action(a_norm)


def _grad_norm(params: list[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def train(buffer: TransitionBuffer, hyper: Hyperparameters,
          vae_only: bool = False,
          progressdelta: int = 0) -> tuple[Agent, TrainingLog]:
    """Run the full training loop over a transition buffer.

    Each epoch: sample a minibatch, embed prefixes (taped) and extended
    histories (constant), take the joint VAE+encoder step, build the
    clipped targets from the target nets, step the critics, step the
    perturbation head on the first critic's value, then soft-update the
    targets.  `vae_only` runs just the generative stage, for imitation
    studies.  Any non-finite loss aborts with the epoch index.
    """
    hyper.validate()
    if len(buffer) == 0:
        raise ValueError("train: empty buffer")
    seeds = np.random.SeedSequence(hyper.seed).spawn(2)
    agent = Agent(hyper, rng=np.random.default_rng(seeds[0]))
    rng = np.random.default_rng(seeds[1])
    adam_vae = Adam(agent.vae_params(), lr=hyper.lr_vae)
    adam_critic = Adam(agent.critic_params(), lr=hyper.lr_critic)
    adam_perturb = Adam(agent.perturb_params(), lr=hyper.lr_perturb)
    log = TrainingLog()

    main_p = agent.perturb_net.named_params()
    main_q1 = agent.q1.named_params()
    main_q2 = agent.q2.named_params()
    tgt_p = agent.target_perturb.named_params()
    tgt_q1 = agent.target_q1.named_params()
    tgt_q2 = agent.target_q2.named_params()

    for epoch in range(hyper.epochs):
        samples = buffer.sample_minibatch(hyper.batch_size, rng)
        B = len(samples)
        actions = np.vstack([s.action for s in samples])
        rewards = np.array([s.reward for s in samples])
        dones = np.array([1.0 if s.done else 0.0 for s in samples])

        # Embeddings: prefix taped (the VAE loss trains the encoder);
        # the extended history shares every step but the last with the
        # prefix, so its constant embedding is one raw step from the
        # prefix's final (h, c).
        pre_steps, pre_masks = _batchify(samples, extended=False, in_width=agent.in_width)

        tape = Tape()
        s_taped, c_taped = agent.encode_batch_taped(tape, pre_steps, pre_masks)
        s_vals = s_taped.values
        if not vae_only:
            ext_x = np.concatenate(
                [np.stack([s.obs_hist[-1] for s in samples]),
                 np.stack([s.act_hist[-1] for s in samples])], axis=1)
            w_raw, b_raw = agent.encoder.fused_raw()
            s_next, _ = agent.encoder.step_raw(w_raw, b_raw, ext_x,
                                               s_vals, c_taped.values)

        eps = rng.standard_normal((B, hyper.latent_dim))
        loss_vae = agent.vae_loss(tape, s_taped, Tensor(actions), eps)
        vae_val = loss_vae.item()
        if not np.isfinite(vae_val):
            raise TrainingDiverged(f"epoch {epoch}: VAE loss is {vae_val}")
        tape.backward(loss_vae)
        try:
            adam_vae.step()
        except NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        log.vae_loss.append(vae_val)
        log.grad_norm_vae.append(_grad_norm(agent.vae_params()))

        if vae_only:
            log.critic_loss.append(float("nan"))
            log.perturb_q.append(float("nan"))
            log.grad_norm_critic.append(float("nan"))
            log.grad_norm_perturb.append(float("nan"))
            continue

        # Critic stage: targets from the target nets are constants.
        y = agent.q_target(rewards, s_next, dones, rng)
        try:
            critic_val = agent.critic_update(adam_critic, s_vals, actions, y)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        log.critic_loss.append(critic_val)
        log.grad_norm_critic.append(_grad_norm(agent.critic_params()))

        # Perturbation stage: resample generator actions, ascend the head.
        a_gen = agent.sample_actions(s_vals, 1, rng)
        try:
            obj_val = agent.perturbation_update(adam_perturb, s_vals, a_gen)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        log.perturb_q.append(obj_val)
        log.grad_norm_perturb.append(_grad_norm(agent.perturb_params()))

        soft_update(main_p, tgt_p, hyper.tau)
        soft_update(main_q1, tgt_q1, hyper.tau)
        soft_update(main_q2, tgt_q2, hyper.tau)

        if progressdelta and (epoch + 1) % progressdelta == 0:
            print(f"epoch {epoch + 1}/{hyper.epochs}  vae {vae_val:.4f}  "
                  f"critic {critic_val:.4f}  q {obj_val:.3f}", flush=True)

    return agent, log
