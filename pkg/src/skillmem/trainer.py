"""PPO over ordered Top-K skill sets with hand-derived backpropagation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .controller import ControllerParams, SelectionStep, softmax

log = logging.getLogger(__name__)


class TrainingDivergence(FloatingPointError):
    """Non-finite loss or gradient; the batch is discarded."""


@dataclass(frozen=True)
class TrainingConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    learning_rate: float = 3e-4
    epochs_per_batch: int = 4
    minibatch_size: int = 64
    normalize_advantages: bool = True
    max_grad_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be > 0")
        if self.value_coef < 0 or self.entropy_coef < 0:
            raise ValueError("loss coefficients must be >= 0")
        if self.learning_rate <= 0 or self.epochs_per_batch < 1 or self.minibatch_size < 1:
            raise ValueError("learning_rate, epochs_per_batch and minibatch_size must be positive")


@dataclass
class Transition:
    step: SelectionStep
    reward: float = 0.0
    done: bool = False
    behavior_log_prob: float = 0.0
    advantage: float = 0.0
    ret: float = 0.0

    @property
    def value(self) -> float:
        return self.step.value


def compute_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """Discounted returns ``G_t = r_t + gamma * G_{t+1}`` with zero beyond the end."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("empty episode")
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(rewards.size - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def compute_gae(rewards: Sequence[float], values: Sequence[float], gamma: float, lam: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise ValueError("rewards and values must have equal length")
    adv = np.empty_like(rewards)
    acc = 0.0
    next_value = 0.0  # terminal bootstrap
    for t in range(rewards.size - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        next_value = values[t]
    return adv


def prepare_episode(transitions: Sequence[Transition], config: TrainingConfig) -> None:
    """Fill ``ret`` and ``advantage`` on one episode's transitions in place."""
    rewards = [t.reward for t in transitions]
    values = [t.value for t in transitions]
    for t, g, a in zip(transitions, compute_returns(rewards, config.gamma), compute_gae(rewards, values, config.gamma, config.gae_lambda)):
        t.ret = float(g)
        t.advantage = float(a)


def _restricted_softmax_sum(z: np.ndarray, action: np.ndarray):
    """Return (log pi(action), d log pi / dz) for ordered draws without replacement."""
    remaining = np.ones(z.size, dtype=bool)
    logp = 0.0
    grad = np.zeros_like(z)
    for a in action:
        zr = np.where(remaining, z, -np.inf)
        m = zr.max()
        e = np.exp(zr - m)
        s = e.sum()
        logp += z[a] - m - np.log(s)
        grad -= e / s
        grad[a] += 1.0
        remaining[a] = False
    return logp, grad


@dataclass
class LossStats:
    loss: float
    policy_loss: float
    value_loss: float
    entropy: float
    clip_frac: float
    approx_kl: float


def ppo_objective(
    batch: Sequence[Transition],
    params: ControllerParams,
    config: TrainingConfig,
    advantages: np.ndarray | None = None,
) -> tuple[float, ControllerParams, LossStats]:
    """Clipped-surrogate PPO loss and its exact gradient w.r.t. ``params``.

    ``advantages`` defaults to the transitions' stored (already normalised)
    advantages.  Entropy uses the unbiased categorical ``softmax(z)``; the
    ratio uses the biased logits the behaviour policy actually sampled from.
    """
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    adv = np.array([t.advantage for t in batch]) if advantages is None else np.asarray(advantages, dtype=np.float64)
    X = np.vstack([t.step.state_features for t in batch])
    G = np.array([t.ret for t in batch])
    old = np.array([t.behavior_log_prob for t in batch])

    A1 = np.tanh(X @ params.W1.T + params.b1)
    Hs = A1 @ params.W2.T + params.b2
    C1 = np.tanh(X @ params.V1.T + params.c1)
    V = C1 @ params.v2 + params.c2

    eps = config.clip_eps
    dH = np.zeros_like(Hs)
    pol_terms = np.empty(B)
    ent_terms = np.empty(B)
    clipped = 0
    kl = 0.0
    for i, t in enumerate(batch):
        U = t.step.skill_embeddings
        z = U @ Hs[i]
        logp, dlogp_dz = _restricted_softmax_sum(z + t.step.logit_bias, t.step.action)
        ratio = np.exp(logp - old[i])
        unclipped = ratio * adv[i]
        clipped_val = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv[i]
        pol_terms[i] = min(unclipped, clipped_val)
        if abs(ratio - 1.0) > eps:
            clipped += 1
        kl += old[i] - logp
        dz = np.zeros_like(z)
        if unclipped <= clipped_val:
            dz -= (ratio * adv[i] / B) * dlogp_dz
        p = softmax(z)
        logp_all = np.log(np.maximum(p, 1e-300))
        H = -np.sum(p * logp_all)
        ent_terms[i] = H
        # d(-c_H * H / B)/dz = c_H * p * (log p + H) / B
        dz += (config.entropy_coef / B) * p * (logp_all + H)
        dH[i] = U.T @ dz

    policy_loss = -float(pol_terms.mean())
    value_loss = float(np.mean((V - G) ** 2))
    ent = float(ent_terms.mean())
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * ent

    grad = params.zeros_like()
    grad.W2 = dH.T @ A1
    grad.b2 = dH.sum(axis=0)
    dpre = (dH @ params.W2) * (1.0 - A1**2)
    grad.W1 = dpre.T @ X
    grad.b1 = dpre.sum(axis=0)

    dV = 2.0 * config.value_coef * (V - G) / B
    grad.v2 = C1.T @ dV
    grad.c2 = np.asarray(dV.sum())
    dvpre = np.outer(dV, params.v2) * (1.0 - C1**2)
    grad.V1 = dvpre.T @ X
    grad.c1 = dvpre.sum(axis=0)

    if not np.isfinite(loss) or not grad.is_finite():
        raise TrainingDivergence(
            f"non-finite PPO objective (loss={loss}, policy={policy_loss}, value={value_loss}, entropy={ent})"
        )
    return loss, grad, LossStats(loss, policy_loss, value_loss, ent, clipped / B, kl / B)


# -- optimiser ----------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_params(cls, params: ControllerParams) -> "AdamState":
        n = params.size
        return cls(np.zeros(n), np.zeros(n))


def update_params(
    params: ControllerParams,
    gradient: ControllerParams,
    state: AdamState,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ControllerParams:
    """One Adam step; ``state`` is advanced in place."""
    g = gradient.flatten()
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * g
    state.v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = state.m / (1 - beta1**state.t)
    v_hat = state.v / (1 - beta2**state.t)
    return params.unflatten(params.flatten() - learning_rate * m_hat / (np.sqrt(v_hat) + eps))


# -- gradient verification ------------------------------------------------------


def finite_difference_gradient(batch, params: ControllerParams, config: TrainingConfig, h: float = 1e-5) -> np.ndarray:
    """Central differences of :func:`ppo_objective` over every parameter."""
    adv = np.array([t.advantage for t in batch])
    flat = params.flatten()
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = ppo_objective(batch, params.unflatten(flat), config, adv)[0]
        flat[i] = orig - h
        fm = ppo_objective(batch, params.unflatten(flat), config, adv)[0]
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    """Per-coordinate ``|a - f| / max(|a|, |f|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


# -- PPO driver ---------------------------------------------------------------


@dataclass
class PPOTrainer:
    params: ControllerParams
    config: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self):
        self.opt_state = AdamState.for_params(self.params)
        self.rng = np.random.default_rng(self.config.seed)

    def update(self, episodes: Sequence[Sequence[Transition]]) -> LossStats | None:
        """Run ``epochs_per_batch`` PPO epochs over the transitions of ``episodes``."""
        for ep in episodes:
            if ep:
                prepare_episode(ep, self.config)
        batch = [t for ep in episodes for t in ep]
        if not batch:
            return None
        adv = np.array([t.advantage for t in batch])
        if self.config.normalize_advantages and adv.size > 1:
            std = adv.std()
            adv = (adv - adv.mean()) / (std + 1e-8)
        for t, a in zip(batch, adv):
            t.advantage = float(a)

        stats = None
        n = len(batch)
        mb = min(self.config.minibatch_size, n)
        for _ in range(self.config.epochs_per_batch):
            order = self.rng.permutation(n)
            for start in range(0, n, mb):
                idx = order[start: start + mb]
                sub = [batch[i] for i in idx]
                try:
                    _, grad, stats = ppo_objective(sub, self.params, self.config)
                except TrainingDivergence as exc:
                    log.error("skipping minibatch: %s", exc)
                    continue
                if self.config.max_grad_norm is not None:
                    flat = grad.flatten()
                    norm = np.linalg.norm(flat)
                    if norm > self.config.max_grad_norm:
                        grad = grad.unflatten(flat * (self.config.max_grad_norm / norm))
                self.params = update_params(self.params, grad, self.opt_state, self.config.learning_rate)
        return stats
