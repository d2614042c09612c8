"""Skill-selection policy: state encoding, skill scoring, Gumbel-Top-K sampling."""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .embedding import Embedder
from .memory import RetrievedSet
from .skills import SkillBank

PARAM_NAMES = ("W1", "b1", "W2", "b2", "V1", "c1", "v2", "c2")


@dataclass
class ControllerParams:
    """Policy MLP (2D -> H -> D, tanh) and value MLP (2D -> H -> 1, tanh)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    V1: np.ndarray
    c1: np.ndarray
    v2: np.ndarray
    c2: np.ndarray

    @classmethod
    def init(cls, dim: int, hidden: int = 256, seed: int = 0) -> "ControllerParams":
        rng = np.random.default_rng(seed)

        def uniform(fan_out, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=(fan_out, fan_in))

        return cls(
            W1=uniform(hidden, 2 * dim),
            b1=np.zeros(hidden),
            W2=uniform(dim, hidden),
            b2=np.zeros(dim),
            V1=uniform(hidden, 2 * dim),
            c1=np.zeros(hidden),
            v2=uniform(1, hidden)[0],
            c2=np.zeros(()),
        )

    @property
    def dim(self) -> int:
        return self.W2.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "ControllerParams":
        return ControllerParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "ControllerParams":
        return ControllerParams(*(np.zeros_like(a) for a in self.arrays()))

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, flat: np.ndarray) -> "ControllerParams":
        out, i = [], 0
        for a in self.arrays():
            out.append(np.asarray(flat[i: i + a.size], dtype=np.float64).reshape(a.shape).copy())
            i += a.size
        if i != flat.size:
            raise ValueError(f"expected {i} parameters, got {flat.size}")
        return ControllerParams(*out)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    # forward passes; ``x`` may be one feature vector or a (B, 2D) batch

    def policy(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.W1.T + self.b1) @ self.W2.T + self.b2

    def value(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.V1.T + self.c1) @ self.v2 + self.c2

    def to_dict(self) -> dict:
        return {
            n: {
                "shape": list(a.shape),
                "dtype": "float64",
                "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii"),
            }
            for n, a in zip(PARAM_NAMES, self.arrays())
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerParams":
        arrays = []
        for n in PARAM_NAMES:
            entry = d[n]
            a = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8").astype(np.float64)
            arrays.append(a.reshape(entry["shape"]))
        return cls(*arrays)


# -- state and scores ---------------------------------------------------------


def state_features(span_embedding: np.ndarray, memory_embeddings: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate the span embedding with the mean retrieved-memory embedding."""
    span_embedding = np.asarray(span_embedding, dtype=np.float64)
    if len(memory_embeddings):
        pooled = np.mean(np.asarray(memory_embeddings, dtype=np.float64), axis=0)
    else:
        pooled = np.zeros_like(span_embedding)
    return np.concatenate([span_embedding, pooled])


def encode_state(span_text: str, retrieved: RetrievedSet, embedder: Embedder, params: ControllerParams,
                 memory_embeddings: Sequence[np.ndarray] | None = None):
    """Return ``(state_features, h, value)`` for a span and its retrieved memories.

    ``memory_embeddings`` may be supplied to reuse stored item embeddings;
    otherwise the retrieved texts are embedded.
    """
    if memory_embeddings is None:
        memory_embeddings = embedder.embed_batch(retrieved.texts) if len(retrieved) else []
    x = state_features(embedder.embed(span_text), memory_embeddings)
    return x, params.policy(x), float(params.value(x))


def skill_matrix(bank: SkillBank, embedder: Embedder) -> np.ndarray:
    """(N, D) matrix of unit skill-description embeddings."""
    return np.vstack(embedder.embed_batch([s.description for s in bank.skills]))


def score_skills(h: np.ndarray, skill_embeddings: np.ndarray) -> np.ndarray:
    return np.asarray(skill_embeddings) @ np.asarray(h)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


# -- Top-K selection -------------------------------------------------------------


def sample_topk(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Ordered ``k`` indices of the largest Gumbel-perturbed logits."""
    z = np.asarray(z, dtype=np.float64)
    if not 1 <= k <= z.shape[-1]:
        raise ValueError(f"k={k} must be in [1, {z.shape[-1]}]")
    perturbed = z + rng.gumbel(size=z.shape)
    return kernels.topk_rows(perturbed[None, :], k)[0]


def sample_topk_batch(z: np.ndarray, k: int, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` independent Gumbel-Top-K draws from the same logits, shape (n, k)."""
    z = np.asarray(z, dtype=np.float64)
    if not 1 <= k <= z.shape[-1]:
        raise ValueError(f"k={k} must be in [1, {z.shape[-1]}]")
    perturbed = z[None, :] + rng.gumbel(size=(n, z.shape[-1]))
    return kernels.topk_rows(perturbed, k)


def greedy_topk(z: np.ndarray, k: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not 1 <= k <= z.shape[-1]:
        raise ValueError(f"k={k} must be in [1, {z.shape[-1]}]")
    return kernels.topk_rows(z[None, :], k)[0]


def joint_log_prob(p: np.ndarray, action: Sequence[int]) -> float:
    """Log-probability of drawing ``action`` in order, without replacement, from ``p``."""
    p = np.asarray(p, dtype=np.float64)
    a = np.asarray(action, dtype=np.int64)
    if len(set(a.tolist())) != len(a):
        raise ValueError(f"action {a.tolist()} has duplicates")
    if np.any(a < 0) or np.any(a >= p.size):
        raise ValueError(f"action {a.tolist()} out of range for {p.size} skills")
    if np.any(p[a] <= 0.0):
        raise ValueError(f"action {a.tolist()} includes a zero-probability skill")
    return float(kernels.joint_log_prob_rows(p[None, :], a[None, :])[0])


def joint_log_prob_from_logits(z: np.ndarray, action: Sequence[int]) -> float:
    """Same quantity computed stably from logits via restricted log-sum-exps."""
    z = np.asarray(z, dtype=np.float64)
    remaining = np.ones(z.size, dtype=bool)
    total = 0.0
    for a in action:
        zr = z[remaining]
        m = zr.max()
        total += z[a] - m - np.log(np.exp(zr - m).sum())
        remaining[a] = False
    return float(total)


# -- exploration bias toward newly added skills ----------------------------------


def exploration_threshold(t_since_evolve: int, tau0: float, t_explore: int) -> float:
    if t_since_evolve < 0:
        raise ValueError("t_since_evolve must be >= 0")
    if t_explore <= 0 or t_since_evolve > t_explore:
        return 0.0
    return tau0 * (1.0 - t_since_evolve / t_explore)


def _logsumexp(x: np.ndarray) -> float:
    m = np.max(x)
    return float(m + np.log(np.exp(x - m).sum()))


def new_skill_bias(z: np.ndarray, new_positions: Sequence[int], tau: float) -> float:
    """Smallest logit gain for new skills that lifts their softmax mass to ``tau``."""
    if tau >= 1.0:
        raise ValueError("tau must be < 1")
    if tau <= 0.0:
        return 0.0
    if len(new_positions) == 0:
        raise ValueError("new_positions must be non-empty when tau > 0")
    z = np.asarray(z, dtype=np.float64)
    is_new = np.zeros(z.size, dtype=bool)
    is_new[list(new_positions)] = True
    if is_new.all():
        return 0.0
    lse_new = _logsumexp(z[is_new])
    lse_old = _logsumexp(z[~is_new])
    mass = 1.0 / (1.0 + np.exp(lse_old - lse_new))
    if mass >= tau:
        return 0.0
    return float(np.log(tau) - np.log1p(-tau) + lse_old - lse_new)


def apply_new_skill_bias(z: np.ndarray, new_positions: Sequence[int], tau: float) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    delta = new_skill_bias(z, new_positions, tau)
    if delta == 0.0:
        return z.copy()
    out = z.copy()
    out[list(new_positions)] += delta
    return out


# -- controller ---------------------------------------------------------------


@dataclass
class SelectionStep:
    state_features: np.ndarray
    h: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    action: np.ndarray
    joint_log_prob: float
    value: float
    skill_bank_version: int
    logit_bias: np.ndarray
    skill_embeddings: np.ndarray = field(repr=False)


class Controller:
    """Scores skills against the current state and picks an ordered Top-K set."""

    def __init__(self, params: ControllerParams, embedder: Embedder):
        self.params = params
        self.embedder = embedder
        self._skill_cache: tuple[int, tuple, np.ndarray] | None = None

    def skill_embeddings(self, bank: SkillBank) -> np.ndarray:
        # recomputed whenever the bank version (or its descriptions) change
        key = tuple(s.description for s in bank.skills)
        if self._skill_cache is None or self._skill_cache[0] != bank.version or self._skill_cache[1] != key:
            self._skill_cache = (bank.version, key, skill_matrix(bank, self.embedder))
        return self._skill_cache[2]

    def select(
        self,
        span_text: str,
        retrieved: RetrievedSet,
        bank: SkillBank,
        k: int,
        rng: np.random.Generator | None = None,
        *,
        greedy: bool = False,
        new_positions: Sequence[int] = (),
        tau: float = 0.0,
        memory_embeddings: Sequence[np.ndarray] | None = None,
    ) -> SelectionStep:
        k = min(k, len(bank))
        x, h, value = encode_state(span_text, retrieved, self.embedder, self.params, memory_embeddings)
        U = self.skill_embeddings(bank)
        z = score_skills(h, U)
        bias = np.zeros_like(z)
        if tau > 0.0 and len(new_positions):
            bias[list(new_positions)] = new_skill_bias(z, new_positions, tau)
        zb = z + bias
        if greedy:
            action = greedy_topk(zb, k)
        else:
            if rng is None:
                raise ValueError("sampling needs an rng")
            action = sample_topk(zb, k, rng)
        probs = softmax(zb)
        return SelectionStep(
            state_features=x,
            h=h,
            logits=z,
            probs=probs,
            action=action,
            joint_log_prob=joint_log_prob_from_logits(zb, action),
            value=value,
            skill_bank_version=bank.version,
            logit_bias=bias,
            skill_embeddings=U,
        )


def save_checkpoint(path, params: ControllerParams, rng: np.random.Generator | None = None, extra: dict | None = None) -> None:
    doc = {"format": "skillmem-controller/1", "params": params.to_dict()}
    if rng is not None:
        doc["rng_state"] = rng.bit_generator.state
    if extra:
        doc["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[ControllerParams, dict | None]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "skillmem-controller/1":
        raise ValueError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
    return ControllerParams.from_dict(doc["params"]), doc.get("rng_state")
