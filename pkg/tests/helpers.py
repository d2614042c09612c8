"""Random PPO instances shared by the trainer and acceptance tests."""
import numpy as np

from skillmem.controller import ControllerParams, SelectionStep, joint_log_prob_from_logits, softmax
from skillmem.embedding import normalize
from skillmem.trainer import TrainingConfig, Transition


def random_instance(seed, n_skills=4, k=2, steps=3, dim=4, hidden=5, config=None):
    """A tiny batch whose behaviour log-probs sit near (not at) the current policy."""
    rng = np.random.default_rng(seed)
    params = ControllerParams.init(dim, hidden=hidden, seed=seed)
    params = params.unflatten(params.flatten() + rng.normal(scale=0.3, size=params.size))
    U = np.vstack([normalize(rng.normal(size=dim)) for _ in range(n_skills)])
    batch = []
    for t in range(steps):
        x = rng.normal(size=2 * dim)
        h = params.policy(x)
        z = U @ h
        bias = np.zeros(n_skills)
        if t == 0:
            bias[-1] = 0.7
        action = rng.permutation(n_skills)[:k]
        logp = joint_log_prob_from_logits(z + bias, action)
        step = SelectionStep(x, h, z, softmax(z + bias), action, logp, float(params.value(x)), 0, bias, U)
        batch.append(
            Transition(
                step=step,
                reward=float(t == steps - 1),
                done=t == steps - 1,
                behavior_log_prob=logp + rng.normal(scale=0.05),
                advantage=float(rng.normal()),
                ret=float(rng.normal()),
            )
        )
    config = config or TrainingConfig(value_coef=0.5, entropy_coef=0.01, clip_eps=0.2)
    return batch, params, config
