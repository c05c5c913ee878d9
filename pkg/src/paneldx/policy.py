"""Panel/prediction selector trained by proximal policy optimization.

Actor and critic are dense nets over the state embedding (separate trunks
by default; a shared trunk is available behind a config switch).  Invalid
actions (already-purchased panels) are masked out of the categorical by a
large negative logit offset, which zeroes both their probability and their
gradient exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .ndgrad import Adam, DenseNet, Tensor, constant, gather_rows, \
    logsumexp_rows, minimum, save_arrays, zero_grads

MASK_OFFSET = -1e9


@dataclass
class PpoConfig:
    clip: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    gae_lambda: float = 0.95
    timesteps: int = 1024          # rollout length per update
    epochs: int = 10
    minibatch: int = 128
    learning_rate: float = 1e-4
    hidden: int = 128
    shared_trunk: bool = False
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ContractError("clip must lie in (0, 1)")
        if self.value_coef < 0 or self.entropy_coef < 0:
            raise ContractError("loss coefficients must be >= 0")


class ActorCritic:
    """Policy logits over D + 2 actions plus a scalar state value."""

    def __init__(self, embed_dim: int, n_actions: int, cfg: PpoConfig, seed: int = 0):
        self.cfg = cfg
        self.embed_dim = embed_dim
        self.n_actions = n_actions
        rng = np.random.default_rng(seed)
        h = cfg.hidden
        if cfg.shared_trunk:
            self.trunk = DenseNet([embed_dim, h, h], activation="relu", rng=rng)
            self.actor_head = DenseNet([h, n_actions], rng=rng)
            self.critic_head = DenseNet([h, 1], rng=rng)
        else:
            self.trunk = None
            self.actor_head = DenseNet([embed_dim, h, h, n_actions],
                                       activation="relu", rng=rng)
            self.critic_head = DenseNet([embed_dim, h, h, 1],
                                        activation="relu", rng=rng)
        self.actor_head.weights[-1].data *= 0.01   # near-uniform initial policy
        self._opt = None                           # Adam state lives across updates

    @property
    def params(self):
        out = []
        if self.trunk is not None:
            out.extend(self.trunk.params)
        out.extend(self.actor_head.params)
        out.extend(self.critic_head.params)
        return out

    def _trunk_np(self, emb: np.ndarray) -> np.ndarray:
        h = emb
        if self.trunk is not None:
            h = self.trunk.forward_np(h)
            h = np.maximum(h, 0.0)
        return h

    def logits_values_np(self, emb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        emb = np.atleast_2d(emb)
        h = self._trunk_np(emb)
        return self.actor_head.forward_np(h), self.critic_head.forward_np(h)[:, 0]

    def logits_values_t(self, emb: np.ndarray) -> tuple[Tensor, Tensor]:
        x = constant(np.atleast_2d(emb))
        if self.trunk is not None:
            h = self.trunk.forward(x).relu()
        else:
            h = x
        return self.actor_head.forward(h), self.critic_head.forward(h)

    def act_batch(self, emb: np.ndarray, valid: np.ndarray, mode: str,
                  rng: np.random.Generator) -> np.ndarray:
        actions, _, _ = act_detailed(self, emb, valid, mode, rng)
        return actions

    def clone(self) -> "ActorCritic":
        dup = ActorCritic.__new__(ActorCritic)
        dup.cfg = self.cfg
        dup.embed_dim = self.embed_dim
        dup.n_actions = self.n_actions
        dup.trunk = self.trunk.clone() if self.trunk is not None else None
        dup.actor_head = self.actor_head.clone()
        dup.critic_head = self.critic_head.clone()
        dup._opt = None
        return dup

    def save(self, path: str) -> None:
        arrays = {}
        if self.trunk is not None:
            arrays.update(self.trunk.state_arrays("trunk."))
        arrays.update(self.actor_head.state_arrays("actor."))
        arrays.update(self.critic_head.state_arrays("critic."))
        meta = {"kind": "policy", "embed_dim": self.embed_dim,
                "n_actions": self.n_actions, "hidden": self.cfg.hidden,
                "shared_trunk": self.cfg.shared_trunk}
        save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, arrays: dict, meta: dict) -> "ActorCritic":
        cfg = PpoConfig(hidden=int(meta["hidden"]),
                        shared_trunk=bool(meta["shared_trunk"]))
        pol = cls(int(meta["embed_dim"]), int(meta["n_actions"]), cfg)
        if pol.trunk is not None:
            pol.trunk.load_state_arrays(arrays, "trunk.")
        pol.actor_head.load_state_arrays(arrays, "actor.")
        pol.critic_head.load_state_arrays(arrays, "critic.")
        pol._opt = None
        return pol


def masked_log_probs_np(logits: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Log-probabilities of the categorical renormalized over valid actions."""
    shifted = logits + np.where(valid, 0.0, MASK_OFFSET)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - logz


def act_detailed(policy: ActorCritic, emb: np.ndarray, valid: np.ndarray,
                 mode: str, rng: np.random.Generator):
    """Sample (train) or argmax (eval) actions; returns (a, log-prob, value)."""
    emb = np.atleast_2d(emb)
    valid = np.atleast_2d(valid)
    if not valid.any(axis=1).all():
        raise ContractError("a state offered no valid action")
    logits, values = policy.logits_values_np(emb)
    logp = masked_log_probs_np(logits, valid)
    if mode == "eval":
        actions = logp.argmax(axis=1)
    elif mode == "train":
        # Gumbel-max sampling: masked actions sit at -1e9 and can never win
        u = rng.random(logp.shape)
        actions = (logp - np.log(-np.log(u))).argmax(axis=1)
    else:
        raise ContractError(f"unknown act mode {mode!r}")
    chosen = logp[np.arange(len(emb)), actions]
    return actions.astype(np.int64), chosen, values


def act(policy: ActorCritic, emb: np.ndarray, valid: np.ndarray, mode: str,
        rng: np.random.Generator) -> tuple[int, float, float]:
    """Single-state convenience wrapper around act_detailed."""
    a, logp, v = act_detailed(policy, emb, valid, mode, rng)
    return int(a[0]), float(logp[0]), float(v[0])


@dataclass
class RolloutBuffer:
    """Ordered on-policy steps; doubles as the sample pool for the classifier."""

    embeddings: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    valid_masks: list = field(default_factory=list)
    labels: list = field(default_factory=list)          # episode label, every step
    classifier_versions: list = field(default_factory=list)

    def add(self, emb, action, log_prob, reward, value, done, valid,
            label, classifier_version):
        self.embeddings.append(np.asarray(emb, dtype=np.float64))
        self.actions.append(int(action))
        self.log_probs.append(float(log_prob))
        self.rewards.append(float(reward))
        self.values.append(float(value))
        self.dones.append(bool(done))
        self.valid_masks.append(np.asarray(valid, dtype=bool))
        self.labels.append(int(label))
        self.classifier_versions.append(int(classifier_version))

    def __len__(self):
        return len(self.actions)

    def check_well_formed(self) -> None:
        if len(self) == 0 or not self.dones[-1]:
            raise ContractError("buffer must end on an episode boundary")

    def arrays(self):
        return (np.stack(self.embeddings), np.array(self.actions),
                np.array(self.log_probs), np.array(self.rewards),
                np.array(self.values), np.array(self.dones, dtype=bool),
                np.stack(self.valid_masks))


def gae_advantages(buffer: RolloutBuffer, gamma: float = 1.0,
                   gae_lambda: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Per-episode backward recursion with terminal bootstrap value 0."""
    buffer.check_well_formed()
    rewards = np.array(buffer.rewards)
    values = np.array(buffer.values)
    dones = np.array(buffer.dones, dtype=bool)
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        next_value = 0.0 if dones[t] else values[t + 1]
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta if dones[t] else delta + gamma * gae_lambda * running
        adv[t] = running
    return adv, adv + values


def ppo_surrogate(ratio, advantages, clip):
    """Per-sample clipped objective min(r*A, clip(r)*A) as a taped tensor."""
    adv = constant(advantages)
    return minimum(ratio * adv, ratio.clip(1.0 - clip, 1.0 + clip) * adv)


def ppo_update(policy: ActorCritic, buffer: RolloutBuffer, cfg: PpoConfig,
               rng: np.random.Generator) -> dict:
    """Several epochs of clipped-surrogate ascent against a frozen snapshot."""
    buffer.check_well_formed()
    emb, actions, old_logp, _, _, _, valid = buffer.arrays()
    advantages, value_targets = gae_advantages(buffer, 1.0, cfg.gae_lambda)
    if cfg.normalize_advantages and len(advantages) > 1:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

    if policy._opt is None:
        policy._opt = Adam(policy.params, lr=cfg.learning_rate)
    opt = policy._opt
    n = len(buffer)
    diag = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "batches": 0}
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            logits, values = policy.logits_values_t(emb[idx])
            offset = np.where(valid[idx], 0.0, MASK_OFFSET)
            shifted = logits + constant(offset)
            logp_all = shifted - logsumexp_rows(shifted)
            logp = gather_rows(logp_all, actions[idx])
            ratio = (logp - constant(old_logp[idx][:, None])).exp()
            if not np.all(np.isfinite(ratio.data)):
                raise NumericError("non-finite probability ratio in update")
            surr = ppo_surrogate(ratio, advantages[idx][:, None], cfg.clip)
            policy_term = surr.mean()
            vf_term = (values - constant(value_targets[idx][:, None])).square().mean()
            probs = logp_all.exp()
            entropy = -(probs * logp_all).sum(axis=1, keepdims=True).mean()
            loss = -(policy_term - cfg.value_coef * vf_term
                     + cfg.entropy_coef * entropy)
            zero_grads(policy.params)
            loss.backward()
            opt.step()
            diag["policy_loss"] += float(-policy_term.data)
            diag["value_loss"] += float(vf_term.data)
            diag["entropy"] += float(entropy.data)
            diag["batches"] += 1
    for key in ("policy_loss", "value_loss", "entropy"):
        diag[key] /= max(diag["batches"], 1)
    return diag
