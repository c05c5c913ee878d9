"""Episodic MDP for dynamic panel purchase and diagnosis.

State is the masked feature vector; actions either buy an unobserved panel
or end the episode with a P/N call.  Rewards follow the shaped table that
linearizes the budgeted-F1 problem: rho * cost for purchases, lambda for a
true positive, 1 for a true negative, 0 otherwise.  With panels purchasable
at most once, every episode ends within D + 1 steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import PanelScheme, PatientRecord, records_matrix
from .errors import ContractError


@dataclass(frozen=True)
class ShapingParams:
    """True-positive weight (>= 0) and cost weight (<= 0) of one shaped MDP."""

    lam: float
    rho: float

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError(f"lambda must be >= 0, got {self.lam}")
        if self.rho > 0:
            raise ContractError(f"rho must be <= 0, got {self.rho}")


@dataclass
class EnvConfig:
    scheme: PanelScheme
    shaping: ShapingParams
    mode: str = "train"            # train: random patient + random mask; eval: visible only
    cost_unit: float = 100.0       # panel costs are divided by this before applying rho
    gamma: float = 1.0

    def __post_init__(self):
        if self.gamma != 1.0:
            raise ContractError("undiscounted episodes only (gamma must be exactly 1)")
        if self.mode not in ("train", "eval"):
            raise ContractError(f"unknown reset mode {self.mode!r}")
        if self.cost_unit <= 0:
            raise ContractError("cost_unit must be positive")

    @property
    def step_cap(self) -> int:
        return self.scheme.n_panels + 1

    @property
    def n_actions(self) -> int:
        return self.scheme.n_panels + 2

    def action_p(self) -> int:
        return self.scheme.n_panels

    def action_n(self) -> int:
        return self.scheme.n_panels + 1


def shaped_reward(cfg: EnvConfig, label: int, action: int) -> float:
    """Reward table of the shaped MDP; panel costs measured in cost units."""
    d_panels = cfg.scheme.n_panels
    if 0 <= action < d_panels:
        return cfg.shaping.rho * cfg.scheme.panels[action].cost / cfg.cost_unit
    if action == d_panels:          # diagnose P
        return cfg.shaping.lam if label == 1 else 0.0
    if action == d_panels + 1:      # diagnose N
        return 1.0 if label == 0 else 0.0
    raise ContractError(f"action {action} outside [0, {d_panels + 1}]")


def embed_state(encoder, classifier, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Policy input: (imputed vector, classifier probabilities, mask).

    Depends only on the observed part of x; masked entries are zeroed before
    the imputer ever sees them, so hidden values cannot leak.
    """
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask)
    single = x.ndim == 1
    if single:
        x, mask = x[None, :], mask[None, :]
    xm = np.where(mask > 0, x, 0.0)
    imputed = encoder.impute(xm, mask)
    probs = classifier.predict_proba(imputed)
    emb = np.concatenate([imputed, probs, mask.astype(np.float64)], axis=1)
    return emb[0] if single else emb


class DiagnosisEnv:
    """Single-episode-at-a-time environment over a fixed record pool."""

    def __init__(self, cfg: EnvConfig, encoder, classifier,
                 records: list[PatientRecord], seed: int = 0):
        if not records:
            raise ContractError("record pool must be nonempty")
        self.cfg = cfg
        self.encoder = encoder
        self.classifier = classifier
        self._x, self._y, _ = records_matrix(records)
        self.rng = np.random.default_rng(seed)
        self._eval_cursor = 0
        self._live = False

    # episode state
    _xi: np.ndarray
    _yi: int
    mask: np.ndarray
    bought: np.ndarray
    episode_cost: float

    def reset(self) -> np.ndarray:
        scheme = self.cfg.scheme
        n = self._x.shape[0]
        if self.cfg.mode == "train":
            i = int(self.rng.integers(n))
            bits = self.rng.random(scheme.n_panels) < 0.5
        else:
            i = self._eval_cursor % n
            self._eval_cursor += 1
            bits = np.zeros(scheme.n_panels, dtype=bool)
        self._xi = self._x[i]
        self._yi = int(self._y[i])
        self.bought = bits.astype(bool)
        self.mask = scheme.mask_from_panel_bits(bits)
        self.episode_cost = 0.0
        self._live = True
        return embed_state(self.encoder, self.classifier, self._xi, self.mask)

    def valid_action_mask(self) -> np.ndarray:
        valid = np.ones(self.cfg.n_actions, dtype=bool)
        valid[:self.cfg.scheme.n_panels] = ~self.bought
        return valid

    def step(self, action: int):
        if not self._live:
            raise ContractError("step() before reset() or after episode end")
        scheme = self.cfg.scheme
        action = int(action)
        reward = shaped_reward(self.cfg, self._yi, action)
        if action < scheme.n_panels:
            if self.bought[action]:
                raise ContractError(
                    f"panel {action} already observed; re-purchase is a policy bug")
            self.bought[action] = True
            self.mask[list(scheme.panels[action].features)] = 1
            self.episode_cost += scheme.panels[action].cost
            emb = embed_state(self.encoder, self.classifier, self._xi, self.mask)
            return emb, reward, False, {"panel": action}
        self._live = False
        diagnosis = "P" if action == self.cfg.action_p() else "N"
        info = {"diagnosis": diagnosis, "label": self._yi,
                "cost": self.episode_cost}
        return None, reward, True, info


@dataclass
class FullPolicy:
    """The composed dynamic policy: imputer, diagnosis head, panel selector."""

    encoder: object
    classifier: object
    selector: object  # act_batch(embeddings, valid_masks, mode, rng) -> actions
