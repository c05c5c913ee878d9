"""Confusion accounting and the F1 / AM / AUROC / cost metrics.

Confusion cells are normalized probabilities (they sum to 1), which makes
F1 = 2*TP / (1 + TP - TN) and keeps the AM score linear in (TP, TN) once
the class ratio is known.  Costs are reported as mean currency per episode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PatientRecord, records_matrix
from .env import EnvConfig, FullPolicy, embed_state, shaped_reward
from .errors import ContractError, MetricError


@dataclass(frozen=True)
class ConfusionTally:
    """Normalized confusion cells plus accumulated episode cost."""

    tp: float
    tn: float
    fp: float
    fn: float
    total_cost: float = 0.0
    n_episodes: int = 0

    def __post_init__(self):
        cells = (self.tp, self.tn, self.fp, self.fn)
        if any(c < -1e-12 or c > 1 + 1e-12 for c in cells):
            raise ContractError(f"confusion cells outside [0,1]: {cells}")
        if self.n_episodes > 0 and abs(sum(cells) - 1.0) > 1e-12:
            raise ContractError(f"confusion cells must sum to 1, got {sum(cells)}")

    @classmethod
    def from_counts(cls, tp: int, tn: int, fp: int, fn: int,
                    total_cost: float = 0.0) -> "ConfusionTally":
        n = tp + tn + fp + fn
        if n == 0:
            raise ContractError("empty tally")
        return cls(tp / n, tn / n, fp / n, fn / n, total_cost, n)

    @property
    def mean_cost(self) -> float:
        return self.total_cost / self.n_episodes if self.n_episodes else 0.0

    def merge(self, other: "ConfusionTally") -> "ConfusionTally":
        """Associative combination of evaluation shards."""
        n = self.n_episodes + other.n_episodes
        if n == 0:
            raise ContractError("merging two empty tallies")
        w1, w2 = self.n_episodes / n, other.n_episodes / n
        return ConfusionTally(
            self.tp * w1 + other.tp * w2, self.tn * w1 + other.tn * w2,
            self.fp * w1 + other.fp * w2, self.fn * w1 + other.fn * w2,
            self.total_cost + other.total_cost, n)


def f1_score(t: ConfusionTally) -> float:
    """2*TP / (1 + TP - TN); a detector with no true positives scores 0."""
    den = 1.0 + t.tp - t.tn
    if den == 0.0:
        return 0.0
    return 2.0 * t.tp / den


def am_score(t: ConfusionTally, class_ratio: float) -> float:
    """Mean of TPR and TNR; class_ratio is negatives per positive."""
    if class_ratio <= 0:
        raise ContractError("class_ratio must be positive")
    if abs((t.tp + t.fn) - 1.0 / (1.0 + class_ratio)) > 1e-9:
        raise ContractError(
            f"tally positives {t.tp + t.fn:.12f} inconsistent with class ratio "
            f"{class_ratio} (expected {1.0 / (1.0 + class_ratio):.12f})")
    tpr = t.tp / (t.tp + t.fn)
    tnr = t.tn / (t.tn + t.fp)
    return 0.5 * (tpr + tnr)


def auroc(scores: list[tuple[float, int]]) -> float:
    """Mann-Whitney rank statistic; tied scores contribute one half."""
    values = np.array([s for s, _ in scores], dtype=np.float64)
    labels = np.array([y for _, y in scores], dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC undefined without both classes")
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class EvalReport:
    tally: ConfusionTally
    scores: list[tuple[float, int]]   # terminal positive-class probability, label
    panel_rates: np.ndarray           # fraction of episodes buying each panel
    shaped_return: float              # mean shaped return per episode

    @property
    def auroc(self) -> float:
        return auroc(self.scores)


def evaluate_policy(policy: FullPolicy, records: list[PatientRecord],
                    cfg: EnvConfig, mode: str = "eval",
                    seed: int = 0) -> ConfusionTally:
    """One eval-reset episode per record; each panel charged at most once."""
    return evaluate_detailed(policy, records, cfg, mode=mode, seed=seed).tally


def evaluate_detailed(policy: FullPolicy, records: list[PatientRecord],
                      cfg: EnvConfig, mode: str = "eval",
                      seed: int = 0) -> EvalReport:
    """Lockstep evaluation: all episodes advance together so that imputer,
    classifier and selector run on batched inputs."""
    if not records:
        raise ContractError("no records to evaluate")
    scheme = cfg.scheme
    x, y, _ = records_matrix(records)
    n, d = x.shape
    n_panels = scheme.n_panels
    rng = np.random.default_rng(seed)

    masks = np.tile(scheme.initial_mask(), (n, 1))
    bought = np.zeros((n, n_panels), dtype=bool)
    done = np.zeros(n, dtype=bool)
    cost = np.zeros(n)
    ret = np.zeros(n)
    pred_pos = np.zeros(n, dtype=bool)
    score = np.zeros(n)

    for _ in range(cfg.step_cap):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        emb = embed_state(policy.encoder, policy.classifier,
                          x[active], masks[active])
        valid = np.ones((active.size, cfg.n_actions), dtype=bool)
        valid[:, :n_panels] = ~bought[active]
        actions = policy.selector.act_batch(emb, valid, mode, rng)
        for row, i in enumerate(active):
            a = int(actions[row])
            ret[i] += shaped_reward(cfg, int(y[i]), a)
            if a < n_panels:
                bought[i, a] = True
                masks[i, list(scheme.panels[a].features)] = 1
                cost[i] += scheme.panels[a].cost
            else:
                done[i] = True
                pred_pos[i] = a == cfg.action_p()
                score[i] = emb[row, d + 1]   # classifier P-probability block
    if not done.all():
        raise ContractError("policy failed to terminate within the step cap")

    tp = int(np.sum(pred_pos & (y == 1)))
    tn = int(np.sum(~pred_pos & (y == 0)))
    fp = int(np.sum(pred_pos & (y == 0)))
    fn = int(np.sum(~pred_pos & (y == 1)))
    tally = ConfusionTally.from_counts(tp, tn, fp, fn, total_cost=float(cost.sum()))
    return EvalReport(tally=tally,
                      scores=[(float(s), int(lab)) for s, lab in zip(score, y)],
                      panel_rates=bought.mean(axis=0),
                      shaped_return=float(ret.mean()))
