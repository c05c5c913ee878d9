"""Diagnosis head: completed state -> probability over {N, P}.

A two-logit dense net trained by class-weighted cross entropy with plain
gradient steps, the update rule the end-to-end loop prescribes.  Plain
steps also give the exact homogeneity property: scaling both class weights
by c and the stepsize by 1/c leaves the trajectory unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .ndgrad import DenseNet, Sgd, constant, gather_rows, logsumexp_rows, \
    save_arrays, zero_grads


@dataclass
class WeightedCEConfig:
    weight_neg: float = 1.0
    weight_pos: float = 5.0
    learning_rate: float = 5e-4
    batch_size: int = 256
    hidden: int = 64

    def __post_init__(self):
        if self.weight_neg < 0 or self.weight_pos < 0:
            raise ContractError("class weights must be nonnegative")
        if self.weight_neg == 0 and self.weight_pos == 0:
            raise ContractError("at least one class weight must be positive")


def softmax_pair(logits: np.ndarray) -> np.ndarray:
    logits = np.atleast_2d(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class Classifier:
    """3-layer relu net with two output logits, column order (N, P)."""

    def __init__(self, d: int, cfg: WeightedCEConfig, seed: int = 0):
        self.cfg = cfg
        self.d = d
        rng = np.random.default_rng(seed)
        self.net = DenseNet([d, cfg.hidden, cfg.hidden, 2], activation="relu",
                            rng=rng)
        self.version = 0

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        probs = softmax_pair(self.net.forward_np(np.atleast_2d(x)))
        return probs[0] if single else probs

    def clone(self) -> "Classifier":
        dup = Classifier.__new__(Classifier)
        dup.cfg = self.cfg
        dup.d = self.d
        dup.net = self.net.clone()
        dup.version = self.version
        return dup

    def save(self, path: str) -> None:
        meta = {"kind": "classifier", "d": self.d, "hidden": self.cfg.hidden,
                "weight_neg": self.cfg.weight_neg, "weight_pos": self.cfg.weight_pos}
        save_arrays(path, self.net.state_arrays(), meta)

    @classmethod
    def load(cls, arrays: dict, meta: dict) -> "Classifier":
        cfg = WeightedCEConfig(weight_neg=float(meta["weight_neg"]),
                               weight_pos=float(meta["weight_pos"]),
                               hidden=int(meta["hidden"]))
        clf = cls(int(meta["d"]), cfg)
        clf.net.load_state_arrays(arrays)
        return clf


def weighted_ce_loss(net: DenseNet, x: np.ndarray, y: np.ndarray,
                     w_neg: float, w_pos: float):
    """Mean class-weighted cross entropy as a taped scalar."""
    logits = net.forward(constant(np.atleast_2d(x)))
    lse = logsumexp_rows(logits)
    picked = gather_rows(logits, np.asarray(y, dtype=np.int64))
    weights = np.where(np.asarray(y) == 1, w_pos, w_neg)[:, None]
    return ((lse - picked) * constant(weights)).mean()


def ce_train_step(clf: Classifier, x: np.ndarray, y: np.ndarray,
                  learning_rate: float | None = None) -> float:
    """One plain gradient step on a minibatch; returns the loss value."""
    if len(np.atleast_1d(y)) == 0:
        raise ContractError("empty minibatch")
    lr = clf.cfg.learning_rate if learning_rate is None else learning_rate
    zero_grads(clf.net.params)
    loss = weighted_ce_loss(clf.net, x, y, clf.cfg.weight_neg, clf.cfg.weight_pos)
    if not np.isfinite(loss.data):
        raise NumericError("non-finite classifier loss")
    loss.backward()
    Sgd(clf.net.params, lr).step()
    clf.version += 1
    return float(loss.data)
