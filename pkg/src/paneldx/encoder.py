"""Posterior state encoder: normalizing flow + online EM in latent space.

Completes a partially observed feature vector by mapping it through the
inverse flow to a latent space kept approximately Gaussian, replacing the
missing latent coordinates by their conditional mean under the running
N(mean, cov) estimate, and mapping back.  With flow depth 0 the whole
encoder degenerates to plain Gaussian EM imputation in data space.

Training interleaves three moves per minibatch: a gradient step on the
batch negative log-likelihood, one online EM update of the latent Gaussian,
and a gradient step on the re-imputation objective, which adds a squared
distance to ground truth (available here because masks are synthetic).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .ndgrad import Adam, DenseNet, Tensor, constant, save_arrays, zero_grads

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class EmConfig:
    flow_depth: int = 4
    coupling_hidden: int = 64
    scale_cap: float = 3.0          # |log-scale| bound inside coupling layers
    alpha: float = 1e3              # weight of the distance-to-ground-truth term
    batch_size: int = 256
    iterations: int = 500
    learning_rate: float = 1e-3
    ridge: float = 1e-6
    em_decay: float = 0.1           # eta_t = 1 / (1 + decay * t) ** power
    em_power: float = 0.6
    em_floor: float = 0.01

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError("alpha must be >= 0")
        if self.flow_depth < 0:
            raise ContractError("flow_depth must be >= 0")


def eta_schedule(t: int, cfg: EmConfig) -> float:
    """Online EM mixing weight at step t (1-based), clipped below."""
    eta = 1.0 / (1.0 + cfg.em_decay * t) ** cfg.em_power
    return max(eta, cfg.em_floor)


# -- latent Gaussian ------------------------------------------------------------


@dataclass
class LatentGaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if not np.allclose(self.cov, self.cov.T, atol=1e-12):
            raise ContractError("covariance must be symmetric")

    @classmethod
    def standard(cls, d: int) -> "LatentGaussian":
        return cls(np.zeros(d), np.eye(d))

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    def chol(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            raise NumericError("latent covariance lost positive definiteness")

    def logpdf(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        chol = self.chol()
        y = np.linalg.solve(chol, (z - self.mean).T).T
        quad = np.sum(y * y, axis=1)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        return -0.5 * (quad + logdet + self.d * LOG_2PI)


def _split_indices(mask_row: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    obs = np.flatnonzero(mask_row > 0)
    mis = np.flatnonzero(mask_row == 0)
    return obs, mis


def e_step(base: LatentGaussian, z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace missing coordinates by their conditional mean given observed.

    Accepts a single vector or a batch; rows are grouped by mask pattern so
    each distinct observed set costs one linear solve.
    """
    single = np.asarray(z).ndim == 1
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    mask = np.atleast_2d(mask)
    out = z.copy()
    for pattern, rows in _group_by_mask(mask):
        obs, mis = _split_indices(pattern)
        if mis.size == 0:
            continue
        if obs.size == 0:
            out[np.ix_(rows, mis)] = base.mean[mis]
            continue
        s_oo = base.cov[np.ix_(obs, obs)]
        s_mo = base.cov[np.ix_(mis, obs)]
        dev = z[np.ix_(rows, obs)] - base.mean[obs]
        gain = np.linalg.solve(s_oo, s_mo.T).T      # Sigma_mo Sigma_oo^-1
        out[np.ix_(rows, mis)] = base.mean[mis] + dev @ gain.T
    return out[0] if single else out


def _group_by_mask(mask: np.ndarray):
    mask = np.atleast_2d(mask)
    keys = {}
    for i, row in enumerate(mask):
        keys.setdefault(tuple(int(v) for v in row), []).append(i)
    for pattern, rows in keys.items():
        yield np.array(pattern, dtype=np.uint8), np.array(rows)


def conditional_cov(base: LatentGaussian, pattern: np.ndarray) -> np.ndarray:
    """Covariance correction for the missing block: S_mm - S_mo S_oo^-1 S_om,
    embedded at the missing positions of a d x d zero matrix."""
    obs, mis = _split_indices(pattern)
    corr = np.zeros((base.d, base.d))
    if mis.size == 0:
        return corr
    if obs.size == 0:
        corr[np.ix_(mis, mis)] = base.cov[np.ix_(mis, mis)]
        return corr
    s_oo = base.cov[np.ix_(obs, obs)]
    s_mo = base.cov[np.ix_(mis, obs)]
    corr[np.ix_(mis, mis)] = base.cov[np.ix_(mis, mis)] - \
        s_mo @ np.linalg.solve(s_oo, s_mo.T)
    return corr


def m_step_online(base: LatentGaussian, z_completed: np.ndarray, mask: np.ndarray,
                  eta: float, ridge: float = 1e-6) -> LatentGaussian:
    """Mix batch EM statistics into the running estimate.

    The batch second moment is taken about the batch mean and includes the
    per-sample conditional covariance of the imputed block, which is what
    makes a full-batch eta=1 sweep an exact EM step with monotone observed
    likelihood.
    """
    if not 0.0 < eta <= 1.0:
        raise ContractError("eta must lie in (0, 1]")
    z = np.atleast_2d(z_completed)
    mask = np.atleast_2d(mask)
    n = z.shape[0]
    if n == 0:
        raise ContractError("empty batch in M-step")
    mu_batch = z.mean(axis=0)
    dev = z - mu_batch
    sigma_batch = dev.T @ dev / n
    for pattern, rows in _group_by_mask(mask):
        sigma_batch += (rows.size / n) * conditional_cov(base, pattern)
    new_mean = eta * mu_batch + (1.0 - eta) * base.mean
    new_cov = eta * sigma_batch + (1.0 - eta) * base.cov
    new_cov = 0.5 * (new_cov + new_cov.T) + ridge * np.eye(base.d)
    return LatentGaussian(new_mean, new_cov)


def observed_loglik(base: LatentGaussian, z: np.ndarray, mask: np.ndarray) -> float:
    """Total log-likelihood of the observed coordinates only."""
    z = np.atleast_2d(z)
    mask = np.atleast_2d(mask)
    total = 0.0
    for pattern, rows in _group_by_mask(mask):
        obs, _ = _split_indices(pattern)
        if obs.size == 0:
            continue
        sub = LatentGaussian(base.mean[obs], base.cov[np.ix_(obs, obs)])
        total += float(np.sum(sub.logpdf(z[np.ix_(rows, obs)])))
    return total


# -- coupling flow ----------------------------------------------------------------


class CouplingLayer:
    """Affine coupling: half the coordinates pass through and parameterize an
    affine map of the other half.  Direction convention: forward is latent to
    data.  Log-scales are tanh-bounded for invertibility conditioning."""

    def __init__(self, d: int, hidden: int, keep: np.ndarray, scale_cap: float,
                 rng: np.random.Generator):
        self.keep = keep.astype(np.float64)          # 1 = pass-through half
        self.change = 1.0 - self.keep
        self.scale_cap = scale_cap
        self.scale_net = DenseNet([d, hidden, d], activation="tanh", rng=rng)
        self.shift_net = DenseNet([d, hidden, d], activation="tanh", rng=rng)
        # start near the identity map
        self.scale_net.weights[-1].data *= 0.01
        self.shift_net.weights[-1].data *= 0.01

    @property
    def params(self):
        return self.scale_net.params + self.shift_net.params

    def _nets_np(self, kept: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = self.scale_cap * np.tanh(self.scale_net.forward_np(kept) / self.scale_cap)
        t = self.shift_net.forward_np(kept)
        return s * self.change, t * self.change

    def forward_np(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        kept = z * self.keep
        s, t = self._nets_np(kept)
        x = kept + self.change * (z * np.exp(s) + t)
        return x, np.sum(s, axis=1)

    def inverse_np(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        kept = x * self.keep
        s, t = self._nets_np(kept)
        z = kept + self.change * ((x - t) * np.exp(-s))
        return z, -np.sum(s, axis=1)

    def _nets_t(self, kept: Tensor) -> tuple[Tensor, Tensor]:
        cap = self.scale_cap
        s_raw = self.scale_net.forward(kept)
        s = (s_raw * (1.0 / cap)).tanh() * cap * constant(self.change)
        t = self.shift_net.forward(kept) * constant(self.change)
        return s, t

    def forward_t(self, z: Tensor) -> tuple[Tensor, Tensor]:
        kept = z * constant(self.keep)
        s, t = self._nets_t(kept)
        x = kept + constant(self.change) * (z * s.exp() + t)
        return x, s.sum(axis=1, keepdims=True)

    def inverse_t(self, x: Tensor) -> tuple[Tensor, Tensor]:
        kept = x * constant(self.keep)
        s, t = self._nets_t(kept)
        z = kept + constant(self.change) * ((x - t) * (-s).exp())
        return z, -s.sum(axis=1, keepdims=True)


class CouplingFlow:
    """Stack of coupling layers with alternating half-masks; depth 0 = identity."""

    def __init__(self, d: int, depth: int, hidden: int = 64, scale_cap: float = 3.0,
                 seed: int = 0):
        self.d = d
        rng = np.random.default_rng(seed)
        self.layers: list[CouplingLayer] = []
        for k in range(depth):
            keep = np.array([(i + k) % 2 for i in range(d)], dtype=np.float64)
            self.layers.append(CouplingLayer(d, hidden, keep, scale_cap, rng))

    @property
    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params)
        return out

    def forward_np(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        logdet = np.zeros(z.shape[0])
        for layer in self.layers:
            z, ld = layer.forward_np(z)
            logdet += ld
        return z, logdet

    def inverse_np(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        logdet = np.zeros(x.shape[0])
        for layer in reversed(self.layers):
            x, ld = layer.inverse_np(x)
            logdet += ld
        return x, logdet

    def forward_t(self, z: Tensor) -> tuple[Tensor, Tensor]:
        logdet = constant(np.zeros((z.shape[0], 1)))
        for layer in self.layers:
            z, ld = layer.forward_t(z)
            logdet = logdet + ld
        return z, logdet

    def inverse_t(self, x: Tensor) -> tuple[Tensor, Tensor]:
        logdet = constant(np.zeros((x.shape[0], 1)))
        for layer in reversed(self.layers):
            x, ld = layer.inverse_t(x)
            logdet = logdet + ld
        return x, logdet


def _gaussian_nll_t(z: Tensor, base: LatentGaussian) -> Tensor:
    """Per-row negative Gaussian log-density as a (n,1) tensor; the base
    parameters are constants on the tape (they are EM-updated, not learned)."""
    chol = base.chol()
    w = np.linalg.inv(chol)                    # quad = || W (z - mu) ||^2
    dev = z + constant(-base.mean)
    y = dev @ constant(w.T)
    quad = y.square().sum(axis=1, keepdims=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return 0.5 * (quad + constant(logdet + base.d * LOG_2PI))


def nll_loss(flow: CouplingFlow, base: LatentGaussian, x: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the flow pushforward of the base
    Gaussian, via the inverse map and its change-of-variables term."""
    if not np.all(np.isfinite(x)):
        raise ContractError("non-finite input to nll_loss")
    z, logdet_inv = flow.inverse_t(constant(np.atleast_2d(x)))
    return (_gaussian_nll_t(z, base) - logdet_inv).mean()


def reimputation_loss(flow: CouplingFlow, base: LatentGaussian, z_hat: np.ndarray,
                      x_true: np.ndarray, known: np.ndarray, alpha: float) -> Tensor:
    """Objective of the second gradient step: NLL of the re-imputed points
    (density written at the latent point, so only the forward log-det carries
    gradient) plus alpha times the squared distance to ground truth on cells
    where ground truth exists."""
    zc = constant(np.atleast_2d(z_hat))
    x_tilde, logdet_fwd = flow.forward_t(zc)
    base_logp = base.logpdf(np.atleast_2d(z_hat))[:, None]
    nll = (constant(-base_logp) + logdet_fwd).mean()
    gap = (x_tilde + constant(-np.atleast_2d(x_true))) * constant(known)
    reg = gap.square().sum(axis=1, keepdims=True).mean()
    return nll + alpha * reg


# -- the trained encoder ------------------------------------------------------------


@dataclass
class StateEncoder:
    """Frozen imputer: observed coordinates pass through untouched, missing
    ones are filled by inverse-flow, latent conditional mean, forward-flow."""

    flow: CouplingFlow
    base: LatentGaussian
    cfg: EmConfig
    fill_values: np.ndarray     # data-space initialization for missing cells

    def impute(self, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        mb = np.atleast_2d(mask).astype(np.float64)
        if not np.all(np.isfinite(np.where(mb > 0, xb, 0.0))):
            raise ContractError("non-finite observed value passed to impute")
        out = np.where(mb > 0, xb, self.fill_values)
        rows = np.flatnonzero((mb == 0).any(axis=1))
        if rows.size:
            z, _ = self.flow.inverse_np(out[rows])
            z_hat = e_step(self.base, z, mb[rows])
            filled, _ = self.flow.forward_np(np.atleast_2d(z_hat))
            out[rows] = np.where(mb[rows] > 0, xb[rows], filled)
        if not np.all(np.isfinite(out)):
            raise NumericError("imputation produced non-finite values")
        return out[0] if single else out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"base.mean": self.base.mean, "base.cov": self.base.cov,
                  "fill": self.fill_values}
        for k, layer in enumerate(self.flow.layers):
            arrays.update(layer.scale_net.state_arrays(f"flow{k}.scale."))
            arrays.update(layer.shift_net.state_arrays(f"flow{k}.shift."))
            arrays[f"flow{k}.keep"] = layer.keep
        return arrays

    def save(self, path: str) -> None:
        meta = {"kind": "encoder", "d": self.base.d,
                "flow_depth": self.cfg.flow_depth,
                "coupling_hidden": self.cfg.coupling_hidden,
                "scale_cap": self.cfg.scale_cap,
                "alpha": self.cfg.alpha}
        save_arrays(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, arrays: dict[str, np.ndarray], meta: dict) -> "StateEncoder":
        cfg = EmConfig(flow_depth=int(meta["flow_depth"]),
                       coupling_hidden=int(meta["coupling_hidden"]),
                       scale_cap=float(meta["scale_cap"]),
                       alpha=float(meta["alpha"]))
        d = int(meta["d"])
        flow = CouplingFlow(d, cfg.flow_depth, cfg.coupling_hidden, cfg.scale_cap)
        for k, layer in enumerate(flow.layers):
            layer.scale_net.load_state_arrays(arrays, f"flow{k}.scale.")
            layer.shift_net.load_state_arrays(arrays, f"flow{k}.shift.")
            layer.keep = arrays[f"flow{k}.keep"]
            layer.change = 1.0 - layer.keep
        base = LatentGaussian(arrays["base.mean"], arrays["base.cov"])
        return cls(flow, base, cfg, arrays["fill"])


def pretrain(x: np.ndarray, masks: np.ndarray, cfg: EmConfig, seed: int,
             known: np.ndarray | None = None) -> StateEncoder:
    """Fit flow and latent Gaussian on masked training data.

    x holds the ground-truth vectors, masks the synthetic observation
    patterns; `known` flags cells whose ground truth exists at the source
    (source-missing cells never enter the supervision term).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    masks = np.atleast_2d(masks).astype(np.float64)
    n, d = x.shape
    if known is None:
        known = np.ones_like(masks)
    rng = np.random.default_rng(seed)

    obs = np.where(masks > 0, x, np.nan)
    with np.errstate(invalid="ignore"):
        col_mean = np.nanmean(obs, axis=0)
        col_var = np.nanvar(obs, axis=0)
    col_mean = np.where(np.isfinite(col_mean), col_mean, 0.0)
    col_var = np.where(np.isfinite(col_var) & (col_var > 1e-8), col_var, 1.0)

    flow = CouplingFlow(d, cfg.flow_depth, cfg.coupling_hidden, cfg.scale_cap,
                        seed=seed)
    base = LatentGaussian(col_mean.copy(), np.diag(col_var))
    x_hat = np.where(masks > 0, x, col_mean)
    params = flow.params
    opt = Adam(params, lr=cfg.learning_rate) if params else None

    for t in range(1, cfg.iterations + 1):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        xb, mb, kb = x_hat[idx], masks[idx], known[idx]

        if opt is not None:
            zero_grads(params)
            loss1 = nll_loss(flow, base, xb)
            if not np.isfinite(loss1.data):
                raise NumericError(f"L1 diverged at iteration {t}")
            loss1.backward()
            opt.step()

        z, _ = flow.inverse_np(x_hat[idx])
        z_hat = e_step(base, z, mb)
        base = m_step_online(base, z_hat, mb, eta_schedule(t, cfg), cfg.ridge)

        if opt is not None:
            zero_grads(params)
            loss2 = reimputation_loss(flow, base, z_hat, x[idx], kb, cfg.alpha)
            if not np.isfinite(loss2.data):
                raise NumericError(f"L2 diverged at iteration {t}")
            loss2.backward()
            opt.step()

        x_tilde, _ = flow.forward_np(np.atleast_2d(z_hat))
        x_hat[idx] = np.where(mb > 0, x_hat[idx], x_tilde)

    return StateEncoder(flow=flow, base=base, cfg=cfg, fill_values=col_mean)
