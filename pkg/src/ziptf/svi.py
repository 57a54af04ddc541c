"""Stochastic variational inference for ZIP, Gamma-Poisson and truncated
Gaussian tensor factorization.

Mean-field guide: an independent Gamma(gamma, delta) per factor entry and a
Normal(mu, sigma) over the zero-inflation logit zeta, with xi = sigmoid(zeta)
the global probability of extra zeros.  The per-entry Bernoulli mask is
marginalized analytically inside the ZIP likelihood.  Gradients of the
Monte-Carlo ELBO are pathwise: implicit reparameterization for the Gamma
draws and location-scale reparameterization for zeta.  Optimization runs in
unconstrained space (log shapes/rates) with Adam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import NumericalDegeneracyError
from .tensor import FactorModel, Tensor

LIKELIHOOD_KINDS = ("zip", "gamma_poisson", "truncated_gaussian")

_LOG_2PI = math.log(2.0 * math.pi)
_MIN_RATE = 1e-10
_MIN_DRAW = 1e-30


@dataclass(frozen=True)
class Likelihood:
    """Observation model; obs_std applies to truncated_gaussian only."""

    kind: str = "zip"
    obs_std: float = 1.0

    def __post_init__(self):
        if self.kind not in LIKELIHOOD_KINDS:
            raise ValueError(f"unknown likelihood kind {self.kind!r}")
        if not self.obs_std > 0:
            raise ValueError("obs_std must be positive")


@dataclass(frozen=True)
class SviConfig:
    max_steps: int = 1000
    learning_rate: float = 0.3
    learning_rate_end: float = 0.003
    n_samples: int = 1
    seed: int = 0
    prior_shape: float = 0.1
    prior_rate: float = 0.1
    zi_prior_mean: float = -2.0
    zi_prior_std: float = 1.0
    obs_std: float = 1.0  # truncated_gaussian observation deviation
    init_shape: float = 20.0
    init_jitter: float = 0.5
    smooth_window: int = 50


@dataclass
class SviState:
    """Unconstrained variational parameters plus Adam moments and the trace."""

    log_gamma: list
    log_delta: list
    zi_mu: torch.Tensor
    zi_log_sigma: torch.Tensor
    adam_m: dict
    adam_v: dict
    step: int = 0
    elbo_trace: list = field(default_factory=list)
    frozen: set = field(default_factory=set)
    final_elbo: float | None = None
    xi_mean: float | None = None

    @property
    def rank(self):
        return self.log_gamma[0].shape[1]

    @property
    def n_modes(self):
        return len(self.log_gamma)

    def parameters(self):
        out = {}
        for k in range(self.n_modes):
            out[f"log_gamma_{k}"] = self.log_gamma[k]
            out[f"log_delta_{k}"] = self.log_delta[k]
        out["zi_mu"] = self.zi_mu
        out["zi_log_sigma"] = self.zi_log_sigma
        return out

    def factor_means(self):
        """Variational means gamma/delta per mode, as numpy arrays."""
        return [
            torch.exp(self.log_gamma[k] - self.log_delta[k]).detach().numpy()
            for k in range(self.n_modes)
        ]


def init_state(
    t: Tensor,
    rank: int,
    cfg: SviConfig,
    generator: torch.Generator,
    init_mode=None,
    freeze_mode: bool = False,
) -> SviState:
    """Data-scaled initialization with per-seed lognormal jitter.

    ``init_mode`` is an optional (mode, matrix) pair fixing that mode's
    initial variational means deterministically; with ``freeze_mode`` those
    parameters are additionally excluded from optimization.
    """
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    n_modes = t.ndim
    mean_x = max(float(t.data.mean()), 1e-8)
    base = (mean_x / rank) ** (1.0 / n_modes)

    fixed_k = None
    fixed = None
    if init_mode is not None:
        fixed_k, fixed = init_mode
        fixed = np.maximum(
            np.asarray(fixed, dtype=np.float64), max(fixed.max(), 1e-12) * 1e-8
        )
        if fixed.shape != (t.shape[fixed_k], rank):
            raise ValueError("init matrix shape does not match tensor mode and rank")
        # other modes absorb the scale so the initial reconstruction mean
        # still matches the data mean
        col_total = float(fixed.sum())
        base = (mean_x * t.shape[fixed_k] / max(col_total, 1e-30)) ** (
            1.0 / (n_modes - 1)
        )

    log_gamma, log_delta, frozen = [], [], set()
    for k in range(n_modes):
        shape = (t.shape[k], rank)
        if k == fixed_k:
            g = torch.full(shape, 50.0, dtype=torch.float64)
            d = g / torch.as_tensor(fixed, dtype=torch.float64)
            if freeze_mode:
                frozen.update({f"log_gamma_{k}", f"log_delta_{k}"})
        else:
            jitter = torch.randn(shape, dtype=torch.float64, generator=generator)
            means = base * torch.exp(cfg.init_jitter * jitter)
            g = torch.full(shape, cfg.init_shape, dtype=torch.float64)
            d = g / means
        lg = torch.log(g).requires_grad_(True)
        ld = torch.log(d).requires_grad_(True)
        log_gamma.append(lg)
        log_delta.append(ld)

    zi_mu = torch.tensor(cfg.zi_prior_mean, dtype=torch.float64, requires_grad=True)
    zi_log_sigma = torch.tensor(
        math.log(cfg.zi_prior_std), dtype=torch.float64, requires_grad=True
    )
    state = SviState(
        log_gamma=log_gamma,
        log_delta=log_delta,
        zi_mu=zi_mu,
        zi_log_sigma=zi_log_sigma,
        adam_m={},
        adam_v={},
        frozen=frozen,
    )
    for name, p in state.parameters().items():
        state.adam_m[name] = torch.zeros_like(p)
        state.adam_v[name] = torch.zeros_like(p)
    return state


def _gamma_log_pdf(x, shape, rate):
    return (
        shape * torch.log(rate)
        - torch.lgamma(shape)
        + (shape - 1.0) * torch.log(x)
        - rate * x
    )


def _normal_log_pdf(x, mean, std):
    return -0.5 * ((x - mean) / std) ** 2 - torch.log(std) - 0.5 * _LOG_2PI


def guide_sample(state: SviState, generator: torch.Generator):
    """One draw from the guide and its joint variational log-density.

    Gamma draws use pathwise (implicitly reparameterized) sampling, zeta the
    location-scale form, so the returned tensors are differentiable with
    respect to the variational parameters.
    """
    factors = []
    log_q = torch.zeros((), dtype=torch.float64)
    for k in range(state.n_modes):
        gamma = torch.exp(state.log_gamma[k])
        delta = torch.exp(state.log_delta[k])
        raw = torch._standard_gamma(gamma, generator=generator)
        draw = torch.clamp(raw / delta, min=_MIN_DRAW)
        factors.append(draw)
        log_q = log_q + _gamma_log_pdf(draw, gamma, delta).sum()
    sigma = torch.exp(state.zi_log_sigma)
    eps = torch.randn((), dtype=torch.float64, generator=generator)
    zeta = state.zi_mu + sigma * eps
    log_q = log_q + _normal_log_pdf(zeta, state.zi_mu, sigma)
    return {"factors": factors, "zeta": zeta}, log_q


def _reconstruct(factors):
    n = len(factors)
    rank = factors[0].shape[1]
    out = factors[0].reshape([factors[0].shape[0]] + [1] * (n - 1) + [rank])
    for k in range(1, n):
        shape = [1] * n + [rank]
        shape[k] = factors[k].shape[0]
        out = out * factors[k].reshape(shape)
    return out.sum(dim=-1)


def log_joint(draw, t: Tensor, prior: SviConfig, likelihood: Likelihood):
    """Log of priors times likelihood at the sampled latents.

    The ZIP likelihood marginalizes the Bernoulli mask: each entry
    contributes log(xi * 1{x=0} + (1 - xi) * Poisson(x; lam)) with
    xi = sigmoid(zeta) and lam the CP reconstruction.
    """
    factors = draw["factors"]
    zeta = draw["zeta"]
    for f in factors:
        if not torch.all(f > 0):
            raise ValueError("factor draws must be positive")

    total = torch.zeros((), dtype=torch.float64)
    shape_p = torch.tensor(prior.prior_shape, dtype=torch.float64)
    rate_p = torch.tensor(prior.prior_rate, dtype=torch.float64)
    for f in factors:
        total = total + _gamma_log_pdf(f, shape_p, rate_p).sum()
    total = total + _normal_log_pdf(
        zeta,
        torch.tensor(prior.zi_prior_mean, dtype=torch.float64),
        torch.tensor(prior.zi_prior_std, dtype=torch.float64),
    )

    if t is None:
        return total

    if isinstance(t, torch.Tensor):
        x = t
    else:
        x = torch.from_numpy(np.array(t.data, dtype=np.float64))
    lam = torch.clamp(_reconstruct(factors), min=_MIN_RATE)
    if likelihood.kind == "truncated_gaussian":
        s = torch.tensor(likelihood.obs_std, dtype=torch.float64)
        ll = _normal_log_pdf(x, lam, s) - torch.special.log_ndtr(lam / s)
        return total + ll.sum()

    log_pois = x * torch.log(lam) - lam - torch.lgamma(x + 1.0)
    if likelihood.kind == "gamma_poisson":
        return total + log_pois.sum()

    log_xi = -torch.nn.functional.softplus(-zeta)
    log_1m_xi = -torch.nn.functional.softplus(zeta)
    zero_term = torch.logaddexp(log_xi, log_1m_xi - lam)
    ll = torch.where(x == 0, zero_term, log_1m_xi + log_pois)
    return total + ll.sum()


def _elbo_terms(state, t, prior, likelihood, n_samples, generator):
    total = torch.zeros((), dtype=torch.float64)
    for _ in range(n_samples):
        draw, log_q = guide_sample(state, generator)
        total = total + log_joint(draw, t, prior, likelihood) - log_q
    return total / n_samples


def elbo_estimate(
    state: SviState,
    t: Tensor,
    prior: SviConfig,
    likelihood: Likelihood,
    n_samples: int,
    generator: torch.Generator,
) -> float:
    """Unbiased S-sample Monte-Carlo estimate of the ELBO."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    with torch.no_grad():
        return float(_elbo_terms(state, t, prior, likelihood, n_samples, generator))


def svi_step(
    state: SviState,
    t: Tensor,
    prior: SviConfig,
    likelihood: Likelihood,
    n_samples: int,
    learning_rate: float,
    generator: torch.Generator,
) -> SviState:
    """One Adam ascent step on the Monte-Carlo ELBO; mutates and returns state."""
    params = state.parameters()
    for p in params.values():
        if p.grad is not None:
            p.grad = None
    loss = -_elbo_terms(state, t, prior, likelihood, n_samples, generator)
    loss.backward()

    bad = [
        name
        for name, p in params.items()
        if p.grad is not None and not torch.all(torch.isfinite(p.grad))
    ]
    if bad:
        raise NumericalDegeneracyError(f"non-finite gradient for {bad}")

    state.step += 1
    b1, b2, eps = 0.9, 0.999, 1e-8
    with torch.no_grad():
        for name, p in params.items():
            if name in state.frozen or p.grad is None:
                continue
            grad = -p.grad  # ascent
            m = state.adam_m[name]
            v = state.adam_v[name]
            m.mul_(b1).add_(grad, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(grad, grad, value=1.0 - b2)
            m_hat = m / (1.0 - b1**state.step)
            v_hat = v / (1.0 - b2**state.step)
            p.add_(learning_rate * m_hat / (torch.sqrt(v_hat) + eps))
    state.elbo_trace.append(float(-loss.detach()))
    return state


def _lr_schedule(cfg: SviConfig, step: int) -> float:
    if cfg.max_steps <= 1 or cfg.learning_rate == 0:
        return cfg.learning_rate
    frac = step / (cfg.max_steps - 1)
    return cfg.learning_rate * (cfg.learning_rate_end / cfg.learning_rate) ** frac


def fit_svi(
    t: Tensor,
    rank: int,
    likelihood: Likelihood = Likelihood(),
    cfg: SviConfig = SviConfig(),
    init_mode=None,
    freeze_mode: bool = False,
):
    """Run svi_step to completion and return (FactorModel, SviState).

    Factor entries are the variational means gamma/delta.  The state carries
    the smoothed final ELBO and, for the ZIP model, the posterior mean of the
    extra-zero probability xi estimated from 1000 draws of zeta.
    """
    generator = torch.Generator().manual_seed(int(cfg.seed))
    state = init_state(t, rank, cfg, generator, init_mode=init_mode, freeze_mode=freeze_mode)
    xt = torch.from_numpy(np.array(t.data, dtype=np.float64))
    for step in range(cfg.max_steps):
        lr = _lr_schedule(cfg, step)
        svi_step(state, xt, prior=cfg, likelihood=likelihood,
                 n_samples=cfg.n_samples, learning_rate=lr, generator=generator)

    window = min(cfg.smooth_window, len(state.elbo_trace)) or 1
    if state.elbo_trace:
        state.final_elbo = float(np.mean(state.elbo_trace[-window:]))
    with torch.no_grad():
        sigma = torch.exp(state.zi_log_sigma)
        zetas = state.zi_mu + sigma * torch.randn(
            1000, dtype=torch.float64, generator=generator
        )
        state.xi_mean = float(torch.sigmoid(zetas).mean())

    model = FactorModel(rank=rank, factors=state.factor_means())
    return model, state
