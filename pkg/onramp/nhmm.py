"""Nonhomogeneous hidden Markov model with covariate-dependent transitions.

Emissions are multivariate Gaussian per state. The probability of moving
from state i into state j at time t is a multinomial logistic function of
the covariates x_t:

    P(q_t = j | q_{t-1} = i, x_t) = exp(xi[i, j] + x_t . rho[j]) / sum_m exp(xi[i, m] + x_t . rho[m])

with the last state as reference (xi[:, -1] = 0, rho[-1] = 0). Inference is
a Direct Gibbs sampler: single-site state updates, semi-conjugate
Normal / Inverse-Wishart emission updates and Polya-Gamma augmented
logistic updates of (xi, rho).
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky, solve_triangular
from scipy.special import logsumexp
from scipy.stats import invwishart

from onramp.errors import InputError, ModelStateError, NumericalError
from onramp.merge_extractor import BEHAVIOR_NAMES, COVARIATE_NAMES

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MAX_STATES = 10
CONSTANT_SD_TOL = 1e-12


# =============================================================================
# Configuration
# =============================================================================

@dataclass(frozen=True)
class FitConfig:
    iterations: int = 4000
    burn_in: int = 2000
    thinning: int = 2
    credible_level: float = 0.95
    seed: int = 0
    prior_mean_scale: float = 4.0
    iw_df: float = 6.0
    coef_sd: float = 5.0
    dirichlet_alpha: float = 1.0
    pg_truncation: int = 100
    degenerate_patience: int = 50
    homogeneous: bool = False
    label_order_dim: int = 1

    def __post_init__(self):
        if self.burn_in >= self.iterations:
            raise InputError(f"burn_in ({self.burn_in}) must be < iterations ({self.iterations})")
        if self.burn_in < 0 or self.thinning < 1:
            raise InputError("burn_in must be >= 0 and thinning >= 1")
        if not 0.0 < self.credible_level < 1.0:
            raise InputError(f"credible_level must be in (0, 1) (got {self.credible_level})")
        if self.pg_truncation < 1:
            raise InputError("pg_truncation must be >= 1")

    @property
    def n_draws(self) -> int:
        return (self.iterations - self.burn_in) // self.thinning


# =============================================================================
# Parameters and scaling
# =============================================================================

@dataclass(frozen=True, eq=False)
class NhmmParams:
    mu: np.ndarray      # (N, D)
    sigma: np.ndarray   # (N, D, D)
    xi: np.ndarray      # (N, N), column N-1 is zero
    rho: np.ndarray     # (N, C), row N-1 is zero
    pi0: np.ndarray     # (N,)

    @property
    def n_states(self) -> int:
        return len(self.pi0)

    @property
    def n_covariates(self) -> int:
        return self.rho.shape[1]

    def normalized(self) -> NhmmParams:
        """Re-zero the reference state; transition probabilities are unchanged."""
        return replace(self, xi=self.xi - self.xi[:, -1:], rho=self.rho - self.rho[-1:])

    def permuted(self, perm: np.ndarray) -> NhmmParams:
        """Relabel states so that new state r is old state perm[r]."""
        perm = np.asarray(perm)
        return NhmmParams(
            mu=self.mu[perm],
            sigma=self.sigma[perm],
            xi=self.xi[np.ix_(perm, perm)],
            rho=self.rho[perm],
            pi0=self.pi0[perm],
        ).normalized()

    def validate(self) -> None:
        n = self.n_states
        if self.mu.shape[0] != n or self.sigma.shape[0] != n or self.xi.shape != (n, n) or self.rho.shape[0] != n:
            raise ModelStateError("parameter shapes disagree on the number of states")
        if np.any(self.xi[:, -1] != 0.0) or np.any(self.rho[-1] != 0.0):
            raise ModelStateError("reference state coefficients must be zero")
        if abs(float(np.sum(self.pi0)) - 1.0) > 1e-12 or np.any(self.pi0 < 0.0):
            raise ModelStateError("pi0 is not a probability vector")
        for k in range(n):
            _chol(self.sigma[k], k)

    def to_dict(self) -> dict:
        return {"mu": self.mu, "sigma": self.sigma, "xi": self.xi, "rho": self.rho, "pi0": self.pi0}

    @classmethod
    def from_dict(cls, data: dict) -> NhmmParams:
        n = len(data["pi0"])
        mu = np.asarray(data["mu"], dtype=float).reshape(n, -1)
        dim = mu.shape[1]
        n_cov = len(data["rho"][0]) if n else 0
        return cls(
            mu=mu,
            sigma=np.asarray(data["sigma"], dtype=float).reshape(n, dim, dim),
            xi=np.asarray(data["xi"], dtype=float).reshape(n, n),
            rho=np.asarray(data["rho"], dtype=float).reshape(n, n_cov),
            pi0=np.asarray(data["pi0"], dtype=float),
        )


@dataclass(frozen=True, eq=False)
class CovariateScaler:
    """Z-scores covariates; constant columns are dropped from the regression."""
    names: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray
    active: np.ndarray  # bool mask over names

    @classmethod
    def fit(cls, X: np.ndarray, names: Sequence[str] = COVARIATE_NAMES) -> CovariateScaler:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(names):
            raise InputError(f"covariates must have shape (T, {len(names)})")
        if not np.all(np.isfinite(X)):
            raise InputError("covariates contain non-finite values")
        mean = X.mean(axis=0)
        sd = X.std(axis=0)
        active = sd > CONSTANT_SD_TOL
        for name, keep in zip(names, active):
            if not keep:
                logger.warning("Covariate %s is constant; dropped from the transition regression", name)
        sd = np.where(active, sd, 1.0)
        return cls(names=tuple(names), mean=mean, sd=sd, active=active)

    @property
    def active_names(self) -> tuple[str, ...]:
        return tuple(n for n, keep in zip(self.names, self.active) if keep)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return ((X - self.mean) / self.sd)[:, self.active]

    def to_dict(self) -> dict:
        return {"names": list(self.names), "mean": self.mean, "sd": self.sd, "active": self.active}

    @classmethod
    def from_dict(cls, data: dict) -> CovariateScaler:
        return cls(
            names=tuple(data["names"]),
            mean=np.asarray(data["mean"], dtype=float),
            sd=np.asarray(data["sd"], dtype=float),
            active=np.asarray(data["active"], dtype=bool),
        )


# =============================================================================
# Model densities
# =============================================================================

def _chol(sigma: np.ndarray, k: int = 0) -> np.ndarray:
    try:
        return cholesky(sigma, lower=True)
    except (LinAlgError, ValueError) as e:
        raise ModelStateError(f"covariance of state {k} is not positive definite") from e


def transition_matrix_at(params: NhmmParams, x) -> np.ndarray:
    """Row-stochastic N x N transition matrix at covariate vector x."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != params.n_covariates:
        raise InputError(f"expected {params.n_covariates} covariates, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise InputError("covariate vector contains non-finite values")
    logits = params.xi + (params.rho @ x)[None, :]
    logits = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=1, keepdims=True)


def log_transition_matrices(params: NhmmParams, Xs: np.ndarray) -> np.ndarray:
    """Log transition matrices for every row of Xs, shape (T, N, N)."""
    Xs = np.asarray(Xs, dtype=float).reshape(len(Xs), params.n_covariates)
    if not np.all(np.isfinite(Xs)):
        raise InputError("covariates contain non-finite values")
    logits = params.xi[None, :, :] + (Xs @ params.rho.T)[:, None, :]
    return logits - logsumexp(logits, axis=2, keepdims=True)


def emission_logpdf(params: NhmmParams, O: np.ndarray) -> np.ndarray:
    """Gaussian log-densities of every observation under every state, shape (T, N)."""
    O = np.atleast_2d(np.asarray(O, dtype=float))
    out = np.empty((len(O), params.n_states))
    dim = O.shape[1]
    for k in range(params.n_states):
        L = _chol(params.sigma[k], k)
        z = solve_triangular(L, (O - params.mu[k]).T, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        out[:, k] = -0.5 * (dim * LOG_2PI + logdet + np.sum(z * z, axis=0))
    return out


def emission_logdensity(params: NhmmParams, o, k: int) -> float:
    """Log multivariate-normal density of one observation under state k."""
    return float(emission_logpdf(params, np.asarray(o, dtype=float)[None, :])[0, k])


def _check_lengths(O: np.ndarray, Xs: np.ndarray) -> None:
    if len(O) != len(Xs):
        raise InputError(f"behavior series has {len(O)} frames but covariates have {len(Xs)}")
    if len(O) < 1:
        raise InputError("sequence is empty")


def forward(params: NhmmParams, O: np.ndarray, Xs: np.ndarray) -> tuple[float, np.ndarray]:
    """Scaled forward recursion. Returns (log-likelihood, normalized alphas)."""
    O = np.asarray(O, dtype=float)
    Xs = np.asarray(Xs, dtype=float).reshape(len(Xs), -1)
    _check_lengths(O, Xs)
    log_b = emission_logpdf(params, O)
    A = np.exp(log_transition_matrices(params, Xs))
    m = log_b.max(axis=1)
    b = np.exp(log_b - m[:, None])
    alphas = np.empty_like(b)
    alpha = params.pi0 * b[0]
    loglik = 0.0
    for t in range(len(O)):
        if t > 0:
            alpha = (alpha @ A[t]) * b[t]
        c = alpha.sum()
        if c <= 0.0:
            return -math.inf, alphas
        loglik += math.log(c) + m[t]
        alpha = alpha / c
        alphas[t] = alpha
    return loglik, alphas


def sequence_loglik(params: NhmmParams, O: np.ndarray, Xs: np.ndarray) -> float:
    """log P(O | X, params); time step 0 uses pi0, step t uses the matrix at x_t."""
    return forward(params, O, Xs)[0]


def viterbi_states(params: NhmmParams, O: np.ndarray, Xs: np.ndarray) -> np.ndarray:
    """Joint-MAP state path under fixed parameters."""
    O = np.asarray(O, dtype=float)
    Xs = np.asarray(Xs, dtype=float).reshape(len(Xs), -1)
    _check_lengths(O, Xs)
    log_b = emission_logpdf(params, O)
    log_A = log_transition_matrices(params, Xs)
    with np.errstate(divide="ignore"):
        delta = np.log(params.pi0) + log_b[0]
    back = np.zeros((len(O), params.n_states), dtype=np.int64)
    for t in range(1, len(O)):
        scores = delta[:, None] + log_A[t]
        back[t] = np.argmax(scores, axis=0)
        delta = scores[back[t], np.arange(params.n_states)] + log_b[t]
    path = np.empty(len(O), dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(len(O) - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def n_parameters(n_states: int, n_covariates: int = len(COVARIATE_NAMES),
                 dim: int = len(BEHAVIOR_NAMES)) -> int:
    """Free parameters: means, covariances, free xi, free rho, free pi0."""
    per_state = dim + dim * (dim + 1) // 2
    return (n_states * per_state
            + (n_states - 1) * n_states
            + (n_states - 1) * n_covariates
            + (n_states - 1))


# =============================================================================
# Posterior samples
# =============================================================================

@dataclass(frozen=True, eq=False)
class PosteriorSamples:
    """Retained post-burn-in draws in canonical state labeling."""
    mu: np.ndarray        # (S, N, D)
    sigma: np.ndarray     # (S, N, D, D)
    xi: np.ndarray        # (S, N, N)
    rho: np.ndarray       # (S, N, C)
    pi0: np.ndarray       # (S, N)
    states: tuple[np.ndarray, ...]  # per sequence, (S, T_i)
    event_ids: tuple[str, ...]
    scaler: CovariateScaler
    covariate_names: tuple[str, ...]
    config: FitConfig
    seed: int
    degenerate_states: tuple[int, ...] = field(default_factory=tuple)

    @property
    def n_states(self) -> int:
        return self.pi0.shape[1]

    @property
    def n_draws(self) -> int:
        return self.pi0.shape[0]

    @property
    def degenerate(self) -> bool:
        return bool(self.degenerate_states)

    def draw(self, s: int) -> NhmmParams:
        return NhmmParams(self.mu[s], self.sigma[s], self.xi[s], self.rho[s], self.pi0[s])

    def posterior_mean(self) -> NhmmParams:
        pi0 = self.pi0.mean(axis=0)
        return NhmmParams(
            mu=self.mu.mean(axis=0),
            sigma=self.sigma.mean(axis=0),
            xi=self.xi.mean(axis=0),
            rho=self.rho.mean(axis=0),
            pi0=pi0 / pi0.sum(),
        )

    def chain_metadata(self) -> dict:
        return {
            "seed": self.seed,
            "iterations": self.config.iterations,
            "burn_in": self.config.burn_in,
            "thinning": self.config.thinning,
            "n_draws": self.n_draws,
            "degenerate": self.degenerate,
            "degenerate_states": list(self.degenerate_states),
        }


def covariate_names(n: int) -> tuple[str, ...]:
    """Extractor names for six columns, positional names otherwise."""
    return COVARIATE_NAMES if n == len(COVARIATE_NAMES) else tuple(f"x{i}" for i in range(n))


def _as_sequences(events) -> list:
    if hasattr(events, "O") and hasattr(events, "X"):
        return [events]
    events = list(events)
    if not events:
        raise InputError("no sequences to fit")
    return events


def standardized_covariates(samples: PosteriorSamples, X: np.ndarray) -> np.ndarray:
    """Covariates in the model's regression space (empty for homogeneous fits)."""
    Xs = samples.scaler.transform(X)
    if samples.config.homogeneous:
        return Xs[:, :0]
    return Xs


# =============================================================================
# Sampler kernels
# =============================================================================

@numba.njit(cache=True)
def _direct_gibbs_sweep(q, log_b, log_A, log_pi0, u):
    """Resample each q_t from its full conditional given q_{t-1} and q_{t+1}."""
    T, N = log_b.shape
    w = np.empty(N)
    for t in range(T):
        for k in range(N):
            v = log_b[t, k]
            if t == 0:
                v += log_pi0[k]
            else:
                v += log_A[t, q[t - 1], k]
            if t < T - 1:
                v += log_A[t + 1, k, q[t + 1]]
            w[k] = v
        top = w.max()
        total = 0.0
        for k in range(N):
            w[k] = math.exp(w[k] - top)
            total += w[k]
        r = u[t] * total
        acc = 0.0
        choice = N - 1
        for k in range(N):
            acc += w[k]
            if r < acc:
                choice = k
                break
        q[t] = choice


def polya_gamma_draw(z: np.ndarray, rng: np.random.Generator, truncation: int = 100) -> np.ndarray:
    """Draw PG(1, z) by the truncated infinite-sum representation.

    The truncated sum is rescaled so its mean matches tanh(z/2)/(2z) exactly.
    """
    z = np.asarray(z, dtype=float)
    ksq = (np.arange(truncation) + 0.5) ** 2
    denom = ksq[None, :] + (z[:, None] ** 2) / (4.0 * math.pi ** 2)
    g = rng.standard_exponential((len(z), truncation))
    draw = np.sum(g / denom, axis=1) / (2.0 * math.pi ** 2)
    half = np.maximum(np.abs(z) / 2.0, 1e-8)
    full_mean = np.tanh(half) / half / 4.0
    trunc_mean = np.sum(1.0 / denom, axis=1) / (2.0 * math.pi ** 2)
    return draw * full_mean / trunc_mean


def _sample_mvn_precision(precision: np.ndarray, linear: np.ndarray,
                          rng: np.random.Generator) -> np.ndarray:
    """Draw from N(P^{-1} b, P^{-1}) given precision P and linear term b."""
    precision = 0.5 * (precision + precision.T)
    factor = cho_factor(precision, lower=True)
    mean = cho_solve(factor, linear)
    L = np.tril(factor[0])
    z = rng.standard_normal(len(linear))
    return mean + solve_triangular(L.T, z, lower=False)


class _Chain:
    """Mutable sampler state for one fit."""

    def __init__(self, seqs, Xs_list, n_states: int, config: FitConfig, rng: np.random.Generator):
        self.O_list = [np.asarray(s.O, dtype=float) for s in seqs]
        self.Xs_list = Xs_list
        self.N = n_states
        self.config = config
        self.rng = rng
        O_all = np.concatenate(self.O_list)
        self.O_all = O_all
        self.D = O_all.shape[1]
        self.C = Xs_list[0].shape[1]
        self.prior_mean = O_all.mean(axis=0)
        cov = np.cov(O_all, rowvar=False).reshape(self.D, self.D)
        jitter = 1e-6 * max(float(np.trace(cov)) / self.D, 1.0)
        self.prior_scale = cov + jitter * np.eye(self.D)
        self.prior_mean_precision = np.linalg.inv(config.prior_mean_scale * self.prior_scale)
        self.q_list = self._initial_states()
        self.params = self._initial_params()
        self.empty_streak = np.zeros(self.N, dtype=np.int64)
        self.degenerate: set[int] = set()
        self._build_transition_design()

    def _initial_states(self) -> list[np.ndarray]:
        """Quantile split along the labeling dimension."""
        dim = self.config.label_order_dim
        edges = np.quantile(self.O_all[:, dim], np.linspace(0.0, 1.0, self.N + 1)[1:-1])
        return [np.searchsorted(edges, O[:, dim], side="right").astype(np.int64) for O in self.O_list]

    def _initial_params(self) -> NhmmParams:
        q_all = np.concatenate(self.q_list)
        mu = np.empty((self.N, self.D))
        for k in range(self.N):
            members = self.O_all[q_all == k]
            mu[k] = members.mean(axis=0) if len(members) else self.prior_mean
        return NhmmParams(
            mu=mu,
            sigma=np.repeat(self.prior_scale[None], self.N, axis=0),
            xi=np.zeros((self.N, self.N)),
            rho=np.zeros((self.N, self.C)),
            pi0=np.full(self.N, 1.0 / self.N),
        )

    def _build_transition_design(self) -> None:
        blocks = [self.Xs_list[i][1:] for i in range(len(self.O_list))]
        self.trans_x = np.concatenate(blocks) if blocks else np.empty((0, self.C))

    # --- updates ---

    def update_states(self) -> None:
        p = self.params
        log_pi0 = np.log(np.maximum(p.pi0, 1e-300))
        for q, O, Xs in zip(self.q_list, self.O_list, self.Xs_list):
            log_b = emission_logpdf(p, O)
            log_A = log_transition_matrices(p, Xs)
            u = self.rng.random(len(O))
            _direct_gibbs_sweep(q, log_b, log_A, log_pi0, u)

    def update_emissions(self) -> None:
        q_all = np.concatenate(self.q_list)
        df0 = self.config.iw_df
        mu = self.params.mu.copy()
        sigma = self.params.sigma.copy()
        for k in range(self.N):
            members = self.O_all[q_all == k]
            n = len(members)
            if n == 0:
                self.empty_streak[k] += 1
                if self.empty_streak[k] > self.config.degenerate_patience:
                    self.degenerate.add(k)
            else:
                self.empty_streak[k] = 0
            resid = members - mu[k]
            scatter = self.prior_scale + resid.T @ resid
            sigma[k] = np.atleast_2d(invwishart.rvs(df=df0 + n, scale=scatter, random_state=self.rng))
            sigma_inv = np.linalg.inv(sigma[k])
            precision = self.prior_mean_precision + n * sigma_inv
            linear = self.prior_mean_precision @ self.prior_mean + sigma_inv @ members.sum(axis=0)
            mu[k] = _sample_mvn_precision(precision, linear, self.rng)
        self.params = replace(self.params, mu=mu, sigma=sigma)

    def update_transitions(self, iteration: int) -> None:
        if self.N == 1 or len(self.trans_x) == 0:
            return
        src = np.concatenate([q[:-1] for q in self.q_list])
        dst = np.concatenate([q[1:] for q in self.q_list])
        Z = np.column_stack([np.eye(self.N)[src], self.trans_x])
        B = np.vstack([self.params.xi, self.params.rho.T])  # (N + C, N)
        logits = Z @ B
        prior_precision = np.eye(Z.shape[1]) / self.config.coef_sd ** 2
        for j in range(self.N - 1):
            others = np.delete(logits, j, axis=1)
            offset = logsumexp(others, axis=1)
            eta = logits[:, j] - offset
            omega = polya_gamma_draw(eta, self.rng, self.config.pg_truncation)
            if not np.all(np.isfinite(omega)) or np.any(omega <= 0.0):
                raise NumericalError("Polya-Gamma draw failed", iteration)
            kappa = (dst == j).astype(float) - 0.5
            precision = Z.T @ (omega[:, None] * Z) + prior_precision
            linear = Z.T @ (kappa + omega * offset)
            try:
                beta = _sample_mvn_precision(precision, linear, self.rng)
            except LinAlgError as e:
                raise NumericalError("coefficient precision not positive definite", iteration) from e
            B[:, j] = beta
            logits[:, j] = Z @ beta
        self.params = replace(self.params, xi=B[:self.N].copy(), rho=B[self.N:].T.copy())

    def update_initial(self) -> None:
        counts = np.bincount([int(q[0]) for q in self.q_list], minlength=self.N)
        pi0 = self.rng.dirichlet(self.config.dirichlet_alpha + counts)
        self.params = replace(self.params, pi0=pi0 / pi0.sum())

    def canonical(self) -> tuple[NhmmParams, list[np.ndarray]]:
        """Current draw relabeled by ascending mean along the labeling dimension."""
        perm = np.argsort(self.params.mu[:, self.config.label_order_dim], kind="stable")
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(self.N)
        return self.params.permuted(perm), [inverse[q] for q in self.q_list]


def gibbs_fit(events, n_states: int, config: FitConfig | None = None) -> PosteriorSamples:
    """Run the Direct Gibbs sampler on one event or a pooled list of events.

    Covariates are standardized internally; retained draws are stored in
    canonical state order. Deterministic given ``config.seed``.
    """
    config = config or FitConfig()
    seqs = _as_sequences(events)
    if not 1 <= n_states <= MAX_STATES:
        raise InputError(f"n_states must be in 1..{MAX_STATES} (got {n_states})")
    for s in seqs:
        O = np.asarray(s.O, dtype=float)
        if len(O) < 10:
            raise InputError(f"sequence {s.event_id} has {len(O)} frames; at least 10 required")
        if len(O) != len(s.X):
            raise InputError(f"sequence {s.event_id}: behavior and covariate lengths differ")
        if not np.all(np.isfinite(O)):
            raise InputError(f"sequence {s.event_id} has non-finite observations")
    X_all = np.concatenate([np.asarray(s.X, dtype=float) for s in seqs])
    scaler = CovariateScaler.fit(X_all, covariate_names(X_all.shape[1]))
    Xs_list = [scaler.transform(s.X) for s in seqs]
    if config.homogeneous:
        Xs_list = [X[:, :0] for X in Xs_list]
    names = () if config.homogeneous else scaler.active_names

    rng = np.random.default_rng(config.seed)
    chain = _Chain(seqs, Xs_list, n_states, config, rng)
    S = config.n_draws
    N, D, C = n_states, chain.D, chain.C
    mu_d = np.empty((S, N, D))
    sigma_d = np.empty((S, N, D, D))
    xi_d = np.empty((S, N, N))
    rho_d = np.empty((S, N, C))
    pi0_d = np.empty((S, N))
    states_d = [np.empty((S, len(O)), dtype=np.int16) for O in chain.O_list]

    kept = 0
    for it in range(config.iterations):
        chain.update_states()
        chain.update_emissions()
        chain.update_transitions(it)
        chain.update_initial()
        if it >= config.burn_in and (it - config.burn_in + 1) % config.thinning == 0 and kept < S:
            params, q_list = chain.canonical()
            mu_d[kept], sigma_d[kept] = params.mu, params.sigma
            xi_d[kept], rho_d[kept], pi0_d[kept] = params.xi, params.rho, params.pi0
            for store, q in zip(states_d, q_list):
                store[kept] = q
            kept += 1

    if chain.degenerate:
        logger.warning("Chain for %s with K=%d flagged degenerate_state (states %s)",
                       ",".join(str(s.event_id) for s in seqs), n_states, sorted(chain.degenerate))
    return PosteriorSamples(
        mu=mu_d, sigma=sigma_d, xi=xi_d, rho=rho_d, pi0=pi0_d,
        states=tuple(states_d),
        event_ids=tuple(str(s.event_id) for s in seqs),
        scaler=scaler,
        covariate_names=names,
        config=config,
        seed=config.seed,
        degenerate_states=tuple(sorted(chain.degenerate)),
    )


# =============================================================================
# Decoding, model selection, significance
# =============================================================================

def decode_states(samples: PosteriorSamples, sequence: int = 0) -> np.ndarray:
    """Per-time posterior mode of the sampled states; ties go to the lower index."""
    draws = samples.states[sequence]
    if len(draws) == 0:
        raise InputError("no retained draws to decode")
    counts = np.apply_along_axis(np.bincount, 0, draws.astype(np.int64), minlength=samples.n_states)
    return np.argmax(counts, axis=0).astype(np.int64)


def decode_viterbi(samples: PosteriorSamples, events, sequence: int = 0) -> np.ndarray:
    """Joint-MAP path on posterior-mean parameters (alternative decoder)."""
    seq = _as_sequences(events)[sequence]
    return viterbi_states(samples.posterior_mean(), seq.O, standardized_covariates(samples, seq.X))


def bic(samples: PosteriorSamples, events) -> tuple[float, float, int]:
    """BIC at posterior-mean parameters. Returns (bic, loglik, n_params)."""
    seqs = _as_sequences(events)
    params = samples.posterior_mean()
    loglik = sum(sequence_loglik(params, s.O, standardized_covariates(samples, s.X)) for s in seqs)
    total_frames = sum(len(s.O) for s in seqs)
    p = n_parameters(samples.n_states, len(samples.covariate_names), samples.mu.shape[2])
    return -2.0 * loglik + p * math.log(total_frames), float(loglik), p


@dataclass
class KSelection:
    best_k: int
    table: list[dict]
    fits: dict[int, PosteriorSamples]


def select_k(events, k_range: Sequence[int] = range(1, 7),
             config: FitConfig | None = None) -> KSelection:
    """Fit every K in the range and pick the minimum BIC among non-degenerate chains."""
    config = config or FitConfig()
    seqs = _as_sequences(events)
    table: list[dict] = []
    fits: dict[int, PosteriorSamples] = {}
    for k in k_range:
        samples = gibbs_fit(seqs, k, config)
        value, loglik, p = bic(samples, seqs)
        fits[k] = samples
        table.append({"k": k, "bic": value, "loglik": loglik, "n_params": p,
                      "degenerate": samples.degenerate})
    candidates = [row for row in table if not row["degenerate"] and math.isfinite(row["bic"])]
    if not candidates:
        raise ModelStateError("every fit in the K sweep was degenerate")
    best = min(candidates, key=lambda row: (row["bic"], row["k"]))
    for row in table:
        row["selected"] = row["k"] == best["k"]
    return KSelection(best_k=best["k"], table=table, fits=fits)


@dataclass(frozen=True, eq=False)
class Significance:
    covariate_names: tuple[str, ...]
    level: float
    mean_std: np.ndarray    # (N, C)
    mean_raw: np.ndarray    # (N, C)
    lower: np.ndarray
    upper: np.ndarray
    significant: np.ndarray  # bool (N, C)

    def any_state(self) -> dict[str, bool]:
        """Per covariate: significant for at least one state."""
        return {name: bool(self.significant[:, c].any()) for c, name in enumerate(self.covariate_names)}

    def to_dict(self) -> dict:
        return {
            "covariate_names": list(self.covariate_names),
            "level": self.level,
            "mean_std": self.mean_std,
            "mean_raw": self.mean_raw,
            "lower": self.lower,
            "upper": self.upper,
            "significant": self.significant,
        }


def covariate_significance(samples: PosteriorSamples, level: float = 0.95,
                           min_draws: int = 100) -> Significance:
    """Equal-tailed credible intervals of rho; significant when 0 is excluded."""
    if samples.n_draws < min_draws:
        raise InputError(f"need at least {min_draws} retained draws (have {samples.n_draws})")
    alpha = (1.0 - level) / 2.0
    lower = np.quantile(samples.rho, alpha, axis=0)
    upper = np.quantile(samples.rho, 1.0 - alpha, axis=0)
    mean_std = samples.rho.mean(axis=0)
    sd = samples.scaler.sd[samples.scaler.active] if samples.covariate_names else np.empty(0)
    return Significance(
        covariate_names=samples.covariate_names,
        level=level,
        mean_std=mean_std,
        mean_raw=mean_std / sd[None, :] if len(sd) else mean_std,
        lower=lower,
        upper=upper,
        significant=(lower > 0.0) | (upper < 0.0),
    )
