"""Gibbs sampler for the spatially augmented Poisson interaction model.

The count likelihood y_i ~ Poisson(lambda_i) with

    log lambda = Z gamma + V_o theta_o + V_d theta_d

is augmented with latent arrival/inter-arrival times: one inter-arrival time
tau_i1 per observation and additionally the arrival time tau_i2 of the
y_i-th event for positive counts, giving N_plus = N + N_{y>0} latent rows.
Log-linearizing and approximating the negative-log-Gamma errors by finite
normal mixtures (see :mod:`spgrav.mixture`) makes everything conditionally
Gaussian, and one sweep cycles through

    I    gamma        Gaussian regression update
    II   theta_o/d    Gaussian spatial-random-effect updates
    III  phi2_o/d     inverse-Gamma variance updates
    IV   rho_o/d      griddy-Gibbs (or adaptive random-walk) updates
    V    tau          exact arrival-time conditionals
    VI   nu           mixture component indicators, then Omega and the
                      working response ytilde = -ln(tau) - m(nu)

Sign convention: with ytilde = -ln(tau) - m(nu) the working model is
ytilde = log lambda + e, e ~ N(0, Omega), which is the form steps I-II use.

Both origin and destination random effects enter every dyad, so the model
is only identified up to constant shifts between the intercept and the
effect vectors; by default each theta draw is recentred to mean zero with
the shift absorbed into the intercept, leaving the linear predictor
unchanged.
"""

import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .data import DesignMatrices
from .mixture import MixtureTable
from .spatial import SpatialSystem

ETA_CLIP = 700.0


class SamplerError(RuntimeError):
    """A Gibbs step failed; carries the sweep index and last good state."""

    def __init__(self, message, sweep: int | None = None, state=None):
        super().__init__(message)
        self.sweep = sweep
        self.state = state


@dataclass
class PriorSpec:
    """Prior hyperparameters.

    Gaussian prior on the stacked coefficient vector (zero mean, variance
    1e4 by default), inverse-Gamma prior on the random-effect variances
    parameterized by rate ``ig_rate`` and shape ``ig_shape``, and a uniform
    prior on (-1, 1) for the autoregressive parameters (implicit in the
    griddy update).
    """

    gamma_mean: float | np.ndarray = 0.0
    gamma_variance: float | np.ndarray = 1e4
    ig_rate: float = 5.0
    ig_shape: float = 0.05

    def __post_init__(self):
        if np.any(np.asarray(self.gamma_variance) <= 0):
            raise ValueError("gamma_variance must be positive")
        if self.ig_rate < 0 or self.ig_shape < 0:
            raise ValueError("inverse-Gamma hyperparameters must be non-negative")

    def expand(self, P: int):
        mean = np.broadcast_to(np.asarray(self.gamma_mean, dtype=float), (P,)).copy()
        var = np.broadcast_to(np.asarray(self.gamma_variance, dtype=float), (P,)).copy()
        return mean, var


@dataclass
class Schedule:
    """Sweep counts: ``total`` sweeps, first ``burn_in`` discarded, ``thin``."""

    total: int = 25_000
    burn_in: int = 10_000
    thin: int = 1

    def __post_init__(self):
        if not 0 <= self.burn_in < self.total:
            raise ValueError("need 0 <= burn_in < total")
        if self.thin < 1 or (self.total - self.burn_in) % self.thin:
            raise ValueError("total - burn_in must be a multiple of thin")

    @property
    def kept(self) -> int:
        return (self.total - self.burn_in) // self.thin


@dataclass
class AugmentedState:
    """Latent arrival times, mixture indicators, and derived quantities.

    Rows 1..N hold the tau_i1 block (shape-1 errors); rows N+1..N_plus hold
    tau_i2 for the positive counts, in stable dyad order.
    """

    tau: np.ndarray
    nu_indicators: np.ndarray
    omega_diag: np.ndarray
    working_response: np.ndarray

    def copy(self) -> "AugmentedState":
        return AugmentedState(self.tau.copy(), self.nu_indicators.copy(),
                              self.omega_diag.copy(), self.working_response.copy())


@dataclass
class ChainState:
    """One sweep's parameter block."""

    gamma: np.ndarray
    theta_o: np.ndarray
    theta_d: np.ndarray
    rho_o: float
    rho_d: float
    phi2_o: float
    phi2_d: float
    augmented: AugmentedState | None = None

    def copy(self) -> "ChainState":
        return ChainState(self.gamma.copy(), self.theta_o.copy(), self.theta_d.copy(),
                          self.rho_o, self.rho_d, self.phi2_o, self.phi2_d,
                          None if self.augmented is None else self.augmented.copy())


@dataclass
class ChainOutput:
    """Stored post-burn-in draws plus metadata and rho tuning trace."""

    draws: np.ndarray
    param_names: list[str]
    metadata: dict
    rho_tuning: dict = field(default_factory=dict)
    timing_seconds: float = 0.0   # volatile; excluded from serialized outputs

    def trace(self, name: str) -> np.ndarray:
        return self.draws[:, self.param_names.index(name)]


def intensity(state: ChainState, designs: DesignMatrices, clip: float = ETA_CLIP):
    """Poisson intensities exp(Z gamma + theta_o[o(i)] + theta_d[d(i)]).

    The linear predictor is clamped at ``clip`` (default 700, just under the
    double overflow point) so the result is always finite.
    """
    eta = (designs.Z @ state.gamma
           + state.theta_o[designs.origin_map]
           + state.theta_d[designs.dest_map])
    if not np.all(np.isfinite(eta)):
        raise FloatingPointError("non-finite linear predictor")
    return np.exp(np.clip(eta, -clip, clip))


def _draw_gaussian_from_precision(Q: np.ndarray, b: np.ndarray, rng, what: str):
    """Draw from N(Q^-1 b, Q^-1) via a Cholesky factor of the precision."""
    try:
        L = sla.cholesky(Q, lower=True)
    except sla.LinAlgError as exc:
        raise SamplerError(f"non-SPD precision in {what} update; "
                           "check covariate scaling") from exc
    mean = sla.cho_solve((L, True), b)
    z = rng.standard_normal(b.size)
    return mean + sla.solve_triangular(L, z, lower=True, trans="T")


def conditional_gaussian(Q: np.ndarray, b: np.ndarray):
    """Mean and covariance of the N(Q^-1 b, Q^-1) conditional (for tests)."""
    cov = sla.inv(Q)
    return cov @ b, cov


class GibbsSampler:
    """Sweep machinery bound to one dataset.

    Immutable inputs (designs, counts, spatial system, mixture table,
    priors) are preprocessed once; the per-step methods mutate a
    :class:`ChainState` in place.  One instance drives one chain at a time.
    """

    def __init__(self, designs: DesignMatrices, y: np.ndarray, system: SpatialSystem,
                 table: MixtureTable, priors: PriorSpec | None = None,
                 rho_variant: str = "griddy", recenter: bool = True,
                 fix_rho: float | None = None):
        if rho_variant not in ("griddy", "metropolis"):
            raise ValueError(f"unknown rho variant {rho_variant!r}")
        if fix_rho is None and system.logdet_grid is None:
            raise ValueError("build the log-determinant grid before sampling")
        self.designs = designs
        self.system = system
        self.table = table
        self.priors = priors or PriorSpec()
        self.rho_variant = rho_variant
        self.recenter = recenter
        self.fix_rho = fix_rho
        self.n = designs.n_regions
        self.overflow_count = 0

        W = system.W
        self._Wd = W
        self._S1 = (W + W.T).toarray()
        self._S2 = (W.T @ W).toarray()

        self._prior_mean, self._prior_var = self.priors.expand(designs.P)
        self.set_counts(y)

    # -- y-dependent structures -------------------------------------------

    def set_counts(self, y: np.ndarray) -> None:
        """Bind the count vector (rebuilds the stacked layout)."""
        y = np.asarray(y)
        if y.shape != (self.designs.n_dyads,):
            raise ValueError("y length does not match the design")
        if np.any(y < 0) or not np.issubdtype(y.dtype, np.integer):
            raise ValueError("y must be non-negative integers")
        self.y = y.astype(np.int64)
        self.pos = np.flatnonzero(self.y > 0)
        self.n_plus = self.y.size + self.pos.size

        Z = self.designs.Z
        self.Z_plus = np.vstack([Z, Z[self.pos]]) if self.pos.size else Z.copy()
        self.om_plus = np.concatenate([self.designs.origin_map,
                                       self.designs.origin_map[self.pos]])
        self.dm_plus = np.concatenate([self.designs.dest_map,
                                       self.designs.dest_map[self.pos]])
        self._zw = np.empty_like(self.Z_plus)

        # mixture components per stacked row group; component membership is
        # fixed for a chain because y is fixed
        groups = []
        w, m, s = self.table.lookup(1)
        rows = np.arange(self.y.size)
        groups.append((rows, np.log(w) - 0.5 * np.log(2 * np.pi * s), m, s))
        if self.pos.size:
            shapes = self.y[self.pos]
            for shape in np.unique(shapes):
                rows = self.y.size + np.flatnonzero(shapes == shape)
                w, m, s = self.table.lookup(int(shape))
                groups.append((rows, np.log(w) - 0.5 * np.log(2 * np.pi * s), m, s))
        self._groups = groups

    # -- helpers -----------------------------------------------------------

    def _eta(self, state: ChainState) -> np.ndarray:
        d = self.designs
        eta = d.Z @ state.gamma + state.theta_o[d.origin_map] + state.theta_d[d.dest_map]
        if not np.all(np.isfinite(eta)):
            raise SamplerError("non-finite linear predictor")
        over = int(np.count_nonzero(eta > ETA_CLIP))
        if over:
            self.overflow_count += over
        return np.clip(eta, -ETA_CLIP, ETA_CLIP)

    def _stack(self, v: np.ndarray) -> np.ndarray:
        return np.concatenate([v, v[self.pos]]) if self.pos.size else v

    def _ata(self, rho: float) -> np.ndarray:
        out = (-rho) * self._S1
        out += (rho * rho) * self._S2
        out[np.diag_indices(self.n)] += 1.0
        return out

    def _quad_coeffs(self, theta: np.ndarray):
        # theta' A'A theta = a - 2 b rho + c rho^2
        wt = self._Wd @ theta
        return float(theta @ theta), float(theta @ wt), float(wt @ wt)

    # -- Gibbs steps --------------------------------------------------------

    def gamma_conditional(self, state: ChainState):
        """Precision and linear term of the Gaussian gamma conditional."""
        aug = state.augmented
        invw = 1.0 / aug.omega_diag
        np.multiply(self.Z_plus, invw[:, None], out=self._zw)
        Q = self._zw.T @ self.Z_plus
        resid = aug.working_response - state.theta_o[self.om_plus] - state.theta_d[self.dm_plus]
        b = self._zw.T @ resid
        Q[np.diag_indices_from(Q)] += 1.0 / self._prior_var
        b += self._prior_mean / self._prior_var
        return Q, b

    def step_gamma(self, state: ChainState, rng) -> None:
        Q, b = self.gamma_conditional(state)
        state.gamma = _draw_gaussian_from_precision(Q, b, rng, "gamma")

    def theta_conditional(self, state: ChainState, which: str):
        """Precision and linear term for the theta_o or theta_d conditional.

        The mean term subtracts the fixed-effect part Z gamma and the other
        random-effect block, never the block being updated.
        """
        aug = state.augmented
        invw = 1.0 / aug.omega_diag
        if which == "origin":
            own_map, other = self.om_plus, state.theta_d[self.dm_plus]
            rho, phi2 = state.rho_o, state.phi2_o
        elif which == "destination":
            own_map, other = self.dm_plus, state.theta_o[self.om_plus]
            rho, phi2 = state.rho_d, state.phi2_d
        else:
            raise ValueError("which must be 'origin' or 'destination'")
        resid = (aug.working_response - self.Z_plus @ state.gamma - other) * invw
        b = np.bincount(own_map, weights=resid, minlength=self.n)
        Q = self._ata(rho) / phi2
        Q[np.diag_indices(self.n)] += np.bincount(own_map, weights=invw, minlength=self.n)
        return Q, b

    def step_theta(self, state: ChainState, which: str, rng) -> None:
        Q, b = self.theta_conditional(state, which)
        draw = _draw_gaussian_from_precision(Q, b, rng, f"theta_{which}")
        if self.recenter:
            shift = draw.mean()
            draw -= shift
            state.gamma[0] += shift
        if which == "origin":
            state.theta_o = draw
        else:
            state.theta_d = draw

    def phi2_posterior(self, state: ChainState, which: str):
        """Shape and scale of the inverse-Gamma phi2 conditional."""
        theta = state.theta_o if which == "origin" else state.theta_d
        rho = state.rho_o if which == "origin" else state.rho_d
        a, b, c = self._quad_coeffs(theta)
        quad = a - 2.0 * b * rho + c * rho * rho
        shape = 0.5 * (self.n + self.priors.ig_rate)
        scale = 0.5 * (quad + self.priors.ig_rate * self.priors.ig_shape)
        return shape, scale

    def step_phi2(self, state: ChainState, which: str, rng) -> None:
        shape, scale = self.phi2_posterior(state, which)
        if scale <= 0.0:
            raise SamplerError("degenerate inverse-Gamma scale in phi2 update")
        draw = scale / rng.gamma(shape)
        if which == "origin":
            state.phi2_o = draw
        else:
            state.phi2_d = draw

    def rho_log_kernel(self, state: ChainState, which: str):
        """Log conditional kernel of rho on the grid: ln|A| - quad/(2 phi2)."""
        theta = state.theta_o if which == "origin" else state.theta_d
        phi2 = state.phi2_o if which == "origin" else state.phi2_d
        a, b, c = self._quad_coeffs(theta)
        grid = self.system.logdet_grid
        quad = a - 2.0 * b * grid.rho + c * grid.rho**2
        return grid.rho, grid.logdet - quad / (2.0 * phi2)

    def step_rho(self, state: ChainState, which: str, rng,
                 tuner: "RhoTuner | None" = None) -> None:
        if self.fix_rho is not None:
            return
        if self.rho_variant == "griddy":
            rho_grid, logk = self.rho_log_kernel(state, which)
            p = np.exp(logk - logk.max())
            cdf = np.cumsum(p)
            cdf /= cdf[-1]
            draw = float(np.interp(rng.random(), cdf, rho_grid))
        else:
            draw = self._rho_metropolis(state, which, rng, tuner)
        if which == "origin":
            state.rho_o = draw
        else:
            state.rho_d = draw

    def _rho_log_target(self, state: ChainState, which: str, rho: float) -> float:
        theta = state.theta_o if which == "origin" else state.theta_d
        phi2 = state.phi2_o if which == "origin" else state.phi2_d
        a, b, c = self._quad_coeffs(theta)
        quad = a - 2.0 * b * rho + c * rho * rho
        return float(self.system.logdet_grid.interp(rho)) - quad / (2.0 * phi2)

    def _rho_metropolis(self, state, which, rng, tuner) -> float:
        current = state.rho_o if which == "origin" else state.rho_d
        grid = self.system.logdet_grid
        scale = tuner.scale if tuner is not None else 0.1
        prop = current + scale * rng.standard_normal()
        u = rng.random()
        if not grid.rho[0] <= prop <= grid.rho[-1]:
            accepted = False
        else:
            diff = self._rho_log_target(state, which, prop) - \
                self._rho_log_target(state, which, current)
            accepted = np.log(u) < diff
        if tuner is not None:
            tuner.record(accepted)
        return prop if accepted else current

    def step_tau(self, state: ChainState, rng) -> None:
        """Draw the latent times given counts and current intensities.

        For every i, xi ~ Exponential(lambda_i) and tau_i1 = 1 + xi; for
        positive counts tau_i2 ~ Beta(y_i, 1) and tau_i1 = 1 - tau_i2 + xi.
        """
        lam = np.exp(self._eta(state))
        xi = rng.exponential(scale=1.0 / lam)
        tau1 = 1.0 + xi
        if self.pos.size:
            tau2 = rng.beta(self.y[self.pos].astype(float), 1.0)
            tau1[self.pos] = 1.0 - tau2 + xi[self.pos]
            tau = np.concatenate([tau1, tau2])
        else:
            tau = tau1
        aug = state.augmented
        if aug is None:
            state.augmented = AugmentedState(tau, np.zeros(self.n_plus, dtype=np.int64),
                                             np.ones(self.n_plus), np.zeros(self.n_plus))
        else:
            aug.tau = tau

    def step_indicators(self, state: ChainState, rng) -> None:
        """Draw mixture indicators, refresh Omega and the working response."""
        aug = state.augmented
        neg_log_tau = -np.log(aug.tau)
        log_lam = self._stack(self._eta(state))
        resid = neg_log_tau - log_lam

        nu_idx = np.empty(self.n_plus, dtype=np.int64)
        omega = np.empty(self.n_plus)
        mcomp = np.empty(self.n_plus)
        uniforms = rng.random(self.n_plus)
        for rows, logw_norm, m, s in self._groups:
            if m.size == 1:
                nu_idx[rows] = 0
                omega[rows] = s[0]
                mcomp[rows] = m[0]
                continue
            r = resid[rows]
            logmass = logw_norm - (r[:, None] - m) ** 2 / (2.0 * s)
            logmass -= logmass.max(axis=1, keepdims=True)
            p = np.exp(logmass)
            cdf = np.cumsum(p, axis=1)
            u = uniforms[rows] * cdf[:, -1]
            idx = (cdf < u[:, None]).sum(axis=1)
            nu_idx[rows] = idx
            omega[rows] = s[idx]
            mcomp[rows] = m[idx]
        aug.nu_indicators = nu_idx
        aug.omega_diag = omega
        aug.working_response = neg_log_tau - mcomp

    # -- sweeps and chains ---------------------------------------------------

    def initial_state(self, rng) -> ChainState:
        """Neutral start: intercept at log mean count, everything else flat.

        The augmentation is drawn once (steps V-VI) so the first sweep can
        begin at step I.
        """
        gamma = np.zeros(self.designs.P)
        gamma[0] = np.log(self.y.mean() + 0.01)
        state = ChainState(gamma=gamma, theta_o=np.zeros(self.n),
                           theta_d=np.zeros(self.n),
                           rho_o=self.fix_rho or 0.0, rho_d=self.fix_rho or 0.0,
                           phi2_o=1.0, phi2_d=1.0)
        self.step_tau(state, rng)
        self.step_indicators(state, rng)
        return state

    def sweep(self, state: ChainState, rng, tuners=None) -> None:
        """One full cycle I -> II(o) -> II(d) -> III(x2) -> IV(x2) -> V -> VI."""
        to, td = (tuners or (None, None))
        self.step_gamma(state, rng)
        self.step_theta(state, "origin", rng)
        self.step_theta(state, "destination", rng)
        self.step_phi2(state, "origin", rng)
        self.step_phi2(state, "destination", rng)
        self.step_rho(state, "origin", rng, to)
        self.step_rho(state, "destination", rng, td)
        self.step_tau(state, rng)
        self.step_indicators(state, rng)

    def param_names(self, region_ids: list[str]) -> list[str]:
        return (list(self.designs.column_names)
                + ["rho_origin", "rho_dest", "phi2_origin", "phi2_dest"]
                + [f"effect_origin:{r}" for r in region_ids]
                + [f"effect_dest:{r}" for r in region_ids])

    def pack(self, state: ChainState) -> np.ndarray:
        return np.concatenate([
            state.gamma,
            [state.rho_o, state.rho_d, state.phi2_o, state.phi2_d],
            state.theta_o, state.theta_d,
        ])

    def _debug_checks(self, state: ChainState, sweep: int) -> None:
        assert -1.0 < state.rho_o < 1.0 and -1.0 < state.rho_d < 1.0, sweep
        assert state.phi2_o > 0.0 and state.phi2_d > 0.0, sweep
        assert np.all(np.isfinite(state.gamma)), sweep
        aug = state.augmented
        assert np.all(aug.tau > 0.0), sweep
        assert aug.tau.size == self.n_plus == self.y.size + self.pos.size, sweep
        if self.recenter:
            scale = max(1.0, float(np.abs(state.theta_o).max(initial=0.0)))
            assert abs(state.theta_o.mean()) <= 1e-12 * scale, sweep
            assert abs(state.theta_d.mean()) <= 1e-12 * scale, sweep


class RhoTuner:
    """Adaptive random-walk scale for the Metropolis rho variant.

    The scale adapts in windows during burn-in only (targeting acceptance
    in [0.2, 0.5]) and is frozen afterwards so the post-burn-in kernel is a
    fixed Markov kernel.
    """

    def __init__(self, scale: float = 0.1, window: int = 100,
                 lo: float = 0.2, hi: float = 0.5):
        self.scale = scale
        self.window = window
        self.lo = lo
        self.hi = hi
        self.frozen = False
        self._accepted = 0
        self._seen = 0
        self.history: list[tuple[int, float, float]] = []
        self._total = 0

    def record(self, accepted: bool) -> None:
        self._total += 1
        self._accepted += accepted
        if self.frozen:
            return
        self._seen += 1
        if self._seen == self.window:
            rate = self._accepted / self._seen
            self.history.append((self._total, self.scale, rate))
            if rate < self.lo:
                self.scale = max(self.scale * 0.9, 1e-3)
            elif rate > self.hi:
                self.scale = min(self.scale * 1.1, 1.0)
            self._seen = 0
            self._accepted = 0

    def freeze(self) -> None:
        self.frozen = True
        self._accepted = 0
        self._seen = 0

    def state_dict(self) -> dict:
        return {"scale": self.scale, "frozen": self.frozen,
                "accepted": self._accepted, "seen": self._seen,
                "total": self._total, "history": self.history}

    def load_state_dict(self, d: dict) -> None:
        self.scale = d["scale"]
        self.frozen = d["frozen"]
        self._accepted = d["accepted"]
        self._seen = d["seen"]
        self._total = d["total"]
        self.history = [tuple(h) for h in d["history"]]


def problem_fingerprint(designs: DesignMatrices, y: np.ndarray,
                        schedule: Schedule, seed: int) -> str:
    """Hash identifying one chain's inputs, used to guard checkpoint resume."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(designs.Z).tobytes())
    h.update(np.ascontiguousarray(y).tobytes())
    h.update(json.dumps([schedule.total, schedule.burn_in, schedule.thin, seed]).encode())
    return h.hexdigest()


def run_chain(designs: DesignMatrices, y: np.ndarray, system: SpatialSystem,
              table: MixtureTable, priors: PriorSpec | None = None,
              schedule: Schedule | None = None, seed: int = 0,
              rho_variant: str = "griddy", recenter: bool = True,
              fix_rho: float | None = None, debug: bool = False,
              checkpoint_path=None, checkpoint_every: int = 0,
              resume: bool = False, config_hash: str | None = None,
              mixture_checksum: str | None = None) -> ChainOutput:
    """Run one chain and return the stored post-burn-in draws.

    Deterministic given the seed: reruns produce bit-identical outputs.
    With ``checkpoint_path``/``checkpoint_every`` set, the full chain state
    (including the RNG stream) is serialized every so many sweeps and a
    later call with ``resume=True`` continues to an identical result.
    """
    schedule = schedule or Schedule()
    sampler = GibbsSampler(designs, y, system, table, priors=priors,
                           rho_variant=rho_variant, recenter=recenter, fix_rho=fix_rho)
    names = sampler.param_names(system.region_ids)
    fingerprint = problem_fingerprint(designs, y, schedule, seed)

    draws = np.empty((schedule.kept, len(names)))
    tuners = (RhoTuner(), RhoTuner()) if rho_variant == "metropolis" else None
    rng = np.random.default_rng(seed)
    start_sweep = 0
    state = None

    kept = 0
    if resume:
        if checkpoint_path is None:
            raise ValueError("resume requires a checkpoint path")
        start_sweep, state, rng, stored, tuner_states = load_checkpoint(checkpoint_path, fingerprint)
        kept = stored.shape[0]
        draws[:kept] = stored
        if tuners is not None and tuner_states is not None:
            for t, d in zip(tuners, tuner_states):
                t.load_state_dict(d)
    if state is None:
        state = sampler.initial_state(rng)

    t0 = time.perf_counter()
    for sweep in range(start_sweep, schedule.total):
        if tuners is not None and sweep == schedule.burn_in:
            for t in tuners:
                t.freeze()
        try:
            sampler.sweep(state, rng, tuners)
        except SamplerError as exc:
            exc.sweep = sweep
            exc.state = state
            raise
        if debug:
            sampler._debug_checks(state, sweep)
        if sweep >= schedule.burn_in and (sweep - schedule.burn_in) % schedule.thin == 0:
            draws[kept] = sampler.pack(state)
            kept += 1
        if (checkpoint_path is not None and checkpoint_every
                and (sweep + 1) % checkpoint_every == 0 and sweep + 1 < schedule.total):
            save_checkpoint(checkpoint_path, fingerprint, sweep + 1, state, rng,
                            draws[:kept], tuners)

    metadata = {
        "total": schedule.total,
        "burn_in": schedule.burn_in,
        "thin": schedule.thin,
        "seed": seed,
        "rho_variant": rho_variant,
        "recenter": recenter,
        "n_regions": system.n,
        "n_dyads": int(y.size),
        "overflow_count": sampler.overflow_count,
        "config_hash": config_hash,
        "mixture_checksum": mixture_checksum,
    }
    if sampler.overflow_count:
        warnings.warn(f"linear predictor clamped {sampler.overflow_count} times; "
                      "persistent overflow usually means unscaled covariates")
    tuning = {}
    if tuners is not None:
        tuning = {"origin": tuners[0].history, "destination": tuners[1].history,
                  "final_scales": [tuners[0].scale, tuners[1].scale]}
    return ChainOutput(draws=draws, param_names=names, metadata=metadata,
                       rho_tuning=tuning, timing_seconds=time.perf_counter() - t0)


def _run_chain_worker(args):
    return run_chain(**args)


def run_chains(designs: DesignMatrices, y: np.ndarray, system: SpatialSystem,
               table: MixtureTable, priors: PriorSpec | None = None,
               schedule: Schedule | None = None, seeds=(0, 1),
               processes: int = 1, **kwargs) -> list[ChainOutput]:
    """Run independent chains with distinct seeds, optionally in parallel.

    Chains are embarrassingly parallel; all shared inputs are immutable.
    Results come back in seed order regardless of completion order.
    """
    jobs = [dict(designs=designs, y=y, system=system, table=table, priors=priors,
                 schedule=schedule, seed=int(s), **kwargs) for s in seeds]
    if processes > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(processes, len(jobs))) as pool:
            return list(pool.map(_run_chain_worker, jobs))
    return [_run_chain_worker(j) for j in jobs]


# -- checkpoint and draw-store serialization ---------------------------------

def save_checkpoint(path, fingerprint: str, sweep: int, state: ChainState,
                    rng: np.random.Generator, draws_so_far: np.ndarray,
                    tuners=None) -> None:
    aug = state.augmented
    extra = {}
    if tuners is not None:
        extra["rho_tuners"] = np.array(json.dumps([t.state_dict() for t in tuners]))
    np.savez(
        path,
        fingerprint=np.array(fingerprint),
        sweep=np.array(sweep),
        gamma=state.gamma,
        theta_o=state.theta_o,
        theta_d=state.theta_d,
        scalars=np.array([state.rho_o, state.rho_d, state.phi2_o, state.phi2_d]),
        tau=aug.tau,
        nu_indicators=aug.nu_indicators,
        omega_diag=aug.omega_diag,
        working_response=aug.working_response,
        rng_state=np.array(json.dumps(rng.bit_generator.state)),
        draws=draws_so_far,
        **extra,
    )


def load_checkpoint(path, fingerprint: str):
    with np.load(path, allow_pickle=False) as z:
        if str(z["fingerprint"]) != fingerprint:
            raise ValueError("checkpoint does not match this chain's inputs")
        aug = AugmentedState(z["tau"], z["nu_indicators"], z["omega_diag"],
                             z["working_response"])
        sc = z["scalars"]
        state = ChainState(gamma=z["gamma"], theta_o=z["theta_o"], theta_d=z["theta_d"],
                           rho_o=float(sc[0]), rho_d=float(sc[1]),
                           phi2_o=float(sc[2]), phi2_d=float(sc[3]), augmented=aug)
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(str(z["rng_state"]))
        tuner_states = None
        if "rho_tuners" in z.files:
            tuner_states = json.loads(str(z["rho_tuners"]))
        return int(z["sweep"]), state, rng, z["draws"].copy(), tuner_states


def write_draws(output: ChainOutput, path) -> None:
    """Write the columnar draw store: metadata header lines, then CSV.

    Timing information is deliberately excluded so that reruns with the
    same seed produce bit-identical files.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# metadata {json.dumps(output.metadata, sort_keys=True)}\n")
        if output.rho_tuning:
            fh.write(f"# rho_tuning {json.dumps(output.rho_tuning, sort_keys=True)}\n")
        fh.write(",".join(output.param_names) + "\n")
        np.savetxt(fh, output.draws, fmt="%.17g", delimiter=",")


def read_draws(path) -> ChainOutput:
    metadata = {}
    tuning = {}
    with open(path, encoding="utf-8") as fh:
        pos = fh.tell()
        line = fh.readline()
        while line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("metadata "):
                metadata = json.loads(body[len("metadata "):])
            elif body.startswith("rho_tuning "):
                tuning = json.loads(body[len("rho_tuning "):])
            pos = fh.tell()
            line = fh.readline()
        names = line.strip().split(",")
        draws = np.loadtxt(fh, delimiter=",", ndmin=2)
    return ChainOutput(draws=draws, param_names=names, metadata=metadata,
                       rho_tuning=tuning)
