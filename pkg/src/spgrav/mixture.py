"""Gaussian mixture approximation of negative-log-Gamma errors.

The augmented count model log-linearizes latent arrival times, leaving error
terms eps = -ln(xi) with xi ~ Gamma(nu, 1).  Conditionally Gaussian updates
require approximating the law of eps, per integer shape nu, by a finite
normal mixture.  This module fits those mixtures against the exact density,
validates them (Kolmogorov-Smirnov distance, mean/variance against digamma /
trigamma), and ships the fitted table as a versioned CSV asset so fitting is
a build step rather than a runtime cost.

For shapes above the fitted range the distribution is close to normal and a
single component with the exact mean -psi(nu) and variance psi'(nu) is used.
"""

import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammainccinv, gammaincc, gammaln, polygamma
from scipy.special import ndtr

TABLE_VERSION = "1"
DEFAULT_NU_MAX = 100
DEFAULT_KS_TARGET = 0.01
COMPONENT_CAP = 10


def exact_logpdf(x, nu):
    """log density of eps = -ln(xi), xi ~ Gamma(nu, 1)."""
    x = np.asarray(x, dtype=float)
    return -nu * x - np.exp(-x) - gammaln(nu)


def exact_cdf(x, nu):
    """CDF of eps = -ln(xi): P(eps <= x) = P(xi >= e^-x)."""
    return gammaincc(nu, np.exp(-np.asarray(x, dtype=float)))


def exact_mean(nu) -> float:
    return float(-digamma(nu))


def exact_var(nu) -> float:
    return float(polygamma(1, nu))


def _quantile(nu, p):
    # cdf(t) = gammaincc(nu, e^-t)  =>  t = -ln(gammainccinv(nu, p))
    return -np.log(gammainccinv(nu, p))


@dataclass
class MixtureTable:
    """Per-shape mixture components (weights, means, variances).

    ``components[nu]`` holds a (Q, 3) array of rows (weight, mean, variance)
    for 1 <= nu <= nu_max; larger shapes fall back to the analytic
    single-Gaussian tail rule.
    """

    nu_max: int
    components: dict[int, np.ndarray]
    achieved_ks: dict[int, float] = field(default_factory=dict)
    version: str = TABLE_VERSION

    def __post_init__(self):
        for nu, comp in self.components.items():
            w, _, s = comp[:, 0], comp[:, 1], comp[:, 2]
            if abs(w.sum() - 1.0) > 1e-10:
                raise ValueError(f"nu={nu}: weights sum to {w.sum()}, not 1")
            if np.any(s <= 0):
                raise ValueError(f"nu={nu}: non-positive component variance")

    def q_count(self, nu: int) -> int:
        if nu <= self.nu_max:
            return self.components[nu].shape[0]
        return 1

    def lookup(self, nu: int):
        """(weights, means, variances) arrays for shape nu, tail rule applied."""
        if nu < 1:
            raise ValueError("shape nu must be a positive integer")
        if nu <= self.nu_max:
            comp = self.components[nu]
            return comp[:, 0], comp[:, 1], comp[:, 2]
        return (np.array([1.0]),
                np.array([exact_mean(nu)]),
                np.array([exact_var(nu)]))


def moments(table: MixtureTable, nu: int):
    """Mean and variance implied by the mixture for shape nu."""
    w, m, s = table.lookup(nu)
    if w.size == 1:
        return float(m[0]), float(s[0])
    mean = float(w @ m)
    var = float(w @ (s + m * m) - mean * mean)
    return mean, var


def mixture_cdf(table: MixtureTable, x, nu: int):
    w, m, s = table.lookup(nu)
    x = np.asarray(x, dtype=float)
    z = (x[..., None] - m) / np.sqrt(s)
    return ndtr(z) @ w


def ks_distance(table: MixtureTable, nu: int, grid_points: int = 10001) -> float:
    """Sup-distance between mixture and exact CDFs on a wide quantile grid."""
    lo = _quantile(nu, 1e-9)
    hi = _quantile(nu, 1.0 - 1e-9)
    grid = np.linspace(lo, hi, grid_points)
    return float(np.max(np.abs(mixture_cdf(table, grid, nu) - exact_cdf(grid, nu))))


def indicator_weights(table: MixtureTable, residual: float, nu: int) -> np.ndarray:
    """Posterior probabilities of the mixture component given a residual.

    Computed in log space so that residuals far from every component still
    produce a valid normalized distribution.
    """
    if not math.isfinite(residual):
        raise ValueError("residual must be finite")
    w, m, s = table.lookup(nu)
    logmass = np.log(w) - 0.5 * np.log(2.0 * np.pi * s) - (residual - m) ** 2 / (2.0 * s)
    logmass -= logmass.max()
    p = np.exp(logmass)
    return p / p.sum()


def sample_error(table: MixtureTable, nu: int, size: int, rng: np.random.Generator):
    """Draw from the fitted mixture (component by weight, then Gaussian)."""
    w, m, s = table.lookup(nu)
    comp = rng.choice(w.size, size=size, p=w)
    return rng.normal(m[comp], np.sqrt(s[comp]))


def _em_fit(grid, gw, q: int, nu: int, max_iter: int = 500, tol: float = 1e-12):
    """Weighted EM of a q-component normal mixture to a gridded density."""
    target_mean = float(gw @ grid)
    target_var = float(gw @ (grid - target_mean) ** 2)
    # initialize at evenly spaced exact quantiles
    probs = (np.arange(q) + 0.5) / q
    m = _quantile(nu, probs) if q > 1 else np.array([target_mean])
    s = np.full(q, max(target_var / q, 1e-6))
    w = np.full(q, 1.0 / q)

    prev = -np.inf
    for _ in range(max_iter):
        dens = np.exp(-0.5 * (grid[:, None] - m) ** 2 / s) / np.sqrt(2.0 * np.pi * s)
        mix = dens @ w
        np.maximum(mix, 1e-300, out=mix)
        obj = float(gw @ np.log(mix))
        resp = (dens * w) / mix[:, None]
        wk = gw @ resp
        w = wk / wk.sum()
        m = (gw * grid) @ resp / wk
        s = ((gw[:, None] * resp) * (grid[:, None] - m) ** 2).sum(axis=0) / wk
        np.maximum(s, 1e-10, out=s)
        if obj - prev < tol:
            break
        prev = obj

    # affine moment correction: make mixture mean/variance match the exact
    # -psi(nu) / psi'(nu) values without materially changing the shape
    mix_mean = float(w @ m)
    mix_var = float(w @ (s + m * m) - mix_mean**2)
    scale = math.sqrt(target_var / mix_var)
    m = target_mean + scale * (m - mix_mean)
    s = s * scale**2
    return np.column_stack([w / w.sum(), m, s])


def fit_mixture_table(nu_max: int = DEFAULT_NU_MAX,
                      quality: float = DEFAULT_KS_TARGET,
                      component_cap: int = COMPONENT_CAP,
                      grid_points: int = 4001) -> MixtureTable:
    """Fit mixtures for every shape nu in 1..nu_max.

    For each shape the component count grows from 1 until the
    Kolmogorov-Smirnov distance to the exact CDF drops below ``quality`` or
    the cap is reached (keeping the best fit, with a warning).  Fitting is
    deterministic: EM runs on a fixed quadrature grid of the exact density,
    and a final affine correction pins the mixture mean and variance to the
    exact -psi(nu) and psi'(nu).
    """
    if nu_max < 1:
        raise ValueError("nu_max must be at least 1")
    components: dict[int, np.ndarray] = {}
    achieved: dict[int, float] = {}
    for nu in range(1, nu_max + 1):
        lo = _quantile(nu, 1e-10)
        hi = _quantile(nu, 1.0 - 1e-10)
        grid = np.linspace(lo, hi, grid_points)
        gw = np.exp(exact_logpdf(grid, nu))
        gw /= gw.sum()

        best = None
        best_ks = np.inf
        for q in range(1, component_cap + 1):
            comp = _em_fit(grid, gw, q, nu)
            probe = MixtureTable(nu_max=nu, components={nu: comp})
            ks = ks_distance(probe, nu)
            if ks < best_ks:
                best, best_ks = comp, ks
            if ks <= quality:
                break
        else:
            warnings.warn(
                f"nu={nu}: component cap {component_cap} reached with "
                f"KS={best_ks:.4g} above target {quality}"
            )
        components[nu] = best
        achieved[nu] = best_ks
    return MixtureTable(nu_max=nu_max, components=components, achieved_ks=achieved)


def write_table(table: MixtureTable, path) -> None:
    """Serialize to the ``nu,q,weight,mean,variance`` CSV asset format."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# spgrav log-gamma mixture table version={table.version}\n")
        fh.write(f"# nu_max={table.nu_max}\n")
        for nu in sorted(table.achieved_ks):
            fh.write(f"# ks {nu} {float(table.achieved_ks[nu])!r}\n")
        fh.write("nu,q,weight,mean,variance\n")
        for nu in sorted(table.components):
            comp = table.components[nu]
            for q in range(comp.shape[0]):
                w, m, s = (float(v) for v in comp[q])
                fh.write(f"{nu},{q + 1},{w!r},{m!r},{s!r}\n")


def read_table(path) -> MixtureTable:
    """Load a table written by :func:`write_table` (bit-exact round trip)."""
    version = TABLE_VERSION
    nu_max = None
    achieved: dict[int, float] = {}
    rows: dict[int, list[tuple[int, float, float, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "version=" in body:
                    version = body.split("version=", 1)[1].strip()
                elif body.startswith("nu_max="):
                    nu_max = int(body.split("=", 1)[1])
                elif body.startswith("ks "):
                    _, nu_s, ks_s = body.split()
                    achieved[int(nu_s)] = float(ks_s)
                continue
            if line.startswith("nu,"):
                continue
            nu_s, q_s, w_s, m_s, s_s = line.split(",")
            rows.setdefault(int(nu_s), []).append(
                (int(q_s), float(w_s), float(m_s), float(s_s))
            )
    if not rows:
        raise ValueError(f"no mixture components found in {path}")
    components = {}
    for nu, recs in rows.items():
        recs.sort()
        components[nu] = np.array([[w, m, s] for _, w, m, s in recs])
    if nu_max is None:
        nu_max = max(components)
    return MixtureTable(nu_max=nu_max, components=components,
                        achieved_ks=achieved, version=version)


def table_checksum(path) -> str:
    """sha256 of the serialized table, recorded in chain metadata."""
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


_DEFAULT_CACHE: dict[str, MixtureTable] = {}


def default_table_path():
    from importlib.resources import files

    return files("spgrav").joinpath("assets/log_gamma_mixture_v1.csv")


def default_table() -> MixtureTable:
    """The table shipped with the package (cached after first load)."""
    if "table" not in _DEFAULT_CACHE:
        _DEFAULT_CACHE["table"] = read_table(default_table_path())
    return _DEFAULT_CACHE["table"]
