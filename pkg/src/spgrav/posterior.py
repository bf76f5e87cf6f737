"""Posterior summaries and convergence diagnostics.

Summaries pool post-burn-in draws across chains and report posterior means,
standard deviations and equal-tailed credible intervals, flagging parameters
whose interval excludes zero (90% mass by default).  Diagnostics are
reimplemented from their standard definitions: Geweke window z-scores with a
lag-window spectral variance, effective sample size via the initial positive
autocorrelation sequence, and split-chain potential scale reduction.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .sampler import ChainOutput


def _autocovariances(x: np.ndarray, max_lag: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    size = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[: max_lag + 1].real / n
    return acov


def spectral_variance(x: np.ndarray, lags: int | None = None) -> float:
    """Spectral density at frequency zero via a Bartlett lag window."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if lags is None:
        lags = max(1, int(round(2.0 * n ** (1.0 / 3.0))))
    lags = min(lags, n - 1)
    acov = _autocovariances(x, lags)
    if acov[0] <= 0.0:
        raise ValueError("zero-variance trace window")
    weights = 1.0 - np.arange(1, lags + 1) / (lags + 1.0)
    s = acov[0] + 2.0 * float(weights @ acov[1:])
    return max(s, 1e-12 * acov[0])


def geweke(trace: np.ndarray, first: float = 0.1, last: float = 0.5) -> float:
    """Geweke convergence z-score comparing early and late window means.

    z = (mean_first - mean_last) / sqrt(sVar_f/n_f + sVar_l/n_l) with the
    window variances estimated spectrally, so autocorrelation within the
    windows is accounted for.
    """
    trace = np.asarray(trace, dtype=float)
    n = trace.size
    if n < 100:
        raise ValueError("need at least 100 draws for the Geweke diagnostic")
    if not (0 < first < 1 and 0 < last < 1 and first + last <= 1):
        raise ValueError("window fractions must be in (0, 1) and not overlap")
    a = trace[: int(np.floor(first * n))]
    b = trace[n - int(np.floor(last * n)):]
    var = spectral_variance(a) / a.size + spectral_variance(b) / b.size
    return float((a.mean() - b.mean()) / np.sqrt(var))


def effective_sample_size(trace: np.ndarray) -> float:
    """ESS via Geyer's initial positive sequence of autocorrelations.

    Constant traces return the trace length by convention.
    """
    trace = np.asarray(trace, dtype=float)
    n = trace.size
    if n < 100:
        raise ValueError("need at least 100 draws for an ESS estimate")
    acov = _autocovariances(trace, n - 1)
    if acov[0] <= 0.0:
        return float(n)
    rho = acov / acov[0]
    # sum consecutive pairs while they stay positive
    tau = 1.0
    k = 1
    while k + 1 < n:
        pair = rho[k] + rho[k + 1]
        if pair <= 0.0:
            break
        tau += 2.0 * pair
        k += 2
    return float(min(n, max(1.0, n / tau)))


def split_rhat(traces: list[np.ndarray]) -> float:
    """Split-chain potential scale reduction factor (needs >= 2 chains)."""
    if len(traces) < 2:
        raise ValueError("potential scale reduction needs at least two chains")
    halves = []
    for t in traces:
        t = np.asarray(t, dtype=float)
        h = t.size // 2
        halves.extend([t[:h], t[h: 2 * h]])
    m = len(halves)
    length = halves[0].size
    means = np.array([h.mean() for h in halves])
    variances = np.array([h.var(ddof=1) for h in halves])
    W = variances.mean()
    B = length * means.var(ddof=1)
    if W <= 0.0:
        return 1.0
    var_hat = (length - 1) / length * W + B / length
    return float(np.sqrt(var_hat / W))


def _block_of(name: str) -> str:
    if name == "intercept":
        return "intercept"
    if name.startswith(("origin:", "lag_origin:")):
        return "origin"
    if name.startswith(("dest:", "lag_dest:")):
        return "destination"
    if name.startswith("dyad:"):
        return "distance"
    if name.startswith(("rho_", "phi2_")):
        return "spatial"
    if name.startswith("effect_"):
        return "effects"
    return "other"


@dataclass
class SummaryRow:
    name: str
    block: str
    mean: float
    sd: float
    lo: float
    hi: float
    significant: bool


@dataclass
class SummaryTable:
    rows: list[SummaryRow]
    level: float

    def row(self, name: str) -> SummaryRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def names(self) -> list[str]:
        return [r.name for r in self.rows]


def summarize(outputs, level: float = 0.9) -> SummaryTable:
    """Pool draws across chains and summarize each parameter.

    Equal-tailed quantile intervals; a parameter is flagged significant iff
    its interval excludes zero.  Chains must agree on parameter names and,
    when config hashes are recorded, on the configuration.
    """
    if isinstance(outputs, ChainOutput):
        outputs = [outputs]
    if not outputs:
        raise ValueError("no chains to summarize")
    names = outputs[0].param_names
    hashes = {o.metadata.get("config_hash") for o in outputs}
    hashes.discard(None)
    if len(hashes) > 1:
        raise ValueError("refusing to co-summarize chains from different configs")
    for o in outputs:
        if o.param_names != names:
            raise ValueError("chains disagree on parameter names")
        if o.draws.size == 0:
            raise ValueError("empty draw set")
    draws = np.concatenate([o.draws for o in outputs], axis=0)
    if not 0.0 < level < 1.0:
        raise ValueError("interval mass must be in (0, 1)")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(draws, [alpha, 1.0 - alpha], axis=0)
    mean = draws.mean(axis=0)
    sd = draws.std(axis=0)
    rows = [
        SummaryRow(name=nm, block=_block_of(nm), mean=float(mean[j]), sd=float(sd[j]),
                   lo=float(lo[j]), hi=float(hi[j]),
                   significant=bool(lo[j] > 0.0 or hi[j] < 0.0))
        for j, nm in enumerate(names)
    ]
    return SummaryTable(rows=rows, level=level)


def write_summary_csv(summary: SummaryTable, path) -> None:
    """Full-precision summary CSV: block,variable,mean,sd,lo,hi,significant."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "variable", "mean", "sd", "lo", "hi", "significant"])
        for r in summary.rows:
            writer.writerow([r.block, r.name, repr(r.mean), repr(r.sd),
                             repr(r.lo), repr(r.hi), int(r.significant)])


@dataclass
class DiagnosticRow:
    name: str
    geweke_z: float
    ess: float
    psrf: float | None


@dataclass
class DiagnosticsReport:
    rows: list[DiagnosticRow]
    verdict: str              # "pass" or "warn"
    z_threshold: float
    psrf_threshold: float

    def row(self, name: str) -> DiagnosticRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def diagnose(outputs, z_threshold: float = 2.58,
             psrf_threshold: float = 1.1) -> DiagnosticsReport:
    """Per-parameter convergence diagnostics with an overall verdict.

    The Geweke z is the worst across chains; ESS sums over chains; split
    PSRF is reported when at least two chains are available.  Constant
    traces get z = 0 and ESS equal to the draw count.
    """
    if isinstance(outputs, ChainOutput):
        outputs = [outputs]
    names = outputs[0].param_names
    rows = []
    warn = False
    for j, nm in enumerate(names):
        traces = [o.draws[:, j] for o in outputs]
        zs = []
        ess = 0.0
        for t in traces:
            if np.ptp(t) == 0.0:
                zs.append(0.0)
                ess += t.size
            else:
                zs.append(geweke(t))
                ess += effective_sample_size(t)
        z = max(zs, key=abs)
        psrf = None
        if len(traces) >= 2:
            psrf = split_rhat(traces) if any(np.ptp(t) > 0 for t in traces) else 1.0
        if abs(z) > z_threshold or (psrf is not None and psrf > psrf_threshold):
            warn = True
        rows.append(DiagnosticRow(name=nm, geweke_z=float(z), ess=float(ess), psrf=psrf))
    return DiagnosticsReport(rows=rows, verdict="warn" if warn else "pass",
                             z_threshold=z_threshold, psrf_threshold=psrf_threshold)


def write_diagnostics_csv(report: DiagnosticsReport, path) -> None:
    """Diagnostics CSV: variable,geweke_z,ess,psrf."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variable", "geweke_z", "ess", "psrf"])
        for r in report.rows:
            writer.writerow([r.name, repr(r.geweke_z), repr(r.ess),
                             "" if r.psrf is None else repr(r.psrf)])


def _fmt(x: float, digits: int) -> str:
    return f"{x:.{digits}f}"


def render_table(summary: SummaryTable, digits: int = 2):
    """Origin/destination two-block report in the style of gravity tables.

    Returns ``(text, csv_text)``.  Rows pair each covariate's origin and
    destination coefficients, followed by the spatially lagged ("W ...")
    counterparts, the autoregressive and variance parameters, and a distance
    block; significant entries (interval excluding zero) are starred.  The
    CSV twin carries the same numbers at the same printed precision.
    """
    by_name = {r.name: r for r in summary.rows}
    covs = [r.name.split(":", 1)[1] for r in summary.rows if r.block == "origin"
            and r.name.startswith("origin:")]
    dyads = [r.name.split(":", 1)[1] for r in summary.rows if r.block == "distance"]

    def cell(row: SummaryRow | None):
        if row is None:
            return "", ""
        star = "*" if row.significant else ""
        return _fmt(row.mean, digits) + star, _fmt(row.sd, digits)

    label_w = max([len("W " + c) for c in covs] + [len(d) for d in dyads]
                  + [len("rho"), len("phi2"), len("intercept")]) + 2
    lines = []
    csv_rows = [["block", "variable", "mean", "sd", "lo", "hi", "significant"]]

    def emit(label, orow, drow, block):
        om, os_ = cell(orow)
        dm, ds = cell(drow)
        lines.append(f"{label:<{label_w}}{om:>10}{os_:>10}{dm:>10}{ds:>10}")
        for row in (orow, drow):
            if row is not None:
                csv_rows.append([block, row.name, _fmt(row.mean, digits),
                                 _fmt(row.sd, digits), _fmt(row.lo, digits),
                                 _fmt(row.hi, digits), int(row.significant)])

    head = f"{'Variable':<{label_w}}{'Origin':>10}{'':>10}{'Destination':>10}{'':>10}"
    sub = f"{'':<{label_w}}{'Mean':>10}{'Std.Dev':>10}{'Mean':>10}{'Std.Dev':>10}"
    bar = "-" * len(sub)
    lines.extend([head, sub, bar])
    for c in covs:
        emit(c, by_name.get(f"origin:{c}"), by_name.get(f"dest:{c}"), "slope")
    for c in covs:
        emit("W " + c, by_name.get(f"lag_origin:{c}"), by_name.get(f"lag_dest:{c}"), "lag")
    lines.append(bar)
    emit("rho", by_name.get("rho_origin"), by_name.get("rho_dest"), "spatial")
    emit("phi2", by_name.get("phi2_origin"), by_name.get("phi2_dest"), "spatial")
    if dyads or "intercept" in by_name:
        lines.append(bar)
        for dname in dyads:
            emit(dname, by_name.get(f"dyad:{dname}"), None, "distance")
        if "intercept" in by_name:
            emit("intercept", by_name.get("intercept"), None, "intercept")
    lines.append(bar)
    lines.append(f"{int(summary.level * 100)}% credible intervals; "
                 "* marks intervals excluding zero.")

    text = "\n".join(lines) + "\n"
    csv_text = "\n".join(",".join(str(v) for v in row) for row in csv_rows) + "\n"
    return text, csv_text
