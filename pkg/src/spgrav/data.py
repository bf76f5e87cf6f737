"""Region and dyad data model, input validation, and design assembly.

The estimation problem is defined over n regions and the N ordered
origin-destination pairs (dyads) between them that cross a country border.
This module loads and validates the region table, expands flow files to the
dense admissible dyad set, builds knowledge stocks from patent panels via
the perpetual inventory recursion, and assembles the stacked N x P design
matrix

    Z = [1, X_o, X_d, D, W_o X_o, W_d X_d]

whose columns match the coefficient stacking
[intercept, beta_o, beta_d, gamma_D, delta_o, delta_d].
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .spatial import SpatialSystem, great_circle_km


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass
class RegionSet:
    """The n regions with ids, country codes, coordinates and covariates.

    Immutable after construction; ``with_covariate`` returns a new set.
    """

    region_ids: list[str]
    country_codes: list[str]
    lon: np.ndarray
    lat: np.ndarray
    covariates: np.ndarray          # n x p_X, raw (untransformed) values
    covariate_names: list[str]

    def __post_init__(self):
        n = len(self.region_ids)
        if n < 2:
            raise ValueError("need at least two regions")
        if len(set(self.region_ids)) != n:
            seen: dict[str, int] = {}
            for i, rid in enumerate(self.region_ids):
                if rid in seen:
                    raise ValueError(f"duplicate region_id {rid!r} "
                                     f"(rows {seen[rid] + 2} and {i + 2})")
                seen[rid] = i
        self.lon = _frozen(np.asarray(self.lon, dtype=float))
        self.lat = _frozen(np.asarray(self.lat, dtype=float))
        if not (np.all(np.isfinite(self.lon)) and np.all(np.isfinite(self.lat))):
            raise ValueError("region coordinates must be finite")
        self.covariates = _frozen(np.asarray(self.covariates, dtype=float).reshape(n, -1))
        if self.covariates.shape[1] != len(self.covariate_names):
            raise ValueError("covariate matrix width does not match covariate names")
        if not np.all(np.isfinite(self.covariates)):
            bad = np.argwhere(~np.isfinite(self.covariates))[0]
            raise ValueError(
                f"missing/non-finite covariate {self.covariate_names[bad[1]]!r} "
                f"for region {self.region_ids[bad[0]]!r}"
            )
        if len(self.country_codes) != n:
            raise ValueError("country_codes length mismatch")
        if len(set(self.country_codes)) < 2:
            warnings.warn("all regions share one country; the admissible dyad set is empty")

    @property
    def n(self) -> int:
        return len(self.region_ids)

    @property
    def p_x(self) -> int:
        return self.covariates.shape[1]

    def index_of(self, region_id: str) -> int:
        try:
            return self.region_ids.index(region_id)
        except ValueError:
            raise KeyError(f"unknown region id {region_id!r}") from None

    def with_covariate(self, name: str, values: dict[str, float]) -> "RegionSet":
        """Return a new RegionSet with one more covariate column."""
        if name in self.covariate_names:
            raise ValueError(f"covariate {name!r} already present")
        missing = [rid for rid in self.region_ids if rid not in values]
        if missing:
            raise ValueError(f"no {name!r} value for regions {missing[:5]}")
        col = np.array([values[rid] for rid in self.region_ids], dtype=float)
        return RegionSet(
            region_ids=list(self.region_ids),
            country_codes=list(self.country_codes),
            lon=self.lon.copy(),
            lat=self.lat.copy(),
            covariates=np.column_stack([self.covariates, col]),
            covariate_names=list(self.covariate_names) + [name],
        )


@dataclass
class ColumnSchema:
    """Column mapping for region CSV files.

    ``covariates=None`` takes every column that is not id/country/lon/lat,
    in file order.
    """

    region_id: str = "region_id"
    country_code: str = "country_code"
    lon: str = "lon"
    lat: str = "lat"
    covariates: list[str] | None = None


def load_regions(path, schema: ColumnSchema | None = None) -> RegionSet:
    """Load and validate a region CSV (``region_id,country_code,lon,lat,...``).

    Errors carry the offending 1-based file row number.
    """
    schema = schema or ColumnSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if header is None:
            raise ValueError(f"{path}: empty file, header row required")
        needed = [schema.region_id, schema.country_code, schema.lon, schema.lat]
        cov_cols = schema.covariates
        if cov_cols is None:
            cov_cols = [c for c in header if c not in needed]
        for col in needed + list(cov_cols):
            if col not in header:
                raise ValueError(f"{path}: missing column {col!r}")

        ids: list[str] = []
        countries: list[str] = []
        lon: list[float] = []
        lat: list[float] = []
        rows: list[list[float]] = []
        seen: dict[str, int] = {}
        for lineno, rec in enumerate(reader, start=2):
            rid = rec[schema.region_id]
            if rid in seen:
                raise ValueError(f"{path}: duplicate region_id {rid!r} "
                                 f"(rows {seen[rid]} and {lineno})")
            seen[rid] = lineno

            def cell(col, lineno=lineno, rec=rec):
                raw = rec[col]
                try:
                    return float(raw)
                except (TypeError, ValueError):
                    raise ValueError(
                        f"{path}: row {lineno}: cannot parse {col!r} value {raw!r}"
                    ) from None

            ids.append(rid)
            countries.append(rec[schema.country_code])
            lon.append(cell(schema.lon))
            lat.append(cell(schema.lat))
            rows.append([cell(c) for c in cov_cols])

    if not ids:
        raise ValueError(f"{path}: no data rows")
    return RegionSet(
        region_ids=ids,
        country_codes=countries,
        lon=np.array(lon),
        lat=np.array(lat),
        covariates=np.array(rows, dtype=float).reshape(len(ids), len(cov_cols)),
        covariate_names=list(cov_cols),
    )


@dataclass
class PanelSeries:
    """One panel observation: patent applications of a region in one year."""

    region_id: str
    period: int
    value: float


def load_panel(path) -> list[PanelSeries]:
    """Load a ``region_id,year,value`` panel CSV."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"region_id", "year", "value"}.issubset(reader.fieldnames):
            raise ValueError(f"{path}: expected columns region_id,year,value")
        for lineno, rec in enumerate(reader, start=2):
            try:
                out.append(PanelSeries(rec["region_id"], int(rec["year"]), float(rec["value"])))
            except ValueError:
                raise ValueError(f"{path}: row {lineno}: cannot parse panel record") from None
    return out


def knowledge_stock(series, depreciation: float = 0.10) -> dict[str, float]:
    """Perpetual-inventory stocks K_t = (1 - r) K_{t-1} + P_t per region.

    The first period initializes the stock at that period's value; the
    final-period stock is returned for each region.  Periods must be
    contiguous and values non-negative.
    """
    if not 0.0 <= depreciation < 1.0:
        raise ValueError("depreciation must lie in [0, 1)")
    by_region: dict[str, dict[int, float]] = {}
    for rec in series:
        slot = by_region.setdefault(rec.region_id, {})
        if rec.period in slot:
            raise ValueError(f"duplicate panel value for {rec.region_id!r} in {rec.period}")
        if not np.isfinite(rec.value) or rec.value < 0:
            raise ValueError(f"negative or non-finite value for {rec.region_id!r} in {rec.period}")
        slot[rec.period] = rec.value

    stocks: dict[str, float] = {}
    for rid, slot in by_region.items():
        periods = sorted(slot)
        if periods[-1] - periods[0] != len(periods) - 1:
            raise ValueError(f"panel periods for {rid!r} are not contiguous: {periods}")
        k = slot[periods[0]]
        for t in periods[1:]:
            k = (1.0 - depreciation) * k + slot[t]
        stocks[rid] = k
    return stocks


@dataclass
class DyadFrame:
    """Ordered origin-destination pairs with flow counts and dyad covariates.

    Own-region and own-country pairs are excluded by construction; in the
    default dense mode every admissible pair is present (zero flows
    included), which the count likelihood requires.
    """

    regions: RegionSet
    origin_index: np.ndarray
    dest_index: np.ndarray
    flow: np.ndarray
    dyad_covariates: np.ndarray     # N x p_D (p_D may be 0)
    dyad_names: list[str]
    dense: bool = True

    def __post_init__(self):
        self.origin_index = _frozen(np.asarray(self.origin_index, dtype=np.int64))
        self.dest_index = _frozen(np.asarray(self.dest_index, dtype=np.int64))
        self.flow = _frozen(np.asarray(self.flow, dtype=np.int64))
        self.dyad_covariates = _frozen(
            np.asarray(self.dyad_covariates, dtype=float).reshape(self.origin_index.size, -1)
        )
        cc = np.asarray(self.regions.country_codes, dtype=object)
        if np.any(self.origin_index == self.dest_index):
            raise ValueError("own-region dyads are not admissible")
        if np.any(cc[self.origin_index] == cc[self.dest_index]):
            raise ValueError("own-country dyads are not admissible")
        if np.any(self.flow < 0):
            raise ValueError("flows must be non-negative integers")
        keys = self.origin_index * self.regions.n + self.dest_index
        if np.unique(keys).size != keys.size:
            raise ValueError("duplicate ordered (origin, dest) pairs")
        if self.dyad_covariates.shape[1] != len(self.dyad_names):
            raise ValueError("dyad covariate width does not match dyad names")

    @property
    def n_dyads(self) -> int:
        return self.origin_index.size

    @property
    def p_d(self) -> int:
        return self.dyad_covariates.shape[1]

    def with_dyad_covariate(self, name: str, values: np.ndarray) -> "DyadFrame":
        """Return a new frame with one extra dyad covariate column."""
        if name in self.dyad_names:
            raise ValueError(f"dyad covariate {name!r} already present")
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_dyads,):
            raise ValueError("covariate length does not match dyad count")
        return DyadFrame(
            regions=self.regions,
            origin_index=self.origin_index,
            dest_index=self.dest_index,
            flow=self.flow,
            dyad_covariates=np.column_stack([self.dyad_covariates, values])
            if self.p_d else values.reshape(-1, 1),
            dyad_names=list(self.dyad_names) + [name],
            dense=self.dense,
        )


def admissible_pairs(regions: RegionSet):
    """All ordered cross-country pairs, sorted by (origin, dest) index."""
    cc = np.asarray(regions.country_codes, dtype=object)
    mask = cc[:, None] != cc[None, :]
    oi, di = np.nonzero(mask)
    return oi.astype(np.int64), di.astype(np.int64)


def dyad_distance_km(dyads: DyadFrame) -> np.ndarray:
    """Great-circle km between origin and destination centroids, per dyad."""
    r = dyads.regions
    return great_circle_km(r.lon[dyads.origin_index], r.lat[dyads.origin_index],
                           r.lon[dyads.dest_index], r.lat[dyads.dest_index])


def build_dyads(regions: RegionSet, flows, dense: bool = True) -> DyadFrame:
    """Expand a ``origin_id,dest_id,count`` flow CSV into a DyadFrame.

    In dense mode (default) every admissible ordered pair is present and
    pairs unlisted in the file carry flow zero.  Additional columns in the
    flow file are read as dyad covariates; dense mode then requires the file
    to cover every admissible pair, since covariates cannot be imputed.

    Rows for own-region or own-country pairs with nonzero flow are reported
    via a warning and dropped; zero-flow such rows are dropped silently.
    """
    index = {rid: i for i, rid in enumerate(regions.region_ids)}
    cc = regions.country_codes
    n = regions.n

    listed: dict[int, int] = {}
    listed_rows: dict[int, int] = {}
    cov_rows: dict[int, list[float]] = {}
    with open(flows, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"origin_id", "dest_id", "count"}.issubset(reader.fieldnames):
            raise ValueError(f"{flows}: expected columns origin_id,dest_id,count")
        extra_cols = [c for c in reader.fieldnames if c not in ("origin_id", "dest_id", "count")]
        for lineno, rec in enumerate(reader, start=2):
            for col in ("origin_id", "dest_id"):
                if rec[col] not in index:
                    raise ValueError(f"{flows}: row {lineno}: unknown region id {rec[col]!r}")
            o, d = index[rec["origin_id"]], index[rec["dest_id"]]
            try:
                raw = float(rec["count"])
            except ValueError:
                raise ValueError(f"{flows}: row {lineno}: cannot parse count {rec['count']!r}") from None
            if not np.isfinite(raw) or raw < 0 or raw != int(raw):
                raise ValueError(f"{flows}: row {lineno}: count must be a "
                                 f"non-negative integer, got {rec['count']!r}")
            count = int(raw)
            if o == d or cc[o] == cc[d]:
                if count > 0:
                    warnings.warn(
                        f"{flows}: row {lineno}: dropped inadmissible pair "
                        f"{rec['origin_id']}->{rec['dest_id']} with flow {count}"
                    )
                continue
            key = o * n + d
            if key in listed:
                raise ValueError(f"{flows}: rows {listed_rows[key]} and {lineno}: duplicate "
                                 f"pair {rec['origin_id']}->{rec['dest_id']}")
            listed[key] = count
            listed_rows[key] = lineno
            if extra_cols:
                try:
                    cov_rows[key] = [float(rec[c]) for c in extra_cols]
                except ValueError:
                    raise ValueError(f"{flows}: row {lineno}: cannot parse dyad covariate") from None

    if dense:
        oi, di = admissible_pairs(regions)
        if oi.size == 0:
            warnings.warn("no admissible dyads (fewer than two countries)")
        keys = oi * n + di
        flow = np.array([listed.get(int(k), 0) for k in keys], dtype=np.int64)
        if extra_cols:
            missing = [int(k) for k in keys if int(k) not in cov_rows]
            if missing:
                ex = [f"{regions.region_ids[k // n]}->{regions.region_ids[k % n]}"
                      for k in missing[:3]]
                raise ValueError(
                    f"{flows}: dyad covariates present but {len(missing)} admissible "
                    f"pairs are unlisted (e.g. {', '.join(ex)}); dense mode needs full coverage"
                )
            cov = np.array([cov_rows[int(k)] for k in keys], dtype=float)
        else:
            cov = np.empty((oi.size, 0))
    else:
        keys = np.array(sorted(listed), dtype=np.int64)
        oi, di = keys // n, keys % n
        flow = np.array([listed[int(k)] for k in keys], dtype=np.int64)
        if extra_cols:
            cov = np.array([cov_rows[int(k)] for k in keys], dtype=float)
        else:
            cov = np.empty((oi.size, 0))

    return DyadFrame(
        regions=regions,
        origin_index=oi,
        dest_index=di,
        flow=flow,
        dyad_covariates=cov.reshape(oi.size, len(extra_cols)),
        dyad_names=list(extra_cols),
        dense=dense,
    )


class TransformSpec:
    """Per-column log/level transform choices for region and dyad covariates.

    Unnamed columns stay in levels.  ``TransformSpec({"market_size": "log"})``.
    """

    def __init__(self, choices: dict[str, str] | None = None):
        self.choices = dict(choices or {})
        for col, kind in self.choices.items():
            if kind not in ("log", "level"):
                raise ValueError(f"transform for {col!r} must be 'log' or 'level', got {kind!r}")

    def apply(self, names: list[str], values: np.ndarray, what: str) -> np.ndarray:
        out = np.array(values, dtype=float)
        for j, name in enumerate(names):
            if self.choices.get(name, "level") == "log":
                col = out[..., j]
                if np.any(col <= 0):
                    bad = int(np.argmax(col <= 0))
                    raise ValueError(
                        f"log transform of {what} column {name!r} hit a non-positive "
                        f"value ({col[bad]}) at row {bad}"
                    )
                out[..., j] = np.log(col)
        return out


@dataclass
class DesignMatrices:
    """Stacked design Z plus the dyad-to-region index maps.

    ``origin_map``/``dest_map`` realize the origin and destination dummy
    matrices: row i of any region-level vector v expands to v[origin_map[i]].
    """

    Z: np.ndarray
    origin_map: np.ndarray
    dest_map: np.ndarray
    column_names: list[str]
    p_x: int
    p_d: int
    n_regions: int

    def __post_init__(self):
        self.Z = _frozen(np.asarray(self.Z, dtype=float))
        self.origin_map = _frozen(np.asarray(self.origin_map, dtype=np.int64))
        self.dest_map = _frozen(np.asarray(self.dest_map, dtype=np.int64))
        expect = 1 + 4 * self.p_x + self.p_d
        if self.Z.shape[1] != expect or len(self.column_names) != expect:
            raise ValueError("design width must equal 1 + 4*p_X + p_D")

    @property
    def n_dyads(self) -> int:
        return self.Z.shape[0]

    @property
    def P(self) -> int:
        return self.Z.shape[1]


def assemble_designs(regions: RegionSet, dyads: DyadFrame, system: SpatialSystem,
                     transforms: TransformSpec | None = None,
                     origin_system: SpatialSystem | None = None,
                     dest_system: SpatialSystem | None = None) -> DesignMatrices:
    """Build Z = [1, X_o, X_d, D, W_o X_o, W_d X_d] over the dyad set.

    Region covariates are transformed first, lagged at the region level
    (W @ X), and both are expanded to dyads through the origin/destination
    index maps.  One weight matrix serves origin lags, destination lags and
    the random effects unless distinct systems are passed.
    """
    for sys_ in (system, origin_system, dest_system):
        if sys_ is not None and sys_.region_ids != regions.region_ids:
            raise ValueError("spatial system was built on a different region set")
    if dyads.regions.region_ids != regions.region_ids:
        raise ValueError("dyad frame was built on a different region set")
    origin_system = origin_system or system
    dest_system = dest_system or system
    transforms = transforms or TransformSpec()

    x = transforms.apply(regions.covariate_names, regions.covariates, "region")
    d = transforms.apply(dyads.dyad_names, dyads.dyad_covariates, "dyad")
    lag_o = origin_system.W @ x
    lag_d = dest_system.W @ x

    om, dm = dyads.origin_index, dyads.dest_index
    blocks = [np.ones((dyads.n_dyads, 1)), x[om], x[dm], d, lag_o[om], lag_d[dm]]
    names = (["intercept"]
             + [f"origin:{c}" for c in regions.covariate_names]
             + [f"dest:{c}" for c in regions.covariate_names]
             + [f"dyad:{c}" for c in dyads.dyad_names]
             + [f"lag_origin:{c}" for c in regions.covariate_names]
             + [f"lag_dest:{c}" for c in regions.covariate_names])
    return DesignMatrices(
        Z=np.hstack(blocks),
        origin_map=om,
        dest_map=dm,
        column_names=names,
        p_x=regions.p_x,
        p_d=dyads.p_d,
        n_regions=regions.n,
    )


def write_regions_csv(regions: RegionSet, path) -> None:
    """Write a region table in the format :func:`load_regions` ingests."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_id", "country_code", "lon", "lat"] + regions.covariate_names)
        for i, rid in enumerate(regions.region_ids):
            writer.writerow([rid, regions.country_codes[i],
                             repr(float(regions.lon[i])), repr(float(regions.lat[i]))]
                            + [repr(float(v)) for v in regions.covariates[i]])


def write_flows_csv(dyads: DyadFrame, path) -> None:
    """Write flows (and any dyad covariates) in the ingestible format."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["origin_id", "dest_id", "count"] + dyads.dyad_names)
        ids = dyads.regions.region_ids
        for r in range(dyads.n_dyads):
            writer.writerow([ids[dyads.origin_index[r]], ids[dyads.dest_index[r]],
                             int(dyads.flow[r])]
                            + [repr(float(v)) for v in dyads.dyad_covariates[r]])
