"""Industry-structure analytics: concentration indices, diversity scores and
small weighted regressions used to relate them to surplus density."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import betainc

from .errors import InvalidInputError

__all__ = [
    "FirmTable",
    "RegressionReport",
    "SectorAssociation",
    "rca",
    "diversity",
    "diversity_by_zone",
    "least_squares",
    "sector_association",
    "student_t_two_sided_p",
]


@dataclass(frozen=True, eq=False)
class FirmTable:
    """Firm counts cross-classified by zone and industry code.

    Industry codes are strings, all at the same digit level (2 or 4).
    Marginals are exposed as :meth:`zone_totals`, :meth:`industry_totals`
    and :attr:`total`.
    """

    zone_ids: tuple
    industry_codes: tuple
    counts: np.ndarray

    def __post_init__(self):
        zone_ids = tuple(self.zone_ids)
        codes = tuple(str(c) for c in self.industry_codes)
        if len(set(zone_ids)) != len(zone_ids):
            raise InvalidInputError("zone ids must be unique")
        if len(set(codes)) != len(codes):
            raise InvalidInputError("industry codes must be unique")
        lengths = {len(c) for c in codes}
        if codes and lengths not in ({2}, {4}):
            raise InvalidInputError(f"industry codes must all be 2- or 4-digit, got lengths {sorted(lengths)}")
        counts = np.asarray(self.counts)
        if counts.shape != (len(zone_ids), len(codes)):
            raise InvalidInputError(
                f"counts shape {counts.shape} does not match {len(zone_ids)} zones x {len(codes)} industries"
            )
        if not np.issubdtype(counts.dtype, np.integer):
            as_int = counts.astype(np.int64)
            if not np.array_equal(as_int, counts):
                raise InvalidInputError("firm counts must be integers")
            counts = as_int
        if (counts < 0).any():
            raise InvalidInputError("firm counts must be >= 0")
        counts = np.ascontiguousarray(counts, dtype=np.int64)
        counts.flags.writeable = False
        object.__setattr__(self, "zone_ids", zone_ids)
        object.__setattr__(self, "industry_codes", codes)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_records(cls, records) -> "FirmTable":
        """Build from ``(zone_id, industry_code, count)`` triples.

        Zones and industries are ordered by first appearance; repeated
        (zone, industry) pairs accumulate.
        """
        zones: list = []
        codes: list = []
        zone_pos: dict = {}
        code_pos: dict = {}
        triples = []
        for zone_id, code, count in records:
            code = str(code)
            if zone_id not in zone_pos:
                zone_pos[zone_id] = len(zones)
                zones.append(zone_id)
            if code not in code_pos:
                code_pos[code] = len(codes)
                codes.append(code)
            triples.append((zone_pos[zone_id], code_pos[code], int(count)))
        counts = np.zeros((len(zones), len(codes)), dtype=np.int64)
        for zi, ci, c in triples:
            counts[zi, ci] += c
        return cls(zone_ids=tuple(zones), industry_codes=tuple(codes), counts=counts)

    @property
    def n_zones(self) -> int:
        return len(self.zone_ids)

    @property
    def n_industries(self) -> int:
        return len(self.industry_codes)

    @property
    def level(self) -> int:
        """Digit level of the industry codes (2 or 4)."""
        if not self.industry_codes:
            return 0
        return len(self.industry_codes[0])

    def zone_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def industry_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def zone_index(self, zone_id) -> int:
        try:
            return self.zone_ids.index(zone_id)
        except ValueError:
            raise InvalidInputError(f"unknown zone id {zone_id!r}") from None

    def aggregate_to_level(self, level: int) -> "FirmTable":
        """Collapse industry codes to their leading ``level`` digits."""
        if level not in (2, 4):
            raise InvalidInputError(f"digit level must be 2 or 4, got {level}")
        if level == self.level:
            return self
        if level > self.level:
            raise InvalidInputError(f"cannot refine {self.level}-digit codes to {level} digits")
        new_codes: list = []
        pos: dict = {}
        for code in self.industry_codes:
            short = code[:level]
            if short not in pos:
                pos[short] = len(new_codes)
                new_codes.append(short)
        counts = np.zeros((self.n_zones, len(new_codes)), dtype=np.int64)
        for j, code in enumerate(self.industry_codes):
            counts[:, pos[code[:level]]] += self.counts[:, j]
        return FirmTable(zone_ids=self.zone_ids, industry_codes=tuple(new_codes), counts=counts)

    def restrict_industries(self, codes) -> "FirmTable":
        wanted = {str(c) for c in codes}
        keep = [j for j, c in enumerate(self.industry_codes) if c in wanted]
        return FirmTable(
            zone_ids=self.zone_ids,
            industry_codes=tuple(self.industry_codes[j] for j in keep),
            counts=self.counts[:, keep],
        )


def rca(t: FirmTable) -> np.ndarray:
    """Balassa concentration index per (zone, industry).

    ``rca[c, i] = (count(c, i) / zone_total(c)) / (industry_total(i) / total)``
    computed as a single division to keep simple ratios exact. Values above
    one mean the industry is more concentrated in that zone than in the
    region as a whole. Zones with no firms get NaN rows (undefined, flagged
    by the caller via ``zone_totals() == 0``).
    """
    if t.total == 0:
        raise InvalidInputError("firm table is empty; concentration is undefined")
    zone_tot = t.zone_totals().astype(float)
    ind_tot = t.industry_totals().astype(float)
    denom = np.outer(zone_tot, ind_tot)
    numer = t.counts.astype(float) * float(t.total)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = numer / denom
    out[zone_tot == 0, :] = np.nan
    out[:, ind_tot == 0] = np.nan
    return out


def diversity(t: FirmTable, zone_id) -> int:
    """Number of distinct industries with at least one firm in the zone."""
    zi = t.zone_index(zone_id)
    return int(np.count_nonzero(t.counts[zi] > 0))


def diversity_by_zone(t: FirmTable) -> dict:
    """Diversity score for every zone in the table."""
    present = (t.counts > 0).sum(axis=1)
    return {zid: int(n) for zid, n in zip(t.zone_ids, present)}


def student_t_two_sided_p(t_stat: float, dof: int) -> float:
    """Two-sided Student-t p-value via the regularised incomplete beta
    function: ``p = I_{dof/(dof+t^2)}(dof/2, 1/2)``."""
    if dof < 1:
        raise InvalidInputError(f"degrees of freedom must be >= 1, got {dof}")
    if math.isnan(t_stat):
        return float("nan")
    if math.isinf(t_stat):
        return 0.0
    x = dof / (dof + t_stat * t_stat)
    return float(betainc(dof / 2.0, 0.5, x))


@dataclass(frozen=True)
class RegressionReport:
    """Simple (weighted) least-squares line fit with inference on the slope."""

    slope: float
    intercept: float
    stderr_slope: float
    t_stat: float
    p_value: float
    r_squared: float
    n: int
    weighted: bool


def least_squares(x, y, weights=None) -> RegressionReport:
    """Fit ``y = intercept + slope * x`` by (weighted) least squares.

    Parameters
    ----------
    x, y : array-like
        Per-zone covariate and response.
    weights : array-like, optional
        Non-negative case weights (e.g. firm counts per zone). Zero-weight
        observations are dropped; ``None`` means ordinary least squares.

    Returns
    -------
    RegressionReport
        The t statistic is slope over its standard error on ``n - 2``
        degrees of freedom; the p-value is two-sided.

    Raises
    ------
    InvalidInputError
        Fewer than 3 positive-weight observations, or constant ``x``.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise InvalidInputError("x and y must have the same length")
    weighted = weights is not None
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.shape != x.shape:
        raise InvalidInputError("weights must have the same length as x")
    if not np.isfinite(x).all() or not np.isfinite(y).all() or not np.isfinite(w).all():
        raise InvalidInputError("regression inputs must be finite")
    if (w < 0).any():
        raise InvalidInputError("weights must be >= 0")
    keep = w > 0
    x, y, w = x[keep], y[keep], w[keep]
    n = x.size
    if n < 3:
        raise InvalidInputError(f"need at least 3 positive-weight observations, got {n}")

    w_sum = w.sum()
    x_bar = float((w * x).sum() / w_sum)
    y_bar = float((w * y).sum() / w_sum)
    dx = x - x_bar
    dy = y - y_bar
    sxx = float((w * dx * dx).sum())
    if sxx == 0.0:
        raise InvalidInputError("x is constant; the slope is unidentified")
    sxy = float((w * dx * dy).sum())
    syy = float((w * dy * dy).sum())

    slope = sxy / sxx
    intercept = y_bar - slope * x_bar
    ssr = max(syy - slope * sxy, 0.0)
    dof = n - 2
    sigma2 = ssr / dof
    stderr = math.sqrt(sigma2 / sxx)
    if stderr == 0.0:
        t_stat = math.inf if slope > 0 else (-math.inf if slope < 0 else 0.0)
    else:
        t_stat = slope / stderr
    p = student_t_two_sided_p(t_stat, dof)
    r2 = 1.0 - ssr / syy if syy > 0 else 1.0
    return RegressionReport(
        slope=slope,
        intercept=intercept,
        stderr_slope=stderr,
        t_stat=t_stat,
        p_value=p,
        r_squared=r2,
        n=n,
        weighted=weighted,
    )


@dataclass(frozen=True, eq=False)
class SectorAssociation:
    """Per-industry regressions of zone surplus means on concentration.

    ``results`` is ``[(industry_code, RegressionReport), ...]`` ranked by
    descending slope; ``skipped`` lists ``(industry_code, reason)`` for
    industries that could not be fitted.
    """

    level: int
    results: tuple
    skipped: tuple

    def top_bottom(self, k: int) -> tuple[list, list]:
        """The ``k`` most positive and ``k`` most negative slopes."""
        return list(self.results[:k]), list(self.results[-k:])


def sector_association(
    t: FirmTable,
    delta_means: Mapping,
    level: int = 2,
    min_support: int = 3,
) -> SectorAssociation:
    """Relate industry concentration to surplus density, industry by industry.

    For each industry at the requested digit level, regress the per-zone
    surplus mean on the industry's concentration index across zones, weighted
    by total firms per zone. Industries present in fewer than ``min_support``
    zones are skipped, as are ones whose concentration is constant across the
    usable zones; skips carry a reason.
    """
    table = t.aggregate_to_level(level)
    conc = rca(table)
    zone_tot = table.zone_totals().astype(float)

    usable = np.array([zid in delta_means for zid in table.zone_ids])
    usable &= zone_tot > 0
    dm = np.array([float(delta_means[zid]) if ok else np.nan for zid, ok in zip(table.zone_ids, usable)])

    fitted = []
    skipped = []
    for j, code in enumerate(table.industry_codes):
        support = int(np.count_nonzero(table.counts[usable, j] > 0))
        if support < min_support:
            skipped.append((code, f"present in {support} zones (need {min_support})"))
            continue
        xs = conc[usable, j]
        try:
            report = least_squares(xs, dm[usable], weights=zone_tot[usable])
        except InvalidInputError as exc:
            skipped.append((code, str(exc)))
            continue
        fitted.append((code, report))
    fitted.sort(key=lambda item: -item[1].slope)
    return SectorAssociation(level=level, results=tuple(fitted), skipped=tuple(skipped))
