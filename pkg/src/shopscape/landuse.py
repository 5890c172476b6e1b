"""Zoning-adherence analytics.

Non-adherence is the share of firms sitting outside commercial or mixed-use
land. The operations are population-agnostic: run them on visible,
registered or registered-commercial point sets alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compare import RadialProfile, bin_means, min_center_distance
from .geometry import PointSet, ZoneMap, assign_zones

__all__ = [
    "StratumAdherence",
    "nonadherence_by_stratum",
    "nonadherence_vs_distance",
]

COMMERCIAL_MIXED = "commercial_mixed"


@dataclass(frozen=True, eq=False)
class StratumAdherence:
    """Per-stratum non-adherence rates.

    ``rate[s]`` is ``1 - (firms of stratum s on commercial/mixed land) /
    (firms of stratum s)``, weight-based; ``None`` where the stratum holds no
    firms. Firms outside every stratum zone are excluded from the per-stratum
    rates but reported on the ``unzoned`` row.
    """

    rate: dict
    firm_weight: dict
    unzoned_weight: float
    unzoned_rate: float | None
    overall_rate: float | None


def _firm_flags(firms: PointSet, zones: ZoneMap):
    """Per-firm stratum (or None) and commercial/mixed membership."""
    assignment = assign_zones(firms, zones)
    strata = np.full(len(firms), -1, dtype=int)
    adherent = np.zeros(len(firms), dtype=bool)
    for k, zi in enumerate(assignment.zone_index):
        if zi < 0:
            continue
        zone = zones.zones[zi]
        if zone.stratum is not None:
            strata[k] = zone.stratum
        adherent[k] = zone.land_use == COMMERCIAL_MIXED
    return strata, adherent


def nonadherence_by_stratum(firms: PointSet, zones: ZoneMap) -> StratumAdherence:
    """Non-adherence to commercial/mixed zoning, broken out by stratum.

    A firm adheres when its containing zone is commercial/mixed-use land;
    its stratum comes from the same zone. In the Medellin case study
    visible-firm non-adherence sat between 30% and 50% in every one of the
    six strata, peaking in the richest.
    """
    strata, adherent = _firm_flags(firms, zones)
    w = firms.weight

    rates: dict = {}
    masses: dict = {}
    for s in range(1, 7):
        mask = strata == s
        total = float(w[mask].sum())
        masses[s] = total
        rates[s] = (1.0 - float(w[mask & adherent].sum()) / total) if total > 0 else None

    unzoned = strata < 0
    unzoned_weight = float(w[unzoned].sum())
    unzoned_rate = (
        (1.0 - float(w[unzoned & adherent].sum()) / unzoned_weight) if unzoned_weight > 0 else None
    )
    zoned_weight = float(w[~unzoned].sum())
    overall = (1.0 - float(w[~unzoned & adherent].sum()) / zoned_weight) if zoned_weight > 0 else None
    return StratumAdherence(
        rate=rates,
        firm_weight=masses,
        unzoned_weight=unzoned_weight,
        unzoned_rate=unzoned_rate,
        overall_rate=overall,
    )


def nonadherence_vs_distance(
    firms: PointSet,
    zones: ZoneMap,
    centers,
    bin_width: float = 250.0,
    max_dist: float = 10_000.0,
) -> RadialProfile:
    """Non-adherence rate by distance to the nearest reference centre.

    Firms are binned by distance to the closest centre (cluster centroids,
    typically); each bin reports the weight share of firms outside
    commercial/mixed land. Firms contained in no zone count as non-adherent,
    since they are certainly not on commercial/mixed land. Empty bins are
    flagged, not zeroed. The Medellin profile of visible firms against
    formal-cluster centres peaks around 2 km out.
    """
    _, adherent = _firm_flags(firms, zones)
    dist = min_center_distance(firms.x, firms.y, centers)
    w = firms.weight
    total = bin_means(dist, w, bin_width, max_dist)
    off = bin_means(dist, w * ~adherent, bin_width, max_dist)
    with np.errstate(invalid="ignore", divide="ignore"):
        rate = np.where(total.count > 0, off.mean / total.mean, np.nan)
    # bins whose firm weight is all zero have an undefined rate
    rate[np.asarray(total.mean) == 0.0] = np.nan
    return RadialProfile(edges=total.edges, mean=rate, count=total.count)
