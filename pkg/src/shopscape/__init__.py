"""Spatial statistics for street-level commercial activity.

Turn geo-referenced firm locations into gridded density fields, test them
for significant clustering with local Moran statistics, compare populations
(visible vs registered firms), relate the surplus to industry structure and
zoning, and plan street-level surveys. See the README for a tour; the
``demos/`` scripts walk through each capability on synthetic data.
"""

__version__ = "0.1.0"

from .compare import RadialProfile, ZoneMeans, delta_density, radial_profile, zone_mean
from .density import (
    GridField,
    TopShare,
    coefficient_of_variation,
    kde,
    rasterize_counts,
    top_share,
)
from .econ import (
    FirmTable,
    RegressionReport,
    SectorAssociation,
    diversity,
    diversity_by_zone,
    least_squares,
    rca,
    sector_association,
)
from .errors import (
    DegenerateInputError,
    InvalidInputError,
    ParseError,
    PipelineStageError,
    ShopscapeError,
)
from .geometry import (
    GridSpec,
    Point,
    PointSet,
    Polygon,
    Zone,
    ZoneMap,
    assign_zones,
    build_grid,
    lonlat_to_local,
    point_in_polygon,
    point_to_cell,
    points_to_cells,
)
from .landuse import StratumAdherence, nonadherence_by_stratum, nonadherence_vs_distance
from .lisa import (
    Cluster,
    ClusterSet,
    Dendrogram,
    LisaResult,
    SpatialWeights,
    build_dendrogram,
    build_weights,
    extract_clusters,
    local_moran,
)
from .survey import (
    CountMetrics,
    DetectorEval,
    OmissionRobustness,
    StreetEdge,
    StreetNetwork,
    count_metrics,
    omission_robustness,
    plan_sample_points,
)
from .io import (
    BlobSpec,
    Dataset,
    SyntheticCityConfig,
    filter_commercial,
    generate_synthetic_city,
    load_field,
    load_firm_table,
    load_network,
    load_points,
    load_street_commerce_codes,
    load_zones,
    run_pipeline,
    save_dataset,
    save_field,
    save_firm_table,
    save_points,
    save_zones,
)
