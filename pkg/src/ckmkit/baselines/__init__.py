"""Comparison methods: free-space loss, point-cloud ray tracing, kriging."""

from .kriging import (  # noqa: F401
    VariogramModel,
    empirical_semivariogram,
    fit_variogram,
    krige,
    krige_map,
    solve_weights,
)
from .raytrace import (  # noqa: F401
    MaterialProps,
    MaterialTable,
    TraceConfig,
    fspl_db,
    los_gain,
    trace_pdp,
)
