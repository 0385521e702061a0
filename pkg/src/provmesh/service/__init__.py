"""Query surface: HTTP API, CLI and integrated analyses."""

from provmesh.service.analysis import (
    CorrelationMatrix,
    LineageReport,
    MetricAbsent,
    correlation_matrix,
    lineage_report,
    pearson,
)

__all__ = [
    "CorrelationMatrix",
    "LineageReport",
    "MetricAbsent",
    "correlation_matrix",
    "lineage_report",
    "pearson",
]
