"""Integrated data view: persistent task store, query engine and integrator."""

from provmesh.store.query import BadQuery, QuerySpec, execute
from provmesh.store.taskstore import (
    CampaignConfig,
    LineageGraph,
    StoreError,
    StoreIO,
    StoreUnavailable,
    TaskStore,
    UnknownCampaign,
    UnknownTask,
)

__all__ = [
    "BadQuery",
    "CampaignConfig",
    "LineageGraph",
    "QuerySpec",
    "StoreError",
    "StoreIO",
    "StoreUnavailable",
    "TaskStore",
    "UnknownCampaign",
    "UnknownTask",
    "execute",
]
