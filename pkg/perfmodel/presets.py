"""
Registry of named topologies and workloads, filled from YAML at app start.
"""
import logging
from pathlib import Path

import yaml
from django.conf import settings
from django.core.exceptions import ImproperlyConfigured

from .exceptions import PresetNotFound
from .serializers import ModelSpecSerializer, TopologySerializer

logger = logging.getLogger("django")

TOPOLOGIES = {}
WORKLOADS = {}


def _load(path: Path, section: str, serializer_class, registry: dict) -> None:
    with open(path) as handle:
        document = yaml.safe_load(handle) or {}
    for name, fields in (document.get(section) or {}).items():
        data = dict(fields)
        if serializer_class is TopologySerializer:
            data.setdefault('name', name)
        serializer = serializer_class(data=data)
        if not serializer.is_valid():
            raise ImproperlyConfigured(f"preset {name!r} in {path}: {serializer.errors}")
        registry[name] = serializer.save()


def load_presets(directory) -> None:
    directory = Path(directory)
    TOPOLOGIES.clear()
    WORKLOADS.clear()
    _load(directory / 'topologies.yaml', 'topologies', TopologySerializer, TOPOLOGIES)
    _load(directory / 'workloads.yaml', 'workloads', ModelSpecSerializer, WORKLOADS)
    logger.info(f"loaded {len(TOPOLOGIES)} topologies and {len(WORKLOADS)} workloads from {directory}")


def get_topology(name: str = None):
    name = name or settings.PERF_DEFAULT_TOPOLOGY
    try:
        return TOPOLOGIES[name]
    except KeyError:
        raise PresetNotFound(f"unknown topology preset {name!r}, known: {sorted(TOPOLOGIES)}")


def get_workload(name: str):
    try:
        return WORKLOADS[name]
    except KeyError:
        raise PresetNotFound(f"unknown workload preset {name!r}, known: {sorted(WORKLOADS)}")
