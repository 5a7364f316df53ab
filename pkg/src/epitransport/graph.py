"""Geospatial diffusion graph built from region centroids."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EARTH_RADIUS_KM = 6371.0


class GraphError(ValueError):
    """Raised for invalid coordinates or degenerate region graphs."""


def _check_coord(lat: float, lon: float) -> None:
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise GraphError(f"coordinate out of range: lat={lat}, lon={lon}")
    if math.isnan(lat) or math.isnan(lon):
        raise GraphError("coordinate is NaN")


def haversine(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in km between two (lat, lon) points given in degrees."""
    _check_coord(*a)
    _check_coord(*b)
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    h = (
        math.sin((lat2 - lat1) / 2) ** 2
        + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    )
    # clamp guards sqrt against rounding just above 1 for antipodal points
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(min(1.0, h)))


def haversine_matrix(centroids: np.ndarray) -> np.ndarray:
    """Pairwise haversine distances (km) for an (N, 2) array of lat/lon degrees."""
    centroids = np.asarray(centroids, dtype=np.float64)
    for lat, lon in centroids:
        _check_coord(lat, lon)
    lat = np.radians(centroids[:, 0])[:, None]
    lon = np.radians(centroids[:, 1])[:, None]
    h = (
        np.sin((lat.T - lat) / 2) ** 2
        + np.cos(lat) * np.cos(lat.T) * np.sin((lon.T - lon) / 2) ** 2
    )
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    # exact symmetry regardless of rounding order
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


@dataclass(frozen=True)
class RegionGraph:
    region_ids: tuple
    centroids: np.ndarray
    dist_km: np.ndarray
    weights: np.ndarray
    laplacian_norm: np.ndarray
    laplacian_comb: np.ndarray

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)

    def index_of(self, region_id) -> int:
        return self.region_ids.index(region_id)


def build_region_graph(centroids, region_ids=None) -> RegionGraph:
    """Build the inverse-distance diffusion graph and its Laplacians.

    ``weights[i, j] = 1 / dist_km[i, j]`` off the diagonal. The normalized
    Laplacian is ``I - D^{-1/2} W D^{-1/2}`` and the combinatorial one
    ``D - W``, with ``D`` the weighted degree.
    """
    c = np.asarray(centroids, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 2:
        raise GraphError(f"centroids must have shape (N, 2), got {c.shape}")
    return graph_from_distances(haversine_matrix(c), region_ids, c)


def graph_from_distances(dist_km, region_ids=None, centroids=None) -> RegionGraph:
    """Build a :class:`RegionGraph` from a given symmetric distance matrix.

    Lets tests and callers supply distances that no set of centroids can
    realise. ``centroids`` defaults to NaN placeholders.
    """
    dist = np.array(dist_km, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise GraphError(f"distance matrix must be square, got {dist.shape}")
    n = dist.shape[0]
    if n < 2:
        raise GraphError("a region graph needs at least 2 regions")
    if region_ids is None:
        region_ids = tuple(range(n))
    region_ids = tuple(region_ids)
    if len(region_ids) != n:
        raise GraphError("region_ids length does not match the number of regions")
    if not np.allclose(dist, dist.T, rtol=0, atol=1e-9) or np.any(np.diag(dist) != 0):
        raise GraphError("distance matrix must be symmetric with a zero diagonal")
    c = np.full((n, 2), np.nan) if centroids is None else np.array(centroids, dtype=np.float64)

    off = ~np.eye(n, dtype=bool)
    if np.any(dist[off] <= 0.0):
        i, j = np.argwhere((dist <= 0.0) & off)[0]
        raise GraphError(
            f"degenerate graph: regions {region_ids[i]!r} and {region_ids[j]!r} share a centroid"
        )

    w = np.zeros_like(dist)
    w[off] = 1.0 / dist[off]
    deg = w.sum(axis=1)
    lap_comb = np.diag(deg) - w
    inv_sqrt = 1.0 / np.sqrt(deg)
    lap_norm = np.eye(n) - inv_sqrt[:, None] * w * inv_sqrt[None, :]

    for arr in (c, dist, w, lap_norm, lap_comb):
        arr.setflags(write=False)
    return RegionGraph(region_ids, c, dist, w, lap_norm, lap_comb)


def read_centroids(path) -> tuple[list[str], np.ndarray]:
    """Read a ``region_id,lat,lon`` CSV. File order defines region index order."""
    ids, coords = [], []
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"region_id", "lat", "lon"} - set(reader.fieldnames or [])
        if missing:
            raise GraphError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            rid = row["region_id"].strip()
            if rid in ids:
                raise GraphError(f"{path}: duplicate region_id {rid!r}")
            ids.append(rid)
            coords.append((float(row["lat"]), float(row["lon"])))
    return ids, np.array(coords, dtype=np.float64).reshape(-1, 2)


def write_centroids(path, region_ids, centroids) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region_id", "lat", "lon"])
        for rid, (lat, lon) in zip(region_ids, np.asarray(centroids)):
            writer.writerow([rid, repr(float(lat)), repr(float(lon))])


def load_region_graph(path) -> RegionGraph:
    ids, coords = read_centroids(path)
    return build_region_graph(coords, ids)
