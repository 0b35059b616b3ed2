"""Clustered synthetic dataset generator for desk-scale experiments."""

from __future__ import annotations

import numpy as np

from lshpipe.dataio import VectorSet

BOX = 256.0  # cluster centers are drawn uniformly from [0, BOX)^d


def gen_synthetic(
    seed: int,
    n_points: int,
    d: int,
    n_clusters: int,
    spread: float,
    n_queries: int = 1000,
    query_noise: float | None = None,
) -> tuple[VectorSet, VectorSet]:
    """Reference and query sets with Gaussian clusters in a fixed box.

    Queries are perturbed copies of reference points (standing in for the
    distorted-image query workloads of the public SIFT benchmarks); the
    perturbation deviation defaults to half the cluster spread.
    """
    if n_clusters < 1:
        raise ValueError(f"n_clusters must be >= 1, got {n_clusters}")
    if not spread > 0:
        raise ValueError(f"spread must be positive, got {spread}")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, BOX, size=(n_clusters, d))
    assign = rng.integers(0, n_clusters, size=n_points)
    points = centers[assign] + rng.normal(0.0, spread, size=(n_points, d))
    reference = VectorSet.from_coords(points.astype(np.float32))

    noise = spread / 2 if query_noise is None else query_noise
    picks = rng.integers(0, n_points, size=n_queries)
    queries = reference.coords[picks].astype(np.float64) + rng.normal(0.0, noise, size=(n_queries, d))
    return reference, VectorSet.from_coords(queries.astype(np.float32))
