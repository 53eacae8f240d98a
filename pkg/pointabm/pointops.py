"""
Point Operations Module

Geometric preprocessing that turns a raw point cloud into an ordered set of
localized patches: deduplication, subsampling, normalization, farthest point
sampling, k-NN grouping, center resorting and augmentation.

Design Decisions:
=================

1. Exact, deterministic geometry:
   - Squared distances are always computed by the same expression
     (dx*dx + dy*dy + dz*dz, summed left to right), so FPS and k-NN agree
     bit-for-bit with brute-force references
   - k-NN ties go to the lower point index (stable sort)
   - FPS ties go to the lower point index (first argmax)

2. Seeded randomness only:
   - The FPS first pick, subsampling and augmentation all draw from numpy
     Generators built from explicit seeds

3. Resorting:
   - Sequence order matters to the SSM stack, so the serialization strategy
     is a named, selectable choice (default: lexicographic on x, y, z)
"""

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np


@dataclass
class PointCloud:
    """An ordered list of 3D points with an optional class label."""
    points: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f'points must have shape (N, 3), got {self.points.shape}')
        if len(self.points) < 1:
            raise ValueError('a point cloud needs at least one point')
        if not np.all(np.isfinite(self.points)):
            raise ValueError('point coordinates must be finite')

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points: np.ndarray) -> 'PointCloud':
        return PointCloud(points, self.label)


@dataclass
class PatchSet:
    """
    Patch centers and their localized neighborhoods.

    `order` is the serialization permutation; `ordered_centers()` and
    `ordered_patches()` apply it.
    """
    centers: np.ndarray                 # (n, 3)
    patches: np.ndarray                 # (n, s, 3), relative to their center
    order: np.ndarray                   # permutation of range(n)
    center_indices: np.ndarray          # (n,) indices into the source cloud
    neighbor_indices: np.ndarray        # (n, s) indices into the source cloud

    @property
    def n(self) -> int:
        return len(self.centers)

    @property
    def s(self) -> int:
        return self.patches.shape[1]

    def ordered_centers(self) -> np.ndarray:
        return self.centers[self.order]

    def ordered_patches(self) -> np.ndarray:
        return self.patches[self.order]


@dataclass
class AugmentationSpec:
    """Which augmentations run, and their magnitudes."""
    scale: bool = False
    translate: bool = False
    rotate: bool = False
    scale_low: float = 2.0 / 3.0
    scale_high: float = 3.0 / 2.0
    translate_range: float = 0.2

    @property
    def enabled(self) -> bool:
        return self.scale or self.translate or self.rotate


def squared_distances(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance from every point to one center."""
    d = points - center
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def farthest_point_sample(cloud: PointCloud, n: int, seed: int,
                          first_index: Optional[int] = None) -> List[int]:
    """
    Greedy farthest point sampling.

    The first index is drawn uniformly from a Generator seeded with `seed`
    (or forced by `first_index`); each later pick maximizes the minimum
    squared distance to the points already chosen.

    Raises:
        ValueError: if n is not within [1, N]
    """
    total = len(cloud)
    if not 1 <= n <= total:
        raise ValueError(f'cannot sample {n} centers from {total} points')
    points = cloud.points
    if first_index is None:
        first_index = int(np.random.default_rng(seed).integers(total))
    chosen = [first_index]
    nearest = squared_distances(points, points[first_index])
    # chosen points never win again, even when the rest coincide with them
    nearest[first_index] = -1.0
    for _ in range(n - 1):
        pick = int(np.argmax(nearest))
        chosen.append(pick)
        nearest = np.minimum(nearest, squared_distances(points, points[pick]))
        nearest[chosen] = -1.0
    return chosen


def knn_group(cloud: PointCloud, center_indices, s: int) -> PatchSet:
    """
    Group the s nearest points around each center, localized to the center.

    Raises:
        ValueError: if s > N
    """
    total = len(cloud)
    if not 1 <= s <= total:
        raise ValueError(f'cannot group {s} neighbors from {total} points')
    center_indices = np.asarray(center_indices, dtype=np.int64)
    points = cloud.points
    centers = points[center_indices]
    neighbors = np.empty((len(center_indices), s), dtype=np.int64)
    for row, center in enumerate(centers):
        neighbors[row] = np.argsort(squared_distances(points, center), kind='stable')[:s]
    patches = points[neighbors] - centers[:, None, :]
    return PatchSet(
        centers=centers,
        patches=patches,
        order=np.arange(len(center_indices)),
        center_indices=center_indices,
        neighbor_indices=neighbors,
    )


def _lexicographic(axes: tuple) -> Callable[[np.ndarray], np.ndarray]:
    def strategy(centers: np.ndarray) -> np.ndarray:
        keys = [np.arange(len(centers))] + [centers[:, a] for a in reversed(axes)]
        return np.lexsort(keys)
    return strategy


SERIALIZATION_STRATEGIES: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    'xyz': _lexicographic((0, 1, 2)),
    'yzx': _lexicographic((1, 2, 0)),
    'zxy': _lexicographic((2, 0, 1)),
    'fps': lambda centers: np.arange(len(centers)),
}


def serialize_order(centers: np.ndarray, strategy: str = 'xyz') -> np.ndarray:
    """
    Total order over patch centers.

    The default sorts lexicographically on (x, y, z) with the original index
    as the final tie-break.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if not np.all(np.isfinite(centers)):
        raise ValueError('centers must be finite')
    try:
        return SERIALIZATION_STRATEGIES[strategy](centers)
    except KeyError:
        raise ValueError(
            f'unknown serialization strategy {strategy!r}; '
            f'expected one of {", ".join(SERIALIZATION_STRATEGIES)}'
        ) from None


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale the farthest point to unit norm."""
    centered = cloud.points - cloud.points.mean(axis=0)
    radius = np.sqrt((centered * centered).sum(axis=1)).max()
    if radius > 0:
        centered = centered / radius
    return cloud.with_points(centered)


def unique_points(cloud: PointCloud) -> PointCloud:
    """Drop exact duplicate points, keeping first occurrences in order."""
    _, first = np.unique(cloud.points, axis=0, return_index=True)
    if len(first) == len(cloud):
        return cloud
    return cloud.with_points(cloud.points[np.sort(first)])


def subsample(cloud: PointCloud, m: int, rng: np.random.Generator) -> PointCloud:
    """Keep m points chosen without replacement (source order preserved)."""
    if m >= len(cloud):
        return cloud
    keep = np.sort(rng.choice(len(cloud), size=m, replace=False))
    return cloud.with_points(cloud.points[keep])


def rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the gravity (z) axis."""
    c, s = math.cos(angle), math.sin(angle)
    rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return points @ rotation.T


def augment(cloud: PointCloud, spec: AugmentationSpec, rng: np.random.Generator) -> PointCloud:
    """
    Apply the enabled augmentations in a fixed order: rotate, scale, translate.

    The label is preserved. Disabled augmentations draw nothing from rng.
    """
    points = cloud.points
    if spec.rotate:
        points = rotate_z(points, rng.uniform(0.0, 2.0 * math.pi))
    if spec.scale:
        points = points * rng.uniform(spec.scale_low, spec.scale_high)
    if spec.translate:
        points = points + rng.uniform(-spec.translate_range, spec.translate_range, size=3)
    if points is cloud.points:
        return cloud
    return cloud.with_points(points)


def patchify(cloud: PointCloud, n_patches: int, patch_size: int, seed: int,
             points_per_cloud: Optional[int] = None, strategy: str = 'xyz') -> PatchSet:
    """
    Full front-half pipeline: dedupe -> subsample -> normalize -> FPS -> k-NN -> resort.

    Raises:
        ValueError: if fewer than n_patches distinct points remain
    """
    cloud = unique_points(cloud)
    if points_per_cloud is not None:
        cloud = subsample(cloud, points_per_cloud, np.random.default_rng([seed, 1]))
    if len(cloud) < n_patches:
        raise ValueError(f'cloud has {len(cloud)} distinct points, need at least {n_patches}')
    cloud = normalize_cloud(cloud)
    centers = farthest_point_sample(cloud, n_patches, seed)
    patch_set = knn_group(cloud, centers, patch_size)
    patch_set.order = serialize_order(patch_set.centers, strategy)
    return patch_set
