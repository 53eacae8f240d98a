"""
Data Module

Synthetic shape generation, XYZ text I/O, labelled manifests and datasets.

File Formats:
=============

XYZ: UTF-8 text, one point per line as three decimal floats separated by
single spaces, '\\n' line endings. Lines starting with '#' are ignored.

Manifest: one "relative/path.xyz<TAB>class_name" per line, paths relative
to the manifest's directory. Class ids follow first appearance in the
manifest unless class names are given explicitly.

Design Decisions:
=================

1. Every sample carries its own seed, spawned from the split seed with
   numpy's SeedSequence, so generation is order-independent and two calls
   with equal seeds produce identical datasets.

2. The train/test split is stratified: each class contributes
   floor(n_per_class * train_fraction) samples to train, the rest to test.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from pointabm.pointops import PointCloud

logger = logging.getLogger(__name__)


SHAPE_KINDS = ('sphere', 'cube', 'torus', 'cylinder', 'cone', 'plane')
MIN_POINTS = 8

TORUS_MAJOR = 0.5
TORUS_MINOR = 0.2
CYLINDER_RADIUS = 0.5
CYLINDER_HEIGHT = 1.0
CONE_RADIUS = 0.5
CONE_HEIGHT = 1.0


class DataFormatError(ValueError):
    """A malformed XYZ file or manifest."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        location = ''
        if path is not None:
            location = f'{path}:{line}: ' if line is not None else f'{path}: '
        elif line is not None:
            location = f'line {line}: '
        super().__init__(f'{location}{message}')
        self.path = path
        self.line = line


# Shape sampling

def _sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(n: int, rng: np.random.Generator) -> np.ndarray:
    points = rng.uniform(-0.5, 0.5, size=(n, 3))
    faces = rng.integers(6, size=n)
    axis, sign = faces // 2, np.where(faces % 2 == 0, -0.5, 0.5)
    points[np.arange(n), axis] = sign
    return points


def _torus(n: int, rng: np.random.Generator) -> np.ndarray:
    # area element of the tube angle is proportional to R + r cos(v)
    angles: List[np.ndarray] = []
    have = 0
    while have < n:
        v = rng.uniform(0.0, 2.0 * math.pi, size=2 * n)
        accept = rng.uniform(0.0, TORUS_MAJOR + TORUS_MINOR, size=2 * n) < TORUS_MAJOR + TORUS_MINOR * np.cos(v)
        angles.append(v[accept])
        have += int(accept.sum())
    v = np.concatenate(angles)[:n]
    u = rng.uniform(0.0, 2.0 * math.pi, size=n)
    ring = TORUS_MAJOR + TORUS_MINOR * np.cos(v)
    return np.column_stack([ring * np.cos(u), ring * np.sin(u), TORUS_MINOR * np.sin(v)])


def _disk(n: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(size=n))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def _cylinder(n: int, rng: np.random.Generator) -> np.ndarray:
    side = 2.0 * math.pi * CYLINDER_RADIUS * CYLINDER_HEIGHT
    cap = math.pi * CYLINDER_RADIUS ** 2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    points = np.empty((n, 3))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    points[:, 0] = CYLINDER_RADIUS * np.cos(theta)
    points[:, 1] = CYLINDER_RADIUS * np.sin(theta)
    points[:, 2] = rng.uniform(-CYLINDER_HEIGHT / 2, CYLINDER_HEIGHT / 2, size=n)
    for which, z in ((1, -CYLINDER_HEIGHT / 2), (2, CYLINDER_HEIGHT / 2)):
        rows = part == which
        points[rows, :2] = _disk(int(rows.sum()), CYLINDER_RADIUS, rng)
        points[rows, 2] = z
    return points


def _cone(n: int, rng: np.random.Generator) -> np.ndarray:
    slant = math.hypot(CONE_RADIUS, CONE_HEIGHT)
    lateral = math.pi * CONE_RADIUS * slant
    base = math.pi * CONE_RADIUS ** 2
    on_base = rng.uniform(size=n) < base / (lateral + base)
    points = np.empty((n, 3))
    # lateral area grows linearly with distance from the apex
    t = np.sqrt(rng.uniform(size=n))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    points[:, 0] = CONE_RADIUS * t * np.cos(theta)
    points[:, 1] = CONE_RADIUS * t * np.sin(theta)
    points[:, 2] = CONE_HEIGHT / 2 - CONE_HEIGHT * t
    points[on_base, :2] = _disk(int(on_base.sum()), CONE_RADIUS, rng)
    points[on_base, 2] = -CONE_HEIGHT / 2
    return points


def _plane(n: int, rng: np.random.Generator) -> np.ndarray:
    points = np.zeros((n, 3))
    points[:, :2] = rng.uniform(-0.5, 0.5, size=(n, 2))
    return points


_SAMPLERS = {
    'sphere': _sphere,
    'cube': _cube,
    'torus': _torus,
    'cylinder': _cylinder,
    'cone': _cone,
    'plane': _plane,
}


def generate_shape(kind: str, n_points: int, noise_sigma: float,
                   rng: np.random.Generator, label: Optional[int] = None) -> PointCloud:
    """
    Sample n_points uniformly over the surface of a unit-scale primitive.

    sphere: radius 1; cube: side 1; torus: R=0.5, r=0.2; cylinder and cone:
    radius 0.5, height 1, capped; plane: unit square in z=0. Isotropic
    Gaussian noise of scale noise_sigma is added afterwards.

    Raises:
        ValueError: unknown kind, or n_points < 8
    """
    try:
        sampler = _SAMPLERS[kind]
    except KeyError:
        raise ValueError(f'unknown shape kind {kind!r}; expected one of {", ".join(SHAPE_KINDS)}') from None
    if n_points < MIN_POINTS:
        raise ValueError(f'n_points must be at least {MIN_POINTS}, got {n_points}')
    points = sampler(n_points, rng)
    if noise_sigma > 0:
        points = points + rng.normal(scale=noise_sigma, size=points.shape)
    return PointCloud(points, label)


# XYZ and manifest I/O

def _text_lines(path: str) -> Iterator[Tuple[int, str]]:
    """(1-based number, line minus its newline) for every line of a UTF-8 file."""
    with open(path, 'r', encoding='utf-8', newline='\n') as handle:
        try:
            for number, line in enumerate(handle, start=1):
                yield number, line[:-1] if line.endswith('\n') else line
        except UnicodeDecodeError as e:
            raise DataFormatError(f'not UTF-8 text ({e.reason})', path) from None


def load_xyz(path: str, label: Optional[int] = None) -> PointCloud:
    """
    Parse an XYZ file into a cloud (file order kept).

    Coordinates are separated by exactly one space; tabs, runs of spaces and
    leading or trailing whitespace make a line malformed.

    Raises:
        DataFormatError: malformed line (with its 1-based number), no points,
            or bytes that are not UTF-8
        OSError: if the file cannot be read
    """
    rows: List[Tuple[float, float, float]] = []
    for number, text in _text_lines(path):
        if not text or text.startswith('#'):
            continue
        parts = text.split(' ')
        if len(parts) != 3:
            raise DataFormatError(f'expected 3 space-separated coordinates, found {len(parts)} fields',
                                  path, number)
        if any(not p or p != p.strip() for p in parts):
            raise DataFormatError(f'coordinates must be separated by single spaces in {text!r}',
                                  path, number)
        try:
            point = tuple(float(p) for p in parts)
        except ValueError:
            raise DataFormatError(f'not a number in {text!r}', path, number) from None
        if not all(math.isfinite(c) for c in point):
            raise DataFormatError(f'non-finite coordinate in {text!r}', path, number)
        rows.append(point)
    if not rows:
        raise DataFormatError('file contains no points', path)
    return PointCloud(np.array(rows), label)



def format_xyz(cloud: PointCloud) -> str:
    return ''.join(f'{x:.9g} {y:.9g} {z:.9g}\n' for x, y, z in cloud.points)


def save_xyz(path: str, cloud: PointCloud) -> None:
    """Write points at 9 significant digits."""
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        handle.write(format_xyz(cloud))


# Datasets

@dataclass
class Sample:
    cloud: PointCloud
    label: int
    seed: int = 0
    name: str = ''


@dataclass
class Dataset:
    """Labelled clouds of one split."""
    samples: List[Sample]
    class_names: List[str]
    split: str = 'train'
    patch_cache: Dict[tuple, tuple] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.split not in ('train', 'test'):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        for i, sample in enumerate(self.samples):
            if not 0 <= sample.label < len(self.class_names):
                raise ValueError(f'sample {i} has label {sample.label} outside '
                                 f'[0, {len(self.class_names)})')

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def class_histogram(self) -> List[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()


def make_synthetic_dataset(
    n_per_class: int,
    kinds: Sequence[str] = SHAPE_KINDS,
    noise: float = 0.01,
    split_seed: int = 0,
    n_points: int = 1024,
    train_fraction: float = 0.8
) -> Tuple[Dataset, Dataset]:
    """
    Balanced synthetic train/test datasets, one class per shape kind.

    Raises:
        ValueError: if n_per_class < 2 or the split leaves a side empty
    """
    if n_per_class < 2:
        raise ValueError(f'n_per_class must be at least 2, got {n_per_class}')
    for kind in kinds:
        if kind not in _SAMPLERS:
            raise ValueError(f'unknown shape kind {kind!r}')
    n_train = int(math.floor(n_per_class * train_fraction + 1e-9))
    if not 0 < n_train < n_per_class:
        raise ValueError(f'train_fraction {train_fraction} leaves an empty split '
                         f'for {n_per_class} samples per class')

    children = np.random.SeedSequence(split_seed).spawn(len(kinds) * n_per_class)
    train: List[Sample] = []
    test: List[Sample] = []
    for label, kind in enumerate(kinds):
        for i in range(n_per_class):
            child = children[label * n_per_class + i]
            rng = np.random.default_rng(child)
            cloud = generate_shape(kind, n_points, noise, rng, label)
            sample_seed = int(child.generate_state(1)[0])
            sample = Sample(cloud, label, seed=sample_seed, name=f'{kind}/{kind}_{i:04d}.xyz')
            (train if i < n_train else test).append(sample)

    logger.debug(f'synthetic dataset: {len(train)} train / {len(test)} test, kinds={list(kinds)}')
    return (
        Dataset(train, list(kinds), 'train'),
        Dataset(test, list(kinds), 'test'),
    )


def load_manifest_dataset(manifest_path: str, split: str = 'train',
                          class_names: Optional[Sequence[str]] = None) -> Dataset:
    """
    Load every file listed in a labels manifest.

    Raises:
        DataFormatError: malformed manifest line or unknown class name
    """
    base = os.path.dirname(os.path.abspath(manifest_path))
    names: List[str] = list(class_names) if class_names is not None else []
    fixed = class_names is not None
    entries: List[Tuple[str, int]] = []
    for number, text in _text_lines(manifest_path):
        if not text.strip() or text.startswith('#'):
            continue
        parts = text.split('\t')
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise DataFormatError('expected "path<TAB>class_name"', manifest_path, number)
        rel_path, class_name = parts
        if class_name not in names:
            if fixed:
                raise DataFormatError(f'unknown class {class_name!r}', manifest_path, number)
            names.append(class_name)
        entries.append((rel_path, names.index(class_name)))

    samples = []
    for index, (rel_path, label) in enumerate(entries):
        cloud = load_xyz(os.path.join(base, rel_path), label)
        samples.append(Sample(cloud, label, seed=index, name=rel_path))
    logger.info(f'loaded {len(samples)} samples from {manifest_path}')
    return Dataset(samples, names, split)


def write_dataset(dataset: Dataset, root: str) -> str:
    """
    Write `<root>/<split>/<kind>/*.xyz` and `<root>/<split>_manifest.txt`.

    Returns:
        Path of the manifest
    """
    split_dir = os.path.join(root, dataset.split)
    lines = []
    for i, sample in enumerate(dataset.samples):
        class_name = dataset.class_names[sample.label]
        rel_name = sample.name or f'{class_name}/{class_name}_{i:04d}.xyz'
        rel_path = f'{dataset.split}/{rel_name}'
        target = os.path.join(root, rel_path)
        os.makedirs(os.path.dirname(target), exist_ok=True)
        save_xyz(target, sample.cloud)
        lines.append(f'{rel_path}\t{class_name}\n')
    os.makedirs(split_dir, exist_ok=True)
    manifest = os.path.join(root, f'{dataset.split}_manifest.txt')
    with open(manifest, 'w', encoding='utf-8', newline='\n') as handle:
        handle.writelines(lines)
    return manifest
