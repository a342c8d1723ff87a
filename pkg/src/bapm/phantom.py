"""Synthetic brain phantoms: nested ellipsoids with exact tissue labels.

Head (outer CSF) contains a gray-matter shell around a white-matter core,
which holds CSF ventricles.  Class 1 phantoms have a thinner gray-matter
shell (atrophy), which is the downstream classification target.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .volume import BACKGROUND, CSF, GM, LABELS, WM, Volume


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    # semi-axes as fractions of dims
    head_axes: tuple[float, float, float] = (0.44, 0.46, 0.42)
    wm_axes: tuple[float, float, float] = (0.24, 0.27, 0.22)
    ventricle_axes: tuple[float, float, float] = (0.07, 0.10, 0.06)
    gm_thickness: float = 0.12
    atrophy_delta: float = 0.3
    atrophy_class: int = 0
    csf: tuple[float, float] = (0.25, 0.03)
    gm: tuple[float, float] = (0.5, 0.03)
    wm: tuple[float, float] = (0.8, 0.03)
    background: tuple[float, float] = (0.02, 0.01)
    deformation: float = 2.0

    def __post_init__(self):
        self.validate()

    @property
    def shell_thickness(self) -> float:
        if self.atrophy_class == 1:
            return self.gm_thickness * (1.0 - self.atrophy_delta)
        return self.gm_thickness

    @property
    def gm_axes(self) -> tuple[float, float, float]:
        return tuple(a + self.shell_thickness for a in self.wm_axes)

    def validate(self) -> None:
        if len(self.dims) != 3 or any(d <= 0 or d % 16 for d in self.dims):
            raise ValueError(f"phantom dims must be positive multiples of 16, got {self.dims}")
        if self.atrophy_class not in (0, 1):
            raise ValueError(f"atrophy_class must be 0 or 1, got {self.atrophy_class}")
        if not 0.0 <= self.atrophy_delta < 1.0:
            raise ValueError(f"atrophy_delta must be in [0, 1), got {self.atrophy_delta}")
        if self.gm_thickness <= 0:
            raise ValueError("gm_thickness must be positive")
        gm_outer = tuple(a + self.gm_thickness for a in self.wm_axes)
        for name, inner, outer in (("ventricle", self.ventricle_axes, self.wm_axes),
                                   ("wm", self.wm_axes, gm_outer),
                                   ("gm", gm_outer, self.head_axes)):
            if any(not 0 < i < o for i, o in zip(inner, outer)):
                raise ValueError(f"ellipsoid nesting violated: {name} axes {inner} not strictly inside {outer}")
        if any(h > 0.5 for h in self.head_axes):
            raise ValueError(f"head axes {self.head_axes} exceed the volume")
        if not self.csf[0] < self.gm[0] < self.wm[0]:
            raise ValueError("intensity means must be ordered CSF < GM < WM")
        if self.deformation < 0:
            raise ValueError("deformation amplitude must be non-negative")

    def with_class(self, atrophy_class: int) -> "PhantomSpec":
        return dataclasses.replace(self, atrophy_class=atrophy_class)


@dataclass
class PhantomSample:
    intensity: Volume
    labels: Volume
    class_label: int
    spec: PhantomSpec
    seed: int


def _inside(coords: np.ndarray, center: np.ndarray, semi: np.ndarray) -> np.ndarray:
    q = (coords - center[:, None, None, None]) / semi[:, None, None, None]
    return (q * q).sum(axis=0) <= 1.0


def displacement_field(dims, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Sum of three low-frequency sinusoids; |u| <= amplitude everywhere."""
    grid = np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij"))
    u = np.zeros_like(grid)
    if amplitude == 0:
        return u
    for _ in range(3):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        freq = rng.uniform(0.5, 1.5, size=3) / np.asarray(dims, dtype=np.float64)
        phase = rng.uniform(0, 2 * np.pi)
        amp = amplitude / 3.0 * rng.uniform(0.5, 1.0)
        wave = np.sin(2 * np.pi * np.tensordot(freq, grid, axes=1) + phase)
        u += amp * direction[:, None, None, None] * wave
    return u


def label_map(spec: PhantomSpec, coords: np.ndarray) -> np.ndarray:
    """Tissue label at continuous voxel coordinates (3 x D x H x W)."""
    dims = np.asarray(spec.dims, dtype=np.float64)
    center = (dims - 1) / 2.0
    labels = np.full(coords.shape[1:], BACKGROUND, dtype=np.uint8)
    labels[_inside(coords, center, np.asarray(spec.head_axes) * dims)] = CSF
    labels[_inside(coords, center, np.asarray(spec.gm_axes) * dims)] = GM
    labels[_inside(coords, center, np.asarray(spec.wm_axes) * dims)] = WM
    labels[_inside(coords, center, np.asarray(spec.ventricle_axes) * dims)] = CSF
    return labels


def generate_phantom(spec: PhantomSpec, seed: int) -> PhantomSample:
    spec.validate()
    rng = np.random.default_rng(seed)
    grid = np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in spec.dims], indexing="ij"))
    coords = grid + displacement_field(spec.dims, spec.deformation, rng)
    labels = label_map(spec, coords)

    means = np.zeros(4)
    stds = np.zeros(4)
    for code, (mu, sd) in ((BACKGROUND, spec.background), (WM, spec.wm), (GM, spec.gm), (CSF, spec.csf)):
        means[code], stds[code] = mu, sd
    noise = rng.standard_normal(spec.dims)
    intensity = means[labels] + stds[labels] * noise
    intensity = np.clip(intensity, 0.0, 1.0).astype(np.float32)
    return PhantomSample(Volume(intensity), Volume(labels, kind=LABELS), spec.atrophy_class, spec, int(seed))


def sample_seed(seed: int, index: int) -> int:
    """Per-sample seed depending only on (seed, index)."""
    return int(np.random.SeedSequence((int(seed), int(index))).generate_state(1)[0])


def generate_dataset(n_per_class: int, spec_base: PhantomSpec | None = None, seed: int = 0) -> list[PhantomSample]:
    """Balanced phantom set; sample ``i`` has class ``i % 2`` so prefixes are
    stable as ``n_per_class`` grows."""
    if n_per_class < 0:
        raise ValueError("n_per_class must be non-negative")
    spec_base = spec_base or PhantomSpec()
    return [generate_phantom(spec_base.with_class(i % 2), sample_seed(seed, i)) for i in range(2 * n_per_class)]


def tissue_volume(sample: PhantomSample, tissue: int = GM) -> int:
    return int((sample.labels.data == tissue).sum())
