"""Stochastic MRI corruptions for pretext inputs and the fine-tuning affine.

Spatial transforms (affine, the dominant motion movement) are mirrored onto
label maps with nearest-neighbour sampling; intensity transforms never touch
labels.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import Volume

TRANSFORMS = ("affine", "blur", "noise", "bias", "motion")


@dataclass
class AugmentConfig:
    affine_rotation_max: float = 10.0  # degrees
    affine_scale_min: float = 0.9
    affine_scale_max: float = 1.1
    affine_translation_max: float = 5.0  # voxels
    blur_sigma_max: float = 2.0
    noise_sigma_max: float = 0.05  # fraction of the intensity range
    bias_order: int = 3
    bias_coef_max: float = 0.3
    motion_movements_min: int = 1
    motion_movements_max: int = 3
    motion_rotation_max: float = 5.0
    motion_translation_max: float = 3.0
    motion_ghost_weight_max: float = 0.2
    probability: dict = field(default_factory=lambda: {t: 0.5 for t in TRANSFORMS})
    enabled: frozenset = frozenset(TRANSFORMS)

    def __post_init__(self):
        self.enabled = frozenset(self.enabled)
        unknown = self.enabled - set(TRANSFORMS)
        if unknown:
            raise ValueError(f"unknown augmentation transforms: {sorted(unknown)}")
        for t in TRANSFORMS:
            self.probability.setdefault(t, 0.5)
        for name, p in self.probability.items():
            if name not in TRANSFORMS:
                raise ValueError(f"probability given for unknown transform {name!r}")
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability for {name} must be in [0, 1], got {p}")
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ValueError(f"{f.name} must be finite")
        if not 0 < self.affine_scale_min <= self.affine_scale_max:
            raise ValueError("affine scale range must satisfy 0 < min <= max")
        if not 0 <= self.motion_movements_min <= self.motion_movements_max:
            raise ValueError("motion movement counts must satisfy 0 <= min <= max")
        if self.motion_ghost_weight_max * self.motion_movements_max >= 1.0:
            raise ValueError("motion ghost weights must leave the original copy the largest share")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(enabled=frozenset())

    @classmethod
    def only(cls, *names: str, probability: float = 1.0) -> "AugmentConfig":
        return cls(enabled=frozenset(names), probability={t: probability for t in TRANSFORMS})


# ---------------------------------------------------------------- geometry


def rotation_matrix(angles_deg) -> np.ndarray:
    """R = Rz @ Ry @ Rx for Euler angles (degrees) about axes 0, 1, 2."""
    ax, ay, az = (math.radians(a) for a in angles_deg)
    cx, sx, cy, sy, cz, sz = math.cos(ax), math.sin(ax), math.cos(ay), math.sin(ay), math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def source_coordinates(dims, rotation=(0, 0, 0), scale=(1, 1, 1), translation=(0, 0, 0)) -> np.ndarray:
    """Inverse-map every output voxel to input coordinates (3 x D x H x W).

    Forward map about the volume centre c: y = R S (x - c) + c + t.
    """
    dims = tuple(int(d) for d in dims)
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (3,))
    c = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    inv = np.diag(1.0 / scale) @ rotation_matrix(rotation).T
    grid = np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij"))
    rel = grid - (c + np.asarray(translation, dtype=np.float64))[:, None, None, None]
    return np.tensordot(inv, rel, axes=1) + c[:, None, None, None]


def _sample_trilinear(data: np.ndarray, coords: np.ndarray, edge: bool) -> np.ndarray:
    dims = np.asarray(data.shape)
    if edge:
        coords = np.clip(coords, 0, (dims - 1)[:, None, None, None])
    base = np.floor(coords)
    frac = coords - base
    base = base.astype(np.int64)
    out = np.zeros(coords.shape[1:], dtype=np.float64)
    src = data.astype(np.float64, copy=False)
    for corner in range(8):
        offs = [(corner >> k) & 1 for k in range(3)]
        idx = [base[k] + offs[k] for k in range(3)]
        w = np.ones(coords.shape[1:])
        for k in range(3):
            w = w * (frac[k] if offs[k] else 1.0 - frac[k])
        valid = np.ones(coords.shape[1:], dtype=bool)
        for k in range(3):
            valid &= (idx[k] >= 0) & (idx[k] < dims[k])
        clipped = [np.clip(idx[k], 0, dims[k] - 1) for k in range(3)]
        out += np.where(valid, w * src[clipped[0], clipped[1], clipped[2]], 0.0)
    return out


def _sample_nearest(data: np.ndarray, coords: np.ndarray, edge: bool) -> np.ndarray:
    dims = np.asarray(data.shape)
    idx = np.floor(coords + 0.5).astype(np.int64)
    if edge:
        idx = np.clip(idx, 0, (dims - 1)[:, None, None, None])
    valid = np.ones(coords.shape[1:], dtype=bool)
    for k in range(3):
        valid &= (idx[k] >= 0) & (idx[k] < dims[k])
    clipped = [np.clip(idx[k], 0, dims[k] - 1) for k in range(3)]
    return np.where(valid, data[clipped[0], clipped[1], clipped[2]], 0)


def apply_affine(volume: Volume, rotation=(0.0, 0.0, 0.0), scale=(1.0, 1.0, 1.0), translation=(0.0, 0.0, 0.0),
                 interpolation: str = "trilinear", fill: str = "zero") -> Volume:
    """Resample ``volume`` under a rotation/scale/translation about its centre.

    Out-of-bounds samples are 0 (``fill="zero"``) or replicate the border
    (``fill="edge"``).  Label volumes must use nearest interpolation.
    """
    if interpolation not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    if fill not in ("zero", "edge"):
        raise ValueError(f"unknown fill mode {fill!r}")
    if volume.is_labels and interpolation != "nearest":
        raise ValueError("label volumes must be resampled with nearest interpolation")
    coords = source_coordinates(volume.dims, rotation, scale, translation)
    if interpolation == "nearest":
        out = _sample_nearest(volume.data, coords, fill == "edge").astype(volume.data.dtype)
    else:
        out = _sample_trilinear(volume.data, coords, fill == "edge").astype(np.float32)
    return volume.with_data(out)


# ---------------------------------------------------------------- intensity


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(volume: Volume, sigma) -> Volume:
    """Separable Gaussian smoothing; kernels truncated at ceil(3 sigma) and
    renormalised, borders replicated.  A zero sigma leaves that axis alone."""
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (3,))
    if np.any(sigma < 0):
        raise ValueError(f"blur sigma must be non-negative, got {sigma}")
    out = volume.data.astype(np.float64)
    for axis, s in enumerate(sigma):
        if s > 0:
            out = ndimage.correlate1d(out, gaussian_kernel(float(s)), axis=axis, mode="nearest")
    return volume.with_data(out.astype(np.float32))


def add_gaussian_noise(volume: Volume, sigma: float, seed) -> Volume:
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    if sigma == 0:
        return volume.with_data(volume.data.copy())
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=volume.dims)
    return volume.with_data((volume.data + noise).astype(np.float32))


def monomial_exponents(order: int) -> list[tuple[int, int, int]]:
    """(i, j, k) with i + j + k <= order, by total degree then descending i, j."""
    out = []
    for d in range(order + 1):
        for i in range(d, -1, -1):
            for j in range(d - i, -1, -1):
                out.append((i, j, d - i - j))
    return out


def normalized_axes(dims) -> list[np.ndarray]:
    return [np.linspace(-1.0, 1.0, d) if d > 1 else np.zeros(1) for d in dims]


def bias_field(dims, coefficients, order: int) -> np.ndarray:
    exps = monomial_exponents(order)
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.shape != (len(exps),):
        raise ValueError(f"order {order} needs {len(exps)} coefficients, got {coefficients.shape}")
    u, v, w = normalized_axes(dims)
    poly = np.zeros(tuple(dims))
    for c, (i, j, k) in zip(coefficients, exps):
        if c != 0:
            poly += c * (u[:, None, None] ** i) * (v[None, :, None] ** j) * (w[None, None, :] ** k)
    return np.exp(poly)


def apply_bias_field(volume: Volume, coefficients, order: int = 3) -> Volume:
    """Multiply by exp(P) with P a polynomial of total degree <= order over
    coordinates scaled to [-1, 1]."""
    field_ = bias_field(volume.dims, coefficients, order)
    return volume.with_data((volume.data * field_).astype(np.float32))


def apply_motion(volume: Volume, movements, weights=None) -> Volume:
    """Ghosting as a weighted average of rigidly moved copies.

    ``movements`` is a list of (rotation_deg, translation) pairs, one per copy;
    include an identity movement to keep the unmoved image in the mix.
    Copies replicate the border so constant volumes stay constant.
    """
    movements = list(movements)
    if not movements:
        raise ValueError("motion needs at least one movement")
    if weights is None:
        weights = np.full(len(movements), 1.0 / len(movements))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(movements),):
        raise ValueError(f"{len(movements)} movements but {weights.size} weights")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-6:
        raise ValueError(f"motion weights must be non-negative and sum to 1, got {weights}")
    out = np.zeros(volume.dims)
    for (rot, trans), w in zip(movements, weights):
        if w == 0:
            continue
        coords = source_coordinates(volume.dims, rot, 1.0, trans)
        out += w * _sample_trilinear(volume.data, coords, edge=True)
    return volume.with_data(out.astype(np.float32))


# ---------------------------------------------------------------- sampling


@dataclass
class AugmentParams:
    """One draw of every transform's switch and parameters."""

    affine: tuple | None = None  # (rotation, scale, translation)
    blur: tuple | None = None  # sigma per axis
    noise: tuple | None = None  # (sigma, seed)
    bias: np.ndarray | None = None
    motion: tuple | None = None  # (movements, weights)

    @property
    def dominant_movement(self):
        if self.motion is None:
            return None
        movements, weights = self.motion
        return movements[int(np.argmax(weights))]


def sample_params(config: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    """Draw switches and parameters in the fixed order affine, blur, noise,
    bias, motion.  Parameters are drawn even for switched-off transforms so
    the stream does not depend on which ones fire."""
    params = AugmentParams()

    def fires(name):
        u = rng.random()
        return name in config.enabled and u < config.probability[name]

    on = fires("affine")
    rot = rng.uniform(-config.affine_rotation_max, config.affine_rotation_max, 3)
    scl = rng.uniform(config.affine_scale_min, config.affine_scale_max, 3)
    trn = rng.uniform(-config.affine_translation_max, config.affine_translation_max, 3)
    if on:
        params.affine = (tuple(rot), tuple(scl), tuple(trn))

    on = fires("blur")
    sig = rng.uniform(0.0, config.blur_sigma_max, 3)
    if on:
        params.blur = tuple(sig)

    on = fires("noise")
    nsig = rng.uniform(0.0, config.noise_sigma_max)
    nseed = int(rng.integers(0, 2 ** 63 - 1))
    if on:
        params.noise = (float(nsig), nseed)

    on = fires("bias")
    coefs = rng.uniform(-config.bias_coef_max, config.bias_coef_max, len(monomial_exponents(config.bias_order)))
    if on:
        params.bias = coefs

    on = fires("motion")
    k = int(rng.integers(config.motion_movements_min, config.motion_movements_max + 1))
    moves = [(tuple(rng.uniform(-config.motion_rotation_max, config.motion_rotation_max, 3)),
              tuple(rng.uniform(-config.motion_translation_max, config.motion_translation_max, 3)))
             for _ in range(k)]
    ghost = rng.uniform(0.0, config.motion_ghost_weight_max, k)
    if on and k:
        movements = [((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))] + moves
        weights = np.concatenate([[1.0 - ghost.sum()], ghost])
        params.motion = (movements, weights)
    return params


def apply_spatial(volume: Volume, params: AugmentParams) -> Volume:
    """Only the geometric part of ``params``: what labels and clean targets see."""
    interp = "nearest" if volume.is_labels else "trilinear"
    out = volume
    if params.affine is not None:
        rot, scl, trn = params.affine
        out = apply_affine(out, rot, scl, trn, interpolation=interp)
    dom = params.dominant_movement
    if dom is not None and (any(dom[0]) or any(dom[1])):
        out = apply_affine(out, dom[0], 1.0, dom[1], interpolation=interp, fill="edge")
    return out


def apply_params(volume: Volume, params: AugmentParams) -> Volume:
    out = volume
    if params.affine is not None:
        rot, scl, trn = params.affine
        out = apply_affine(out, rot, scl, trn)
    if params.blur is not None:
        out = gaussian_blur(out, params.blur)
    if params.noise is not None:
        sigma, seed = params.noise
        lo, hi = float(volume.data.min()), float(volume.data.max())
        out = add_gaussian_noise(out, sigma * (hi - lo), seed)
    if params.bias is not None:
        out = apply_bias_field(out, params.bias, len_to_order(len(params.bias)))
    if params.motion is not None:
        out = apply_motion(out, *params.motion)
    return out


def len_to_order(n: int) -> int:
    order = 0
    while len(monomial_exponents(order)) < n:
        order += 1
    if len(monomial_exponents(order)) != n:
        raise ValueError(f"{n} is not a monomial count for any polynomial order")
    return order


def sample_and_apply(volume: Volume, labels: Volume | None, config: AugmentConfig, seed):
    """Corrupt ``volume`` (and move ``labels`` alongside); deterministic per seed."""
    params = sample_params(config, np.random.default_rng(seed))
    out = apply_params(volume, params)
    out_labels = apply_spatial(labels, params) if labels is not None else None
    return out, out_labels


def random_affine(volume: Volume, config: AugmentConfig, seed, labels: Volume | None = None):
    """The fine-tuning augmentation: a single random affine, always applied."""
    rng = np.random.default_rng(seed)
    rot = rng.uniform(-config.affine_rotation_max, config.affine_rotation_max, 3)
    scl = rng.uniform(config.affine_scale_min, config.affine_scale_max, 3)
    trn = rng.uniform(-config.affine_translation_max, config.affine_translation_max, 3)
    out = apply_affine(volume, rot, scl, trn)
    if labels is None:
        return out
    return out, apply_affine(labels, rot, scl, trn, interpolation="nearest")
