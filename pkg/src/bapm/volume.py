from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INTENSITY = "intensity"
LABELS = "labels"
BACKGROUND, WM, GM, CSF = 0, 1, 2, 3
TISSUES = {BACKGROUND: "background", WM: "WM", GM: "GM", CSF: "CSF"}


@dataclass
class Volume:
    """A 3D scalar field with voxel spacing (mm) and a voxel-to-world affine.

    Intensity volumes hold float32 data; label volumes hold uint8 tissue codes
    0=background, 1=WM, 2=GM, 3=CSF.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    kind: str = INTENSITY

    def __post_init__(self):
        if self.kind not in (INTENSITY, LABELS):
            raise ValueError(f"kind must be {INTENSITY!r} or {LABELS!r}, got {self.kind!r}")
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be 3D with positive dims, got shape {arr.shape}")
        if self.kind == LABELS:
            if arr.dtype != np.uint8:
                if np.any(arr != np.round(arr)):
                    raise ValueError("label volume contains non-integer values")
                arr = arr.astype(np.uint8)
            if arr.size and arr.max() > CSF:
                raise ValueError(f"label values must be in 0..{CSF}, found {int(arr.max())}")
        else:
            arr = arr.astype(np.float32, copy=False)
        self.data = arr
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        if self.affine is None:
            self.affine = np.diag(list(self.spacing) + [1.0])
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.affine.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {self.affine.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def is_labels(self) -> bool:
        return self.kind == LABELS

    def with_data(self, data: np.ndarray, kind: str | None = None) -> "Volume":
        return Volume(data, self.spacing, self.affine.copy(), kind or self.kind)
