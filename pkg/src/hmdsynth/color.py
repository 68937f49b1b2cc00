"""sRGB <-> CIE Lab (D65) conversion and the Lab image container."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RGB_TO_XYZ = np.array([
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
])
XYZ_TO_RGB = np.linalg.inv(RGB_TO_XYZ)
WHITE_D65 = np.array([0.95047, 1.0, 1.08883])
_EPS = 216.0 / 24389.0
_KAPPA = 24389.0 / 27.0


def _srgb_to_linear(c):
    return np.where(c > 0.04045, ((c + 0.055) / 1.055) ** 2.4, c / 12.92)


def _linear_to_srgb(c):
    c = np.clip(c, 0.0, None)
    return np.where(c > 0.0031308, 1.055 * c ** (1 / 2.4) - 0.055, 12.92 * c)


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """``(..., 3)`` sRGB in [0, 1] to Lab."""
    xyz = _srgb_to_linear(np.asarray(rgb, dtype=float)) @ RGB_TO_XYZ.T / WHITE_D65
    f = np.where(xyz > _EPS, np.cbrt(xyz), (_KAPPA * xyz + 16.0) / 116.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Lab to sRGB in [0, 1] (clipped)."""
    lab = np.asarray(lab, dtype=float)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    f3 = f**3
    xyz = np.where(f3 > _EPS, f3, (116.0 * f - 16.0) / _KAPPA)
    xyz[..., 1] = np.where(lab[..., 0] > _KAPPA * _EPS, f3[..., 1], lab[..., 0] / _KAPPA)
    rgb = (xyz * WHITE_D65) @ XYZ_TO_RGB.T
    return np.clip(_linear_to_srgb(rgb), 0.0, 1.0)


def gray_to_L(gray_u8: np.ndarray) -> np.ndarray:
    """Lightness of a neutral gray 8-bit value."""
    return rgb_to_lab(np.repeat((np.asarray(gray_u8, float) / 255.0)[..., None], 3, axis=-1))[..., 0]


@dataclass
class LabImage:
    L: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.L = np.clip(np.asarray(self.L, dtype=float), 0.0, 100.0)
        self.a = np.clip(np.asarray(self.a, dtype=float), -128.0, 127.0)
        self.b = np.clip(np.asarray(self.b, dtype=float), -128.0, 127.0)
        if not (self.L.shape == self.a.shape == self.b.shape) or self.L.ndim != 2:
            raise ValueError("L, a, b must be 2D arrays of one shape")

    @property
    def height(self) -> int:
        return self.L.shape[0]

    @property
    def width(self) -> int:
        return self.L.shape[1]

    def channel(self, name: str) -> np.ndarray:
        return {"L": self.L, "a": self.a, "b": self.b}[name]

    def stack(self) -> np.ndarray:
        return np.stack([self.L, self.a, self.b], axis=-1)

    @classmethod
    def from_stack(cls, lab: np.ndarray) -> "LabImage":
        return cls(lab[..., 0], lab[..., 1], lab[..., 2])

    @classmethod
    def from_rgb8(cls, rgb: np.ndarray) -> "LabImage":
        return cls.from_stack(rgb_to_lab(np.asarray(rgb, float) / 255.0))

    def to_rgb8(self) -> np.ndarray:
        return np.clip(np.rint(lab_to_rgb(self.stack()) * 255.0), 0, 255).astype(np.uint8)
