"""Colour harmonisation, feathered masks, Laplacian-pyramid blending and background replacement."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

BACKGROUND, HEAD_REF, EYE_LEFT, EYE_RIGHT, QUERY_KEEP = range(5)
LABEL_NAMES = ("background", "head-from-reference", "eye-left", "eye-right", "query-keep")
LABEL_COLORS = np.array([[0, 0, 0], [220, 60, 60], [60, 200, 60], [60, 90, 230], [160, 160, 160]], dtype=np.uint8)

_K5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


class ComposeError(ValueError):
    pass


def _blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, kernel, axis=0, mode="mirror")
    return ndimage.correlate1d(out, kernel, axis=1, mode="mirror")


def pyr_down(img: np.ndarray) -> np.ndarray:
    """5-tap binomial blur then drop odd rows/columns (mirror border without edge repeat)."""
    return _blur(np.asarray(img, dtype=float), _K5)[::2, ::2]


def pyr_up(img: np.ndarray, shape) -> np.ndarray:
    """Zero-insertion upsampling to ``shape`` followed by the scaled binomial blur."""
    up = np.zeros(tuple(shape[:2]) + img.shape[2:])
    up[::2, ::2] = img[: (shape[0] + 1) // 2, : (shape[1] + 1) // 2]
    return _blur(up, 2.0 * _K5)


def gaussian_pyramid(img: np.ndarray, levels: int) -> list:
    g = [np.asarray(img, dtype=float)]
    for _ in range(levels - 1):
        g.append(pyr_down(g[-1]))
    return g


@dataclass
class LaplacianPyramid:
    levels: list  # band-pass images, last entry is the coarse Gaussian residual

    @property
    def level_count(self) -> int:
        return len(self.levels)

    @classmethod
    def build(cls, img: np.ndarray, levels: int = 5) -> "LaplacianPyramid":
        if levels < 1:
            raise ComposeError("need at least one pyramid level")
        g = gaussian_pyramid(img, levels)
        bands = [g[i] - pyr_up(g[i + 1], g[i].shape) for i in range(levels - 1)]
        return cls(bands + [g[-1]])

    def collapse(self) -> np.ndarray:
        out = self.levels[-1]
        for band in reversed(self.levels[:-1]):
            out = band + pyr_up(out, band.shape)
        return out


@dataclass
class BlendMask:
    labels: np.ndarray  # (H, W) int label map
    weights: np.ndarray  # (n_sources, H, W), sums to 1 per pixel
    band: float

    def dump_png(self) -> np.ndarray:
        return LABEL_COLORS[np.clip(self.labels, 0, len(LABEL_COLORS) - 1)]


def signed_distance(mask: np.ndarray) -> np.ndarray:
    """Positive inside, negative outside, measured to the region boundary in pixels."""
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        return np.full(mask.shape, np.inf)
    if not mask.any():
        return np.full(mask.shape, -np.inf)
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(~mask)
    return np.where(mask, inside - 0.5, 0.5 - outside)


def feathered_weights(labels: np.ndarray, sources: list, band: float) -> BlendMask:
    """Weight maps with a linear ramp of width ``band`` across each label boundary.

    ``sources`` lists, for each blend source, the label values it supplies.
    """
    labels = np.asarray(labels)
    raw = []
    for labs in sources:
        sd = signed_distance(np.isin(labels, labs))
        raw.append(np.clip(0.5 + sd / max(band, 1e-9), 0.0, 1.0) if band > 0 else (sd > 0).astype(float))
    W = np.array(raw)
    total = W.sum(0)
    if np.any(total <= 0):
        raise ComposeError("some pixel is covered by no blend source")
    return BlendMask(labels, W / total, band)


def blend_pyramid(sources: list, mask: BlendMask | np.ndarray, levels: int = 5) -> np.ndarray:
    """Multi-band blend: per-level weighted sum of Laplacian bands with Gaussian-pyramid weights."""
    W = mask.weights if isinstance(mask, BlendMask) else np.asarray(mask, dtype=float)
    shape = np.asarray(sources[0]).shape
    if any(np.asarray(s).shape != shape for s in sources) or W.shape[1:] != shape[:2] or len(W) != len(sources):
        raise ComposeError("sources and weight maps must share one size")
    levels = max(1, min(levels, int(np.floor(np.log2(min(shape[:2])))) + 1))
    out_levels = None
    wsum = None
    for src, w in zip(sources, W):
        lp = LaplacianPyramid.build(src, levels).levels
        gw = gaussian_pyramid(w, levels)
        if src.ndim == 3:
            gw = [g[..., None] for g in gw]
        if out_levels is None:
            out_levels = [g * l for g, l in zip(gw, lp)]
            wsum = list(gw)
        else:
            out_levels = [o + g * l for o, g, l in zip(out_levels, gw, lp)]
            wsum = [a + g for a, g in zip(wsum, gw)]
    out_levels = [o / np.maximum(s, 1e-12) for o, s in zip(out_levels, wsum)]
    return LaplacianPyramid(out_levels).collapse()


def match_histogram(source: np.ndarray, target: np.ndarray, source_mask: np.ndarray,
                    target_mask: np.ndarray | None = None) -> np.ndarray:
    """Per-channel monotone CDF mapping fitted on masked pixels and applied to all of ``source``."""
    source_mask = np.asarray(source_mask, dtype=bool)
    target_mask = source_mask if target_mask is None else np.asarray(target_mask, dtype=bool)
    if not source_mask.any() or not target_mask.any():
        raise ComposeError("histogram matching needs non-empty masks")
    src = np.asarray(source, dtype=float)
    tgt = np.asarray(target, dtype=float)
    squeeze = src.ndim == 2
    if squeeze:
        src, tgt = src[..., None], tgt[..., None]
    out = np.empty_like(src)
    for c in range(src.shape[-1]):
        s_vals = src[..., c][source_mask]
        t_vals = np.sort(tgt[..., c][target_mask])
        uniq, counts = np.unique(s_vals, return_counts=True)
        cdf = (np.cumsum(counts) - 0.5 * counts) / len(s_vals)  # mid-rank quantiles
        t_q = (np.arange(len(t_vals)) + 0.5) / len(t_vals)
        mapped = np.interp(cdf, t_q, t_vals)
        out[..., c] = np.interp(src[..., c], uniq, mapped)
    return out[..., 0] if squeeze else out


def replace_background(query: np.ndarray, clean_plate: np.ndarray | None, head_weight: np.ndarray) -> np.ndarray:
    """``w * query + (1 - w) * plate``: the plate shows wherever the head weight falls off."""
    if clean_plate is None:
        log.warning("no clean background plate; background replacement skipped")
        return np.asarray(query, dtype=float)
    w = np.asarray(head_weight, dtype=float)
    q = np.asarray(query, dtype=float)
    if q.ndim == 3:
        w = w[..., None]
    return w * q + (1.0 - w) * np.asarray(clean_plate, dtype=float)
