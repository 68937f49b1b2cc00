"""Z-buffered triangle rasterisation with perspective-correct barycentrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics


@dataclass
class Raster:
    face: np.ndarray  # (H, W) int, -1 where empty
    bary: np.ndarray  # (H, W, 3) perspective-correct barycentrics
    depth: np.ndarray  # (H, W) camera z, inf where empty

    @property
    def mask(self) -> np.ndarray:
        return self.face >= 0

    def interpolate(self, vertex_attr: np.ndarray, faces: np.ndarray, fill=0.0) -> np.ndarray:
        """Barycentric interpolation of per-vertex attributes at covered pixels."""
        vertex_attr = np.asarray(vertex_attr, dtype=float)
        tail = vertex_attr.shape[1:]
        out = np.full(self.face.shape + tail, fill, dtype=float)
        m = self.mask
        f = faces[self.face[m]]
        b = self.bary[m]
        val = sum(b[:, k].reshape((-1,) + (1,) * len(tail)) * vertex_attr[f[:, k]] for k in range(3))
        out[m] = val
        return out


def rasterize(verts_cam: np.ndarray, faces: np.ndarray, K: CameraIntrinsics,
              cull_back: bool = True, near: float = 1.0, chunk: int = 2_000_000) -> Raster:
    """Rasterise a mesh given in camera coordinates.

    Pixel ``(u, v)`` samples the image plane at its centre.  Triangles with a vertex
    closer than ``near`` are dropped.  Back faces (clockwise on screen for the
    outward-wound meshes used here) are culled unless ``cull_back`` is False.
    """
    H, W = K.image_height, K.image_width
    face_buf = np.full(H * W, -1, dtype=np.int64)
    bary_buf = np.zeros((H * W, 3))
    depth_buf = np.full(H * W, np.inf)

    verts_cam = np.asarray(verts_cam, dtype=float)
    z = verts_cam[:, 2]
    zs = np.where(z > 0, z, 1.0)
    uv = np.stack([K.fx * verts_cam[:, 0] / zs + K.cx, K.fy * verts_cam[:, 1] / zs + K.cy], axis=1)

    tri_uv = uv[faces]
    tri_z = z[faces]
    keep = np.all(tri_z > near, axis=1)
    e1 = tri_uv[:, 1] - tri_uv[:, 0]
    e2 = tri_uv[:, 2] - tri_uv[:, 0]
    area = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    # y points down on screen, so outward (counter-clockwise in 3D) front faces have area < 0
    keep &= (area < 0) if cull_back else (area != 0)
    lo = np.floor(tri_uv.min(axis=1)).astype(np.int64)
    hi = np.ceil(tri_uv.max(axis=1)).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi[:, 0] = np.minimum(hi[:, 0], W - 1)
    hi[:, 1] = np.minimum(hi[:, 1], H - 1)
    keep &= np.all(hi >= lo, axis=1)
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        return Raster(face_buf.reshape(H, W), bary_buf.reshape(H, W, 3), depth_buf.reshape(H, W))

    bw = hi[idx, 0] - lo[idx, 0] + 1
    bh = hi[idx, 1] - lo[idx, 1] + 1
    counts = bw * bh
    starts = np.concatenate([[0], np.cumsum(counts)])
    # process triangles in groups whose candidate pixel count fits the chunk budget
    group_edges = [0]
    budget = 0
    for i, c in enumerate(counts):
        if budget + c > chunk and budget > 0:
            group_edges.append(i)
            budget = 0
        budget += c
    group_edges.append(len(idx))

    for g0, g1 in zip(group_edges[:-1], group_edges[1:]):
        sel = idx[g0:g1]
        cnt = counts[g0:g1]
        total = int(cnt.sum())
        owner = np.repeat(np.arange(len(sel)), cnt)
        local = np.arange(total) - np.repeat(starts[g0:g1] - starts[g0], cnt)
        bwg = np.repeat(bw[g0:g1], cnt)
        px = lo[sel, 0][owner] + local % bwg
        py = lo[sel, 1][owner] + local // bwg
        t = tri_uv[sel][owner]
        a = area[sel][owner]
        # screen-space barycentrics via edge functions
        def edge(p0, p1):
            return (p1[:, 0] - p0[:, 0]) * (py - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (px - p0[:, 0])
        w0 = edge(t[:, 1], t[:, 2]) / a
        w1 = edge(t[:, 2], t[:, 0]) / a
        w2 = edge(t[:, 0], t[:, 1]) / a
        eps = -1e-9
        inside = (w0 >= eps) & (w1 >= eps) & (w2 >= eps)
        if not np.any(inside):
            continue
        owner, px, py = owner[inside], px[inside], py[inside]
        w = np.stack([w0[inside], w1[inside], w2[inside]], axis=1)
        invz = 1.0 / tri_z[sel][owner]
        q = w * invz
        s = q.sum(axis=1)
        depth = 1.0 / s
        b = q / s[:, None]
        pix = py * W + px
        order = np.lexsort((depth, pix))
        pix_o = pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix_o[1:] != pix_o[:-1]
        win = order[first]
        pw = pix[win]
        better = depth[win] < depth_buf[pw]
        pw, win = pw[better], win[better]
        depth_buf[pw] = depth[win]
        face_buf[pw] = sel[owner[win]]
        bary_buf[pw] = b[win]

    return Raster(face_buf.reshape(H, W), bary_buf.reshape(H, W, 3), depth_buf.reshape(H, W))


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample ``image`` (H, W[, C]) at float pixel coordinates; returns ``(values, inside)``.

    Points within half a pixel of the border are clamped to the edge pixel.
    """
    H, W = image.shape[:2]
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    inside = (x >= -0.5) & (x <= W - 0.5) & (y >= -0.5) & (y <= H - 0.5)
    xc = np.clip(x, 0, W - 1)
    yc = np.clip(y, 0, H - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), W - 2 if W > 1 else 0)
    y0 = np.minimum(np.floor(yc).astype(np.int64), H - 2 if H > 1 else 0)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = xc - x0
    fy = yc - y0
    img = np.asarray(image, dtype=float)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v = (img[y0, x0] * (1 - fx) * (1 - fy) + img[y0, x1] * fx * (1 - fy)
         + img[y1, x0] * (1 - fx) * fy + img[y1, x1] * fx * fy)
    return v, inside


def fill_polygon(shape, polygon: np.ndarray) -> np.ndarray:
    """Even-odd fill of a closed polygon given as ``(N, 2)`` (x, y) pixel vertices."""
    H, W = shape
    poly = np.asarray(polygon, dtype=float)
    ys, xs = np.mgrid[0:H, 0:W]
    inside = np.zeros((H, W), dtype=bool)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for a, b, c, d in zip(x0, y0, x1, y1):
        if b == d:
            continue
        cond = (ys >= min(b, d)) & (ys < max(b, d))
        xint = a + (ys - b) * (c - a) / (d - b)
        inside ^= cond & (xs < xint)
    return inside
