"""NIR eye colourisation, iris/pupil localisation and eye-region refinement."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.cluster.vq import kmeans2
from scipy.sparse.linalg import splu

from .color import LabImage
from .render import bilinear_sample, fill_polygon

log = logging.getLogger(__name__)

SKIN, SCLERA, IRIS, PUPIL = 0, 1, 2, 3
CLASS_NAMES = {SKIN: "skin", SCLERA: "sclera", IRIS: "iris", PUPIL: "pupil"}
OFFSETS8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
OFFSETS4 = [(-1, 0), (0, -1), (0, 1), (1, 0)]


class EyeError(RuntimeError):
    pass


class EyeClosedError(EyeError):
    pass


# -- luminance ----------------------------------------------------------------------------------


def transfer_luminance(I: np.ndarray, M_L: np.ndarray, mask_I=None, mask_M=None, clamp: bool = True) -> np.ndarray:
    """Match the mean and standard deviation of ``I`` to those of ``M_L``.

    Statistics are taken over the optional masks; the mapping is applied to all of ``I``.
    """
    I = np.asarray(I, dtype=float)
    M_L = np.asarray(M_L, dtype=float)
    vi = I[mask_I] if mask_I is not None else I.ravel()
    vm = M_L[mask_M] if mask_M is not None else M_L.ravel()
    if vi.size == 0 or vm.size == 0:
        raise EyeError("luminance transfer needs non-empty images")
    mi, si = vi.mean(), vi.std()
    mm, sm = vm.mean(), vm.std()
    out = np.full(I.shape, mm) if si == 0 else (I - mi) * (sm / si) + mm
    return np.clip(out, 0.0, 100.0) if clamp else out


# -- seeds ---------------------------------------------------------------------------------------


def adaptive_kmeans(values: np.ndarray, k0: int = 4, split_sigma: float = 10.0, max_k: int = 16,
                    iters: int = 30):
    """1D k-means that splits any cluster whose spread exceeds ``split_sigma``.

    Starts from ``k0`` quantile centres (duplicates removed).  Returns
    ``(centres, labels)`` with empty clusters dropped.
    """
    v = np.asarray(values, dtype=float).ravel()
    centres = np.unique(np.quantile(v, (np.arange(k0) + 0.5) / k0))
    while True:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            centres, labels = kmeans2(v[:, None], centres[:, None], minit="matrix", iter=iters, missing="warn")
        centres = centres[:, 0]
        used = np.unique(labels)
        centres = centres[used]
        labels = np.searchsorted(used, labels)
        sig = np.array([v[labels == k].std() for k in range(len(centres))])
        wide = sig > split_sigma
        if not wide.any() or len(centres) >= max_k:
            order = np.argsort(centres)
            return centres[order], np.argsort(order)[labels]
        extra = np.concatenate([centres[wide] - 0.5 * sig[wide], centres[wide] + 0.5 * sig[wide]])
        centres = np.unique(np.concatenate([centres[~wide], extra]))


@dataclass
class SeedSet:
    positions: np.ndarray  # (N, 2) integer (row, col)
    a: np.ndarray
    b: np.ndarray
    error: np.ndarray
    threshold: float = 0.06

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1, 2)
        self.a = np.asarray(self.a, dtype=float).ravel()
        self.b = np.asarray(self.b, dtype=float).ravel()
        self.error = np.asarray(self.error, dtype=float).ravel()
        if not (len(self.positions) == len(self.a) == len(self.b) == len(self.error)):
            raise ValueError("seed arrays differ in length")
        if np.any(self.error >= self.threshold):
            raise ValueError("every seed must have error below the threshold")

    def __len__(self):
        return len(self.positions)

    @classmethod
    def from_image(cls, positions, M: LabImage) -> "SeedSet":
        """Seeds at fixed positions carrying ``M``'s chroma (error 0)."""
        p = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
        return cls(p, M.a[p[:, 0], p[:, 1]], M.b[p[:, 0], p[:, 1]], np.zeros(len(p)))


def seed_candidates(shape, step: int = 2, mask=None) -> np.ndarray:
    r, c = np.mgrid[0:shape[0]:step, 0:shape[1]:step]
    pos = np.stack([r.ravel(), c.ravel()], 1)
    if mask is not None:
        pos = pos[np.asarray(mask, dtype=bool)[pos[:, 0], pos[:, 1]]]
    return pos


def select_seeds(I: np.ndarray, M: LabImage, threshold: float = 0.06, step: int = 2, mask=None,
                 candidates: np.ndarray | None = None, k0: int = 4, split_sigma: float = 10.0) -> SeedSet:
    """Vote on uniformly sampled candidates: keep ``p`` if ``|I_p - I_c| / I_c < threshold``,
    ``I_c`` being the centre of the ``M``-lightness cluster that ``p`` falls in."""
    I = np.asarray(I, dtype=float)
    valid = np.ones(I.shape, bool) if mask is None else np.asarray(mask, dtype=bool)
    if not valid.any():
        raise EyeError("no valid pixels for seed selection")
    centres, labels = adaptive_kmeans(M.L[valid], k0=k0, split_sigma=split_sigma)
    label_img = np.full(I.shape, -1)
    label_img[valid] = labels
    pos = seed_candidates(I.shape, step, valid) if candidates is None else np.asarray(candidates, np.int64)
    lab = label_img[pos[:, 0], pos[:, 1]]
    pos = pos[lab >= 0]
    Ic = centres[lab[lab >= 0]]
    Ip = I[pos[:, 0], pos[:, 1]]
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.where(Ic > 0, np.abs(Ip - Ic) / Ic, np.inf)
    keep = err < threshold
    p = pos[keep]
    return SeedSet(p, M.a[p[:, 0], p[:, 1]], M.b[p[:, 0], p[:, 1]], err[keep], threshold)


# -- affinities and colour propagation ---------------------------------------------------------


def _shift_valid(shape, dr, dc):
    H, W = shape
    r, c = np.mgrid[0:H, 0:W]
    return (r + dr >= 0) & (r + dr < H) & (c + dc >= 0) & (c + dc < W)


def _window_stats(C: np.ndarray, sigma_floor: float):
    """3x3 mean and standard deviation using only in-image pixels."""
    ones = np.ones_like(C)
    k = np.ones((3, 3))
    n = ndimage.correlate(ones, k, mode="constant")
    s = ndimage.correlate(C, k, mode="constant")
    s2 = ndimage.correlate(C * C, k, mode="constant")
    mu = s / n
    var = np.maximum(s2 / n - mu * mu, 0.0)
    return mu, np.maximum(np.sqrt(var), sigma_floor)


def affinity_matrix(C_L: np.ndarray, offsets=OFFSETS8, sigma_floor: float = 1e-4,
                    weight_floor: float = 1e-6) -> sp.csr_matrix:
    """Row-stochastic neighbour weights ``w_pq = 1 + (C(p) - mu_p)(C(q) - mu_p) / sigma_p^2``,
    clamped below at ``weight_floor`` and normalised over each pixel's in-image neighbours.

    The small positive floor keeps the neighbour graph connected, so every
    pixel is reachable from a seed and the linear systems stay non-singular.
    """
    C = np.asarray(C_L, dtype=float)
    H, W = C.shape
    mu, sigma = _window_stats(C, sigma_floor)
    idx = np.arange(H * W).reshape(H, W)
    rows, cols, vals = [], [], []
    for dr, dc in offsets:
        ok = _shift_valid(C.shape, dr, dc)
        r, c = np.nonzero(ok)
        q = C[r + dr, c + dc]
        w = 1.0 + (C[r, c] - mu[r, c]) * (q - mu[r, c]) / sigma[r, c] ** 2
        rows.append(idx[r, c])
        cols.append(idx[r + dr, c + dc])
        vals.append(np.maximum(w, weight_floor))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    tot = np.bincount(rows, weights=vals, minlength=H * W)
    vals = vals / tot[rows]
    return sp.csr_matrix((vals, (rows, cols)), shape=(H * W, H * W))


def _unique_seeds(seeds: SeedSet, shape):
    flat = seeds.positions[:, 0] * shape[1] + seeds.positions[:, 1]
    u, first = np.unique(flat, return_index=True)
    return u, first


def propagate_color(C_L: np.ndarray, seeds: SeedSet, alpha: float = 100.0):
    """Chroma channels from seeds: each non-seed pixel equals the affinity-weighted mean of its
    neighbours and seeds carry a penalty ``alpha`` toward their value.

    Smoothness rows are written for non-seed pixels only, so the square system
    has the seed values and the harmonic extension as its exact solution.
    """
    if len(seeds) == 0:
        raise EyeError("colour propagation needs at least one seed")
    C_L = np.asarray(C_L, dtype=float)
    H, W = C_L.shape
    n = H * W
    flat, first = _unique_seeds(seeds, C_L.shape)
    is_seed = np.zeros(n, dtype=bool)
    is_seed[flat] = True
    Wm = affinity_matrix(C_L)
    free = np.flatnonzero(~is_seed)
    A = sp.vstack([
        (sp.identity(n, format="csr") - Wm)[free],
        sp.csr_matrix((np.full(len(flat), np.sqrt(alpha)), (np.arange(len(flat)), flat)), shape=(len(flat), n)),
    ]).tocsc()
    # free-pixel rows then seed rows: A is square
    lu = splu(A)
    out = []
    for vals in (seeds.a[first], seeds.b[first]):
        rhs = np.concatenate([np.zeros(len(free)), np.sqrt(alpha) * vals])
        out.append(lu.solve(rhs).reshape(H, W))
    return out[0], out[1]


def colorization_energy(C_L, seeds: SeedSet, channel: np.ndarray, which: str = "a", alpha: float = 100.0) -> float:
    """Value of the propagation energy for a chroma image (smoothness on non-seed pixels)."""
    C_L = np.asarray(C_L, dtype=float)
    x = np.asarray(channel, dtype=float).ravel()
    flat, first = _unique_seeds(seeds, C_L.shape)
    vals = (seeds.a if which == "a" else seeds.b)[first]
    r = x - affinity_matrix(C_L) @ x
    mask = np.ones(x.size, bool)
    mask[flat] = False
    return float((r[mask] ** 2).sum() + alpha * ((x[flat] - vals) ** 2).sum())


# -- iris and pupil -------------------------------------------------------------------------------


@dataclass(frozen=True)
class Circle:
    x: float
    y: float
    r: float

    def contains(self, other: "Circle", tol: float = 1e-9) -> bool:
        return np.hypot(self.x - other.x, self.y - other.y) + other.r <= self.r + tol


def eye_outline(landmarks: np.ndarray, samples: int = 24) -> np.ndarray:
    """Closed outline through six boundary points (corner, two upper, corner, two lower).

    Each lid is the cubic through its four points, parametrised by x.
    """
    p = np.asarray(landmarks, dtype=float).reshape(6, 2)
    upper = p[[0, 1, 2, 3]]
    lower = p[[3, 4, 5, 0]]
    out = []
    for seg in (upper, lower):
        x = seg[:, 0]
        if len(np.unique(x)) < 4:
            out.append(seg)
            continue
        coef = np.polyfit(x, seg[:, 1], 3)
        xs = np.linspace(seg[0, 0], seg[-1, 0], samples, endpoint=False)
        out.append(np.column_stack([xs, np.polyval(coef, xs)]))
    return np.vstack(out)


def eye_openness(landmarks: np.ndarray) -> float:
    """Lid gap relative to eye width."""
    p = np.asarray(landmarks, dtype=float).reshape(6, 2)
    width = np.linalg.norm(p[3] - p[0])
    gap = 0.5 * (np.linalg.norm(p[1] - p[5]) + np.linalg.norm(p[2] - p[4]))
    return float(gap / max(width, 1e-9))


def circular_response(I: np.ndarray, cx: np.ndarray, cy: np.ndarray, radii: np.ndarray, angles: np.ndarray,
                      sigma: float = 1.0) -> np.ndarray:
    """Gaussian-smoothed radial derivative of the mean intensity on circles (arcs).

    Shapes: centres ``(C,)``, radii ``(R,)``; returns ``(C, R)`` with the derivative
    evaluated between consecutive radii (last column repeats).
    """
    ca, sa = np.cos(angles), np.sin(angles)
    x = cx[:, None, None] + radii[None, :, None] * ca[None, None, :]
    y = cy[:, None, None] + radii[None, :, None] * sa[None, None, :]
    v, _ = bilinear_sample(I, x, y)
    line = v.mean(axis=2)  # (C, R)
    d = np.diff(line, axis=1) / np.diff(radii)[None, :]
    d = np.concatenate([d, d[:, -1:]], axis=1)
    if sigma > 0:
        d = ndimage.gaussian_filter1d(d, sigma, axis=1, mode="nearest")
    return d


def _search(I, box, radii, angles, sigma, step):
    x0, y0, x1, y1 = box
    xs = np.arange(x0, x1 + 1e-9, step)
    ys = np.arange(y0, y1 + 1e-9, step)
    X, Y = np.meshgrid(xs, ys)
    cx, cy = X.ravel(), Y.ravel()
    resp = np.zeros((len(cx), len(radii)))
    for s in range(0, len(cx), 512):
        resp[s:s + 512] = circular_response(I, cx[s:s + 512], cy[s:s + 512], radii, angles, sigma)
    k = int(np.argmax(resp))
    ci, ri = divmod(k, len(radii))
    # the derivative between radii[ri] and radii[ri+1] marks an edge at their midpoint
    r = radii[ri] + 0.5 * (radii[1] - radii[0])
    return Circle(float(cx[ci]), float(cy[ci]), float(r)), float(resp[ci, ri])


def locate_iris_pupil(I: np.ndarray, eye_landmarks: np.ndarray, min_openness: float = 0.12,
                      min_response: float = 0.5, iris_range=(0.12, 0.5), pupil_range=(0.03, 0.2),
                      sigma: float = 1.0, arc_deg: float = 20.0, iris_offset: float = 2.0):
    """Integro-differential search for the pupil (full circles, dark inside) and then for the
    iris around it (near-horizontal arcs only, since the lids usually cover its top and bottom).

    Radii ranges are fractions of the eye width measured between the corner
    landmarks; the iris centre may sit up to ``iris_offset`` pixels from the pupil's.
    """
    I = np.asarray(I, dtype=float)
    p = np.asarray(eye_landmarks, dtype=float).reshape(6, 2)
    if eye_openness(p) < min_openness:
        raise EyeClosedError("eye closed")
    width = np.linalg.norm(p[3] - p[0])
    lo, hi = p.min(0), p.max(0)
    full = np.linspace(0, 2 * np.pi, 48, endpoint=False)
    lateral = np.deg2rad(np.concatenate([np.linspace(-arc_deg, arc_deg, 13),
                                         np.linspace(180 - arc_deg, 180 + arc_deg, 13)]))
    box = (lo[0] + 0.1 * width, lo[1], hi[0] - 0.1 * width, hi[1])
    pr = np.arange(max(1.5, pupil_range[0] * width), pupil_range[1] * width + 1e-9, 0.5)
    pupil, resp = _search(I, box, pr, full, sigma, 1.0)
    pupil, resp = _search(I, (pupil.x - 1, pupil.y - 1, pupil.x + 1, pupil.y + 1),
                          np.arange(max(1.5, pupil.r - 2), pupil.r + 2.01, 0.25), full, sigma, 0.25)
    if resp < min_response:
        raise EyeError("no circular edge")
    ir = np.arange(max(1.3 * pupil.r, iris_range[0] * width), iris_range[1] * width + 1e-9, 0.5)
    if len(ir) < 2:
        raise EyeError("no circular edge")
    d = iris_offset
    iris, iresp = _search(I, (pupil.x - d, pupil.y - d, pupil.x + d, pupil.y + d), ir, lateral, sigma, 0.5)
    if iresp < min_response:
        raise EyeError("no circular edge")
    if not iris.contains(pupil):
        iris = Circle(iris.x, iris.y, np.hypot(iris.x - pupil.x, iris.y - pupil.y) + pupil.r + 0.5)
    return iris, pupil


@dataclass
class EyeSegmentation:
    labels: np.ndarray  # (H, W) of SKIN / SCLERA / IRIS / PUPIL
    iris: Circle
    pupil: Circle

    def __post_init__(self):
        if not self.iris.contains(self.pupil):
            raise ValueError("pupil circle must lie inside the iris circle")

    @property
    def omega(self) -> np.ndarray:
        return self.labels != SKIN


def segment_eye(shape, eye_landmarks: np.ndarray, iris: Circle, pupil: Circle) -> EyeSegmentation:
    H, W = shape
    inside = fill_polygon(shape, eye_outline(eye_landmarks))
    r, c = np.mgrid[0:H, 0:W]
    labels = np.where(inside, SCLERA, SKIN)
    labels[inside & (np.hypot(c - iris.x, r - iris.y) <= iris.r)] = IRIS
    labels[inside & (np.hypot(c - pupil.x, r - pupil.y) <= pupil.r)] = PUPIL
    return EyeSegmentation(labels, iris, pupil)


# -- refinement ---------------------------------------------------------------------------------


def class_transfer(C: LabImage, reference: LabImage, seg: EyeSegmentation,
                   reference_seg: EyeSegmentation | None = None) -> LabImage:
    """Per-class, per-channel mean/std matching of ``C`` to ``reference`` inside the eye classes."""
    rseg = seg if reference_seg is None else reference_seg
    out = [C.L.copy(), C.a.copy(), C.b.copy()]
    for k in (SCLERA, IRIS, PUPIL):
        m = seg.labels == k
        mr = rseg.labels == k
        if not m.any() or not mr.any():
            continue
        for ch, (src, ref) in enumerate(zip((C.L, C.a, C.b), (reference.L, reference.a, reference.b))):
            v, vr = src[m], ref[mr]
            s = v.std()
            out[ch][m] = vr.mean() if s == 0 else (v - v.mean()) * (vr.std() / s) + vr.mean()
    return LabImage(*out)


def _poisson_rows(shape, omega: np.ndarray, C: np.ndarray):
    """Rows of ``|N_p| x_p - sum_{q in N_p, Omega} x_q = sum_{q in N_p, not Omega} C_q + sum_q (C_p - C_q)``."""
    H, W = shape
    idx = np.arange(H * W).reshape(H, W)
    pr, pc = np.nonzero(omega)
    row_of = -np.ones(H * W, dtype=np.int64)
    row_of[idx[pr, pc]] = np.arange(len(pr))
    rows, cols, vals = [], [], []
    rhs = np.zeros(len(pr))
    deg = np.zeros(len(pr))
    for dr, dc in OFFSETS4:
        qr, qc = pr + dr, pc + dc
        ok = (qr >= 0) & (qr < H) & (qc >= 0) & (qc < W)
        ri = np.flatnonzero(ok)
        deg[ri] += 1
        q_in = omega[qr[ri], qc[ri]]
        rows.append(ri[q_in])
        cols.append(idx[qr[ri[q_in]], qc[ri[q_in]]])
        vals.append(-np.ones(int(q_in.sum())))
        out_i = ri[~q_in]
        np.add.at(rhs, out_i, C[qr[out_i], qc[out_i]])
        np.add.at(rhs, ri, C[pr[ri], pc[ri]] - C[qr[ri], qc[ri]])
    rows.append(np.arange(len(pr)))
    cols.append(idx[pr, pc])
    vals.append(deg)
    B = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(len(pr), H * W))
    return B, rhs


@dataclass
class RefineResult:
    image: LabImage  # C''
    matched: LabImage  # C' (after per-class transfer)
    energies: dict = field(default_factory=dict)  # per channel: data, smooth, boundary, total, total_at_matched


def refine_system(C_ch: np.ndarray, Cp_ch: np.ndarray, C_L: np.ndarray, omega: np.ndarray, seed_flat: np.ndarray,
                  alpha1: float, alpha2: float):
    """Sparse blocks ``{name: (weight, M, r)}`` of the refinement energy for one channel.

    Unknowns are the eye-region pixels in raster order; pixels outside the region
    enter the smoothness rows at their class-matched value and the gradient rows
    at their original value.  ``seed_flat`` holds flat indices of seeds inside the region.
    """
    H, W = C_ch.shape
    n = H * W
    om = omega.ravel()
    unk = np.flatnonzero(om)
    col = -np.ones(n, dtype=np.int64)
    col[unk] = np.arange(len(unk))
    S = sp.csr_matrix((np.ones(len(seed_flat)), (np.arange(len(seed_flat)), col[seed_flat])),
                      shape=(len(seed_flat), len(unk)))
    Ls = (sp.identity(n, format="csr") - affinity_matrix(C_L))[unk]
    smooth_rhs = -(Ls[:, ~om] @ Cp_ch.ravel()[~om])
    B, b_rhs = _poisson_rows(C_ch.shape, omega, C_ch)
    return {
        "data": (1.0, S, Cp_ch.ravel()[seed_flat]),
        "smooth": (alpha1, Ls[:, om].tocsr(), smooth_rhs),
        "boundary": (alpha2, B[:, unk].tocsr(), b_rhs),
    }


def _term_values(blocks, x):
    out = {k: float(np.sum((M @ x - r) ** 2)) for k, (_, M, r) in blocks.items()}
    out["total"] = float(sum(w * out[k] for k, (w, _, _) in blocks.items()))
    return out


def refine_eye(C: LabImage, reference: LabImage, seg: EyeSegmentation, seeds=None, alpha1: float = 1.0,
               alpha2: float = 0.5, reference_seg: EyeSegmentation | None = None,
               seed_threshold: float = 0.06, seed_step: int = 2) -> RefineResult:
    """Remove chroma leakage inside the eye region: per-class statistics transfer, then one
    sparse solve per channel balancing seed fidelity, affinity smoothness and gradient preservation.

    ``seeds`` is a :class:`SeedSet` or an ``(N, 2)`` array of (row, col) positions;
    only seeds inside the eye region matter.  By default they are voted on the
    class-matched image itself.  Pixels outside the region keep their class-matched
    value (equal to the input there); region pixels constrained by no term do too.
    """
    omega = seg.omega
    if not omega.any():
        raise EyeError("empty eye region")
    Cp = class_transfer(C, reference, seg, reference_seg)
    if seeds is None:
        seeds = select_seeds(Cp.L, Cp, threshold=seed_threshold, step=seed_step, mask=omega)
    pos = seeds.positions if isinstance(seeds, SeedSet) else np.asarray(seeds, dtype=np.int64).reshape(-1, 2)
    pos = pos[omega[pos[:, 0], pos[:, 1]]] if len(pos) else pos
    if len(pos) == 0:
        raise EyeError("refinement needs at least one seed inside the eye region")
    H, W = C.L.shape
    seed_flat = np.unique(pos[:, 0] * W + pos[:, 1])
    unk = np.flatnonzero(omega.ravel())
    out, energies = [Cp.L.copy(), Cp.a.copy(), Cp.b.copy()], {}
    lu = free = None
    for k, (name, c, cp) in enumerate(zip("Lab", (C.L, C.a, C.b), (Cp.L, Cp.a, Cp.b))):
        blocks = refine_system(c, cp, C.L, omega, seed_flat, alpha1, alpha2)
        rhs = sum(w * (M.T @ r) for w, M, r in blocks.values() if w > 0)
        if lu is None:  # the system matrix does not depend on the channel
            N = sp.csc_matrix(sum(w * (M.T @ M) for w, M, _ in blocks.values() if w > 0))
            free = N.diagonal() <= 0
            lu = splu(N + sp.diags(free.astype(float), format="csc"))
        x0 = cp.ravel()[unk]
        x = lu.solve(rhs + free * x0)
        e = _term_values(blocks, x)
        e["total_at_matched"] = _term_values(blocks, x0)["total"]
        energies[name] = e
        out[k].ravel()[unk] = x
    return RefineResult(LabImage(*out), Cp, energies)


def class_chroma_error(img: LabImage, seg: EyeSegmentation, reference: LabImage,
                       reference_seg: EyeSegmentation | None = None) -> float:
    """Mean over eye classes of the distance between class-mean (a, b) of ``img`` and ``reference``."""
    rseg = seg if reference_seg is None else reference_seg
    errs = []
    for k in (SCLERA, IRIS, PUPIL):
        m, mr = seg.labels == k, rseg.labels == k
        if m.any() and mr.any():
            errs.append(np.hypot(img.a[m].mean() - reference.a[mr].mean(), img.b[m].mean() - reference.b[mr].mean()))
    return float(np.mean(errs)) if errs else 0.0
