"""Hull-defect measurement: how far a point set is from filling its convex hull.

The defect is the maximum, over probe points spread through the hull of the
set, of the distance to the nearest data point.  A sampled convex region has
defect on the order of the sampling spacing; a crescent or split region shows
a defect on the order of the hole size.  Affinely degenerate sets (e.g. near
collinear images) are probed inside their affine hull and charged extra for
any off-subspace deviation.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, QhullError, cKDTree

Array = np.ndarray


def hull_defect(points: Array, probe_spacing: float, max_probes_per_axis: int = 96) -> dict:
    """Defect of ``points`` with probes at roughly ``probe_spacing``.

    Returns {"defect": float, "probe": worst probe location, "rank": int}.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2:
        raise ValueError("points must be (N, n)")
    n = pts.shape[1]
    if pts.shape[0] <= 1:
        return {"defect": 0.0, "probe": None, "rank": 0}

    center = np.mean(pts, axis=0)
    shifted = pts - center
    # Principal axes; tiny singular values flag affine degeneracy.
    _, svals, vt = np.linalg.svd(shifted, full_matrices=True)
    span = float(svals[0]) if svals.size else 0.0
    if span == 0.0:
        return {"defect": 0.0, "probe": pts[0], "rank": 0}
    rank = int(np.sum(svals > max(1e-12 * span, 0.25 * probe_spacing * np.sqrt(pts.shape[0]))))
    rank = max(rank, 1)

    if rank < n:
        coords = shifted @ vt[:rank].T
        off = shifted @ vt[rank:].T
        off_dev = float(np.max(np.abs(off))) if off.size else 0.0
        sub = hull_defect(coords, probe_spacing, max_probes_per_axis)
        probe = None
        if sub["probe"] is not None:
            probe = center + np.atleast_1d(sub["probe"]) @ vt[:rank]
        return {"defect": max(sub["defect"], off_dev), "probe": probe, "rank": rank}

    if n == 1:
        order = np.argsort(pts[:, 0], kind="stable")
        xs = pts[order, 0]
        gaps = np.diff(xs)
        if gaps.size == 0:
            return {"defect": 0.0, "probe": pts[0], "rank": 1}
        k = int(np.argmax(gaps))
        return {
            "defect": float(gaps[k] / 2.0),
            "probe": np.array([0.5 * (xs[k] + xs[k + 1])]),
            "rank": 1,
        }

    try:
        hull = ConvexHull(pts)
    except QhullError:
        # Nearly degenerate in full dimension; measure along principal axes.
        coords = shifted @ vt[: n - 1].T
        off = shifted @ vt[n - 1 :].T
        sub = hull_defect(coords, probe_spacing, max_probes_per_axis)
        return {"defect": max(sub["defect"], float(np.max(np.abs(off)))), "probe": None, "rank": n - 1}

    verts = pts[hull.vertices]
    lo = np.min(verts, axis=0)
    hi = np.max(verts, axis=0)
    axes = []
    for i in range(n):
        width = hi[i] - lo[i]
        count = int(np.ceil(width / probe_spacing)) + 1
        count = min(max(count, 2), max_probes_per_axis)
        axes.append(np.linspace(lo[i], hi[i], count))
    mesh = np.meshgrid(*axes, indexing="ij")
    probes = np.stack([mm.ravel() for mm in mesh], axis=-1)

    tri = Delaunay(verts)
    inside = tri.find_simplex(probes) >= 0
    probes = probes[inside]
    if probes.shape[0] == 0:
        return {"defect": 0.0, "probe": None, "rank": n}
    dist, _ = cKDTree(pts).query(probes)
    k = int(np.argmax(dist))
    return {"defect": float(dist[k]), "probe": probes[k], "rank": n}


def collinearity_defect(points: Array) -> float:
    """Max distance of the points from the chord through their diameter pair.

    Gaps along the chord do not count; this measures shape (bending or
    splitting off a line), the discriminator for one-dimensional normal
    images sampled at grid resolution.
    """
    pts = np.asarray(points, dtype=float)
    if pts.shape[0] <= 2:
        return 0.0
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    i, j = np.unravel_index(int(np.argmax(d2)), d2.shape)
    a, b = pts[i], pts[j]
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return 0.0
    t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return float(np.max(np.linalg.norm(pts - proj, axis=-1)))
