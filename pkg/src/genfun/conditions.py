"""Regularity condition checks: A1, A1*, A2, and the weak/strict tensor
conditions A3w/A3s in both second-difference and segment form.

Segment checks test midpoint convexity of f(theta) = (A xi, xi)(x0, u0,
p_theta) over all grid triples (a, (a+b)/2, b), not only adjacent ones, so
non-local concavity is caught; the strict check normalizes the midpoint defect
into a uniform-convexity modulus delta_hat.  Witness tie-breaking is smallest
lexicographic (segment index, triple index, xi index) and every reduction is
order-stable, so reports are deterministic for a fixed seed regardless of the
worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import GeneratingFunction, eval_jet, sample_fiber_points
from .errors import NotInU
from .implicit import (JetPoint, eval_gstar, jets_from_fibers, matrix_A_batch,
                       matrix_E_batch, sample_jets, solve_YZ_batch)
from .parallel import ordered_map
from .params import DEFAULTS, Defaults, VACUOUS_MARGIN
from .reports import ConditionReport, Verdict

Array = np.ndarray


@dataclass(frozen=True)
class SegmentConfig:
    """Datum (x0, u0, [p0, p1]) with a uniform theta grid of m intervals."""

    x0: Array
    u0: float
    p0: Array
    p1: Array
    theta_m: int = DEFAULTS.theta_m

    def thetas(self) -> Array:
        return np.arange(self.theta_m + 1) / self.theta_m

    def p_theta(self) -> Array:
        t = self.thetas()[:, None]
        return (1.0 - t) * self.p0 + t * self.p1


def _perp_directions(direction: Array, count: int, seed: int) -> Array:
    """Unit vectors orthogonal to ``direction``.

    For n = 2 the complement is one-dimensional and a single vector suffices;
    for n >= 3, ``count`` seeded unit vectors.
    """
    d = np.asarray(direction, dtype=float)
    n = d.size
    nd = np.linalg.norm(d)
    if nd == 0.0:
        raise ValueError("degenerate segment: p1 == p0")
    d = d / nd
    if n == 1:
        return np.zeros((0, 1))
    if n == 2:
        return np.array([[-d[1], d[0]]])
    rng = np.random.default_rng(seed)
    vecs = []
    while len(vecs) < count:
        v = rng.normal(size=n)
        v -= (v @ d) * d
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            vecs.append(v / norm)
    return np.array(vecs)


def _orthonormalize(xi: Array, eta: Array):
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    xi = xi / np.linalg.norm(xi)
    eta = eta - (eta @ xi) * xi
    norm = np.linalg.norm(eta)
    if norm < 1e-14:
        raise ValueError("eta is parallel to xi")
    return xi, eta / norm


def _midpoint_triples(m: int) -> Array:
    """All (a, mid, b) index triples with a < b, a + b even; fixed order."""
    triples = []
    for i in range(m + 1):
        for j in range(i + 2, m + 1, 2):
            triples.append((i, (i + j) // 2, j))
    return np.array(triples, dtype=int)


def segment_profile(gf: GeneratingFunction, seg: SegmentConfig, xis: Array, defaults: Defaults = DEFAULTS):
    """f[k, j] = (A xi_j, xi_j) at p_theta_k; also the solve-failure fraction."""
    pth = seg.p_theta()
    m1 = pth.shape[0]
    x = np.broadcast_to(seg.x0, (m1, gf.dim))
    u = np.full(m1, seg.u0)
    A, converged = matrix_A_batch(gf, x, u, pth, defaults=defaults)
    f = np.einsum("kij,si,sj->ks", A, xis, xis)
    fail_fraction = float(np.mean(~converged))
    f = np.where(converged[:, None], f, np.nan)
    return f, fail_fraction


def check_A2(
    gf: GeneratingFunction, samples: int = 1000, seed: int = 0, defaults: Defaults = DEFAULTS
) -> ConditionReport:
    """Nondegeneracy margin min |det E| / (1 + ||E||^n) over seeded points."""
    x, y, z = sample_fiber_points(gf, samples, seed)
    E, detE = matrix_E_batch(gf, x, y, z, defaults=defaults)
    norm = np.sqrt(np.sum(E * E, axis=(-2, -1)))
    ratio = np.abs(detE) / (1.0 + norm ** gf.dim)
    k = int(np.argmin(ratio))
    margin = float(ratio[k])
    verdict = Verdict.HOLDS if margin > defaults.a2_tol else Verdict.FAILS
    witness = None
    if verdict == Verdict.FAILS:
        witness = {"x": x[k], "y": y[k], "z": float(z[k]), "det_E": float(detE[k])}
    return ConditionReport(
        condition_id="A2", verdict=verdict, margin=margin, witness=witness,
        samples_used=samples, seed=seed,
        extras={"min_abs_det": float(np.min(np.abs(detE)))},
    )


def _fiber_grid(gf: GeneratingFunction, x: Array, samples: int):
    """Centered tensor grid over the (y, z) fiber at fixed x.

    A regular grid (rather than iid draws) makes exact image collisions of
    mirror-symmetric folds land on sample pairs; iid sampling cannot reach the
    collision tolerance in a >= 3-dimensional fiber at desk-scale counts.
    """
    gamma = gf.gamma
    n = gf.dim
    per_axis = max(2, int(round(samples ** (1.0 / (n + 1)))))
    yb = gamma.shrunk(gamma.y_box)
    axes = [np.linspace(yb[i, 0], yb[i, 1], per_axis) for i in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    y = np.stack([mm.ravel() for mm in mesh], axis=-1)
    xx = np.broadcast_to(x, y.shape)
    lo, hi = gamma.z_interval(xx, y)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (y.shape[0],)) + gamma.margin
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (y.shape[0],)) - gamma.margin
    t = np.linspace(0.0, 1.0, per_axis)
    y = np.repeat(y, per_axis, axis=0)
    z = (lo[:, None] + t[None, :] * (hi - lo)[:, None]).ravel()
    xx = np.broadcast_to(x, y.shape)
    ok = gamma.contains(xx, y, z)
    return y[ok], z[ok]


def _collision_scan(domain: Array, image: Array, sep_tol: float, coll_tol: float):
    """Pairs close in image but separated in domain (infinity norms).

    Returns (margin, witness_pair).  margin = min over image-close pairs of
    sep_tol - domain_distance; full slack sep_tol when no pair is image-close.
    """
    tree = cKDTree(image)
    pairs = tree.query_pairs(r=coll_tol, p=np.inf, output_type="ndarray")
    if pairs.size == 0:
        return sep_tol, None
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    dom_dist = np.max(np.abs(domain[pairs[:, 0]] - domain[pairs[:, 1]]), axis=-1)
    values = sep_tol - dom_dist
    k = int(np.argmin(values))
    margin = float(values[k])
    witness = None
    if margin < 0.0:
        i, j = int(pairs[k, 0]), int(pairs[k, 1])
        witness = {
            "index_a": i, "index_b": j,
            "domain_a": domain[i], "domain_b": domain[j],
            "image_a": image[i], "image_b": image[j],
            "domain_distance": float(dom_dist[k]),
        }
    return margin, witness


def check_A1_sampled(
    gf: GeneratingFunction, x: Array, samples: int = 10000, seed: int = 0,
    defaults: Defaults = DEFAULTS,
) -> ConditionReport:
    """Sampled injectivity of (y, z) -> (g, g_x)(x, y, z) at fixed x.

    Evidence, not proof: flags two fiber samples separated by more than
    sep_tol that map within coll_tol in (u, p).
    """
    x = np.asarray(x, dtype=float)
    y, z = _fiber_grid(gf, x, samples)
    xx = np.broadcast_to(x, y.shape)
    u, p = jets_from_fibers(gf, xx, y, z, defaults=defaults)
    domain = np.column_stack([y, z])
    image = np.column_stack([u, p])
    margin, witness = _collision_scan(domain, image, defaults.sep_tol, defaults.coll_tol)
    verdict = Verdict.HOLDS if margin >= 0.0 else Verdict.FAILS
    return ConditionReport(
        condition_id="A1", verdict=verdict, margin=margin, witness=witness,
        samples_used=int(y.shape[0]), seed=seed, extras={"x": x.tolist()},
    )


def check_A1star_sampled(
    gf: GeneratingFunction, y: Array, z: float, samples: int = 10000, seed: int = 0,
    defaults: Defaults = DEFAULTS,
) -> ConditionReport:
    """Sampled injectivity of x -> Q(x, y, z) at a fixed (y, z) fiber."""
    gamma = gf.gamma
    y = np.asarray(y, dtype=float)
    n = gf.dim
    per_axis = max(2, int(round(samples ** (1.0 / n))))
    xb = gamma.shrunk(gamma.x_box)
    axes = [np.linspace(xb[i, 0], xb[i, 1], per_axis) for i in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    x = np.stack([mm.ravel() for mm in mesh], axis=-1)
    zz = np.full(x.shape[0], float(z))
    ok = gamma.contains(x, np.broadcast_to(y, x.shape), zz)
    x = x[ok]
    jet = eval_jet(gf, x, np.broadcast_to(y, x.shape), np.full(x.shape[0], float(z)), defaults=defaults)
    q = -jet.gy / np.asarray(jet.gz)[..., None]
    margin, witness = _collision_scan(x, q, defaults.sep_tol, defaults.coll_tol)
    verdict = Verdict.HOLDS if margin >= 0.0 else Verdict.FAILS
    return ConditionReport(
        condition_id="A1*", verdict=verdict, margin=margin, witness=witness,
        samples_used=int(x.shape[0]), seed=seed,
        extras={"y": y.tolist(), "z": float(z)},
    )


def mtw_form(
    gf: GeneratingFunction, jet: JetPoint, xi: Array, eta: Array, h: float | None = None,
    defaults: Defaults = DEFAULTS,
) -> float:
    """Discrete D^2_pp form: central second difference of (A xi, xi) along eta.

    eta is projected orthogonal to xi and both are normalized; nonnegativity
    over all such pairs is the tensor form of the weak condition.
    """
    xi, eta = _orthonormalize(xi, eta)
    if h is None:
        h = defaults.h_mtw * max(1.0, float(np.linalg.norm(jet.p)))
    x = np.broadcast_to(jet.x, (3, gf.dim))
    u = np.full(3, jet.u)
    p = np.stack([jet.p + h * eta, jet.p, jet.p - h * eta])
    A, converged = matrix_A_batch(gf, x, u, p, defaults=defaults)
    if not np.all(converged):
        raise NotInU(f"{gf.name}: tensor stencil point left the jet set")
    q = np.einsum("kij,i,j->k", A, xi, xi)
    return float((q[0] - 2.0 * q[1] + q[2]) / (h * h))


def mtw_scan(
    gf: GeneratingFunction,
    count: int,
    seed: int,
    h: float | None = None,
    defaults: Defaults = DEFAULTS,
):
    """Batched tensor scan: mtw_form at seeded jets with seeded (xi, eta) pairs.

    Returns (values, jets_x, jets_u, jets_p, xi, eta) restricted to jets whose
    stencil solved.
    """
    x, u, p, _, _ = sample_jets(gf, count, seed, defaults=defaults)
    rng = np.random.default_rng(seed + 1)
    n = gf.dim
    xi = rng.normal(size=(count, n))
    xi /= np.linalg.norm(xi, axis=-1, keepdims=True)
    eta = rng.normal(size=(count, n))
    eta -= np.sum(eta * xi, axis=-1, keepdims=True) * xi
    eta /= np.linalg.norm(eta, axis=-1, keepdims=True)
    if h is None:
        hs = defaults.h_mtw * np.maximum(1.0, np.linalg.norm(p, axis=-1))
    else:
        hs = np.full(count, float(h))
    Ap, cp = matrix_A_batch(gf, x, u, p + hs[:, None] * eta, defaults=defaults)
    A0, c0 = matrix_A_batch(gf, x, u, p, defaults=defaults)
    Am, cm = matrix_A_batch(gf, x, u, p - hs[:, None] * eta, defaults=defaults)
    ok = cp & c0 & cm
    quad = lambda A: np.einsum("kij,ki,kj->k", A, xi, xi)
    vals = (quad(Ap) - 2.0 * quad(A0) + quad(Am)) / (hs * hs)
    return vals[ok], x[ok], u[ok], p[ok], xi[ok], eta[ok]


def check_A3w(
    gf: GeneratingFunction,
    seg: SegmentConfig,
    xi_samples: int | None = None,
    seed: int = 0,
    defaults: Defaults = DEFAULTS,
) -> ConditionReport:
    """Midpoint convexity of (A xi, xi) along the segment, xi orthogonal to it.

    margin = min over triples and xi of (f(a) + f(b))/2 - f(mid), plus the
    scale-relative slack conv_tol; a constant profile therefore reports margin
    equal to conv_tol exactly.
    """
    if gf.dim == 1:
        return ConditionReport(
            condition_id="A3w", verdict=Verdict.HOLDS, margin=VACUOUS_MARGIN,
            samples_used=0, seed=seed, vacuous=True,
        )
    xis = _perp_directions(seg.p1 - seg.p0, xi_samples or defaults.xi_samples, seed)
    f, fail_fraction = segment_profile(gf, seg, xis, defaults=defaults)
    if fail_fraction > defaults.inconclusive_fail_fraction:
        return ConditionReport(
            condition_id="A3w", verdict=Verdict.INCONCLUSIVE, margin=float("nan"),
            samples_used=f.size, seed=seed, extras={"fail_fraction": fail_fraction},
        )
    triples = _midpoint_triples(seg.theta_m)
    defect = 0.5 * (f[triples[:, 0]] + f[triples[:, 2]]) - f[triples[:, 1]]  # (T, S)
    scale = max(1.0, float(np.nanmax(np.abs(f))))
    conv_tol = defaults.conv_tol * scale
    flat = np.where(np.isnan(defect), np.inf, defect).ravel()  # C-order: triple-major
    k = int(np.argmin(flat))
    raw = float(flat[k])
    margin = raw + conv_tol
    verdict = Verdict.HOLDS if margin >= 0.0 else Verdict.FAILS
    witness = None
    if verdict == Verdict.FAILS:
        ti, si = divmod(k, xis.shape[0])
        a, mid, b = triples[ti]
        thetas = seg.thetas()
        witness = {
            "theta_a": float(thetas[a]), "theta_mid": float(thetas[mid]),
            "theta_b": float(thetas[b]), "triple_index": int(ti),
            "xi": xis[si], "xi_index": int(si), "defect": raw,
            "x0": seg.x0, "u0": float(seg.u0), "p0": seg.p0, "p1": seg.p1,
        }
    return ConditionReport(
        condition_id="A3w", verdict=verdict, margin=margin, witness=witness,
        samples_used=int(f.size), seed=seed,
        extras={"conv_tol": conv_tol, "fail_fraction": fail_fraction},
    )


def check_A3s(
    gf: GeneratingFunction,
    region: list,
    seed: int = 0,
    defaults: Defaults = DEFAULTS,
) -> ConditionReport:
    """Uniform-convexity modulus over a family of segments.

    delta_hat = min over segments, xi, triples of the normalized second
    difference 2 [(f(a) + f(b))/2 - f(mid)] / ((b - a)^2 / 4 |p1 - p0|^2);
    the verdict holds iff delta_hat exceeds a3s_tol.
    """
    if not region:
        raise ValueError("region must contain at least one segment")
    if gf.dim == 1:
        return ConditionReport(
            condition_id="A3s", verdict=Verdict.HOLDS, margin=VACUOUS_MARGIN,
            samples_used=0, seed=seed, vacuous=True,
        )

    def one(seg_index_seg):
        seg_index, seg = seg_index_seg
        xis = _perp_directions(seg.p1 - seg.p0, defaults.xi_samples, seed + seg_index)
        f, fail_fraction = segment_profile(gf, seg, xis, defaults=defaults)
        triples = _midpoint_triples(seg.theta_m)
        span2 = float(np.sum((seg.p1 - seg.p0) ** 2))
        widths = ((triples[:, 2] - triples[:, 0]) / seg.theta_m) ** 2 / 4.0
        defect = 0.5 * (f[triples[:, 0]] + f[triples[:, 2]]) - f[triples[:, 1]]
        quotients = 2.0 * defect / (widths[:, None] * span2)
        return quotients, fail_fraction, triples, xis

    results = ordered_map(one, list(enumerate(region)))
    worst = None
    total_fail = 0.0
    count = 0
    for seg_index, (quotients, fail_fraction, triples, xis) in enumerate(results):
        total_fail += fail_fraction
        count += quotients.size
        flat = np.where(np.isnan(quotients), np.inf, quotients).ravel()
        k = int(np.argmin(flat))
        val = float(flat[k])
        if worst is None or val < worst[0]:
            worst = (val, seg_index, k, triples, xis)
    mean_fail = total_fail / len(region)
    if mean_fail > defaults.inconclusive_fail_fraction:
        return ConditionReport(
            condition_id="A3s", verdict=Verdict.INCONCLUSIVE, margin=float("nan"),
            samples_used=count, seed=seed, extras={"fail_fraction": mean_fail},
        )
    delta_hat, seg_index, k, triples, xis = worst
    seg = region[seg_index]
    ti, si = divmod(k, xis.shape[0])
    a, mid, b = triples[ti]
    thetas = seg.thetas()
    verdict = Verdict.HOLDS if delta_hat > defaults.a3s_tol else Verdict.FAILS
    witness = {
        "segment_index": int(seg_index),
        "theta_a": float(thetas[a]), "theta_mid": float(thetas[mid]), "theta_b": float(thetas[b]),
        "xi": xis[si], "xi_index": int(si),
        "x0": seg.x0, "u0": float(seg.u0), "p0": seg.p0, "p1": seg.p1,
        "delta_hat": float(delta_hat),
    }
    return ConditionReport(
        condition_id="A3s", verdict=verdict, margin=float(delta_hat - defaults.a3s_tol),
        witness=witness, samples_used=count, seed=seed,
        extras={"delta_hat": float(delta_hat), "fail_fraction": mean_fail},
    )


def sample_segments(
    gf: GeneratingFunction,
    count: int,
    seed: int,
    theta_m: int | None = None,
    reach: float = 0.35,
    defaults: Defaults = DEFAULTS,
    max_tries: int = 60,
) -> list:
    """Seeded segment configs (x0, u0, [p0, p1]) verified to solve on the grid.

    p-endpoints come from two fiber points over the same x0 (the second drawn a
    bounded y-step away), so both ends lie in the jet set by construction; the
    interior is certified by solving at every grid theta.
    """
    m = theta_m or defaults.theta_m
    rng = np.random.default_rng(seed)
    gamma = gf.gamma
    yb = gamma.shrunk(gamma.y_box)
    width = yb[:, 1] - yb[:, 0]
    out = []
    for _ in range(max_tries):
        if len(out) >= count:
            break
        need = count - len(out)
        x, y0, z0 = sample_fiber_points(gf, need, int(rng.integers(2**63)))
        step = rng.uniform(-reach, reach, size=y0.shape) * width
        y1 = np.clip(y0 + step, yb[:, 0], yb[:, 1])
        jet0 = eval_jet(gf, x, y0, z0, defaults=defaults)
        u0 = jet0.g
        z1, valid = _lift(gf, x, y1, u0, defaults)
        if not np.any(valid):
            continue
        x, y0, z0, y1, z1, u0 = x[valid], y0[valid], z0[valid], y1[valid], z1[valid], u0[valid]
        p0 = jet0.gx[valid]
        jet1 = eval_jet(gf, x, y1, z1, defaults=defaults, check_membership=False)
        p1 = jet1.gx
        span = np.linalg.norm(p1 - p0, axis=-1)
        keep = span > 1e-6
        for i in np.nonzero(keep)[0]:
            seg = SegmentConfig(x0=x[i], u0=float(u0[i]), p0=p0[i], p1=p1[i], theta_m=m)
            pth = seg.p_theta()
            xs = np.broadcast_to(seg.x0, (m + 1, gf.dim))
            us = np.full(m + 1, seg.u0)
            _, _, _, _, conv, _ = solve_YZ_batch(gf, xs, us, pth, defaults=defaults)
            if np.all(conv):
                out.append(seg)
                if len(out) >= count:
                    break
    if len(out) < count:
        raise NotInU(f"{gf.name}: could not sample {count} segments inside the jet set")
    return out


def _lift(gf, x, y, u, defaults):
    from .implicit import eval_gstar_batch

    return eval_gstar_batch(gf, x, y, u, defaults=defaults)


def witness_subsegment(seg: SegmentConfig, witness: dict, theta_m: int | None = None) -> SegmentConfig:
    """Sub-segment spanned by a failing triple's outer thetas.

    The segment/tensor conditions quantify over every sub-segment, so a
    midpoint-convexity witness at (theta_a, theta_b) transports to the datum
    (x0, u0, [p_a, p_b]) for the geometric characterizations.
    """
    ta, tb = float(witness["theta_a"]), float(witness["theta_b"])
    pa = (1.0 - ta) * seg.p0 + ta * seg.p1
    pb = (1.0 - tb) * seg.p0 + tb * seg.p1
    return SegmentConfig(x0=seg.x0, u0=seg.u0, p0=pa, p1=pb, theta_m=theta_m or seg.theta_m)
