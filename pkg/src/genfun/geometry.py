"""Dual segments, height functions, sections, and the local characterizations
of the weak and strict tensor conditions.

The equivalence machinery tested here: along a dual segment (y_theta,
z_theta), the height h_theta(x) = g(x, y_theta, z_theta) - g(x, y_0, z_0)
vanishes at x0 with gradient theta (p1 - p0); the weak condition is equivalent
to local g-convexity of the section S_1 at x0 (image convexity under
Q(., y0, z0)) and to a local maximum principle for g(x, y_theta, z_theta),
with a quantitative defect term in the strict case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fd
from .conditions import SegmentConfig, _perp_directions
from .core import GeneratingFunction, eval_jet
from .errors import DegenerateGradient, NotInU, OutOfGamma
from .hulls import hull_defect
from .implicit import eval_gstar_batch, map_Q_batch, matrix_E, FiberPoint, solve_YZ_batch
from .params import DEFAULTS, Defaults, VACUOUS_MARGIN
from .reports import ConditionReport, Verdict

Array = np.ndarray


@dataclass(frozen=True)
class DualSegment:
    """Solved dual path: y_theta = Y(x0, u0, p_theta), z_theta = Z(x0, u0, p_theta)."""

    base: SegmentConfig
    y_theta: Array  # (m + 1, n)
    z_theta: Array  # (m + 1,)


@dataclass
class SectionSample:
    """h values on a box grid centered at x0; inside means h < 0.

    Nodes where the fiber leaves Gamma carry NaN values, are excluded from the
    mask, and are counted in ``clipped_fraction``.
    """

    x0: Array
    nodes: Array          # (N, n)
    shape: tuple
    spacing: float
    values: Array         # (N,)
    inside_mask: Array    # (N,)
    clipped_fraction: float


def dual_segment(gf: GeneratingFunction, seg: SegmentConfig, defaults: Defaults = DEFAULTS) -> DualSegment:
    """Solve (Y, Z) on the theta grid and cross-check z_theta against g*."""
    pth = seg.p_theta()
    m1 = pth.shape[0]
    x = np.broadcast_to(seg.x0, (m1, gf.dim))
    u = np.full(m1, seg.u0)
    y, z, r, _, converged, _ = solve_YZ_batch(gf, x, u, pth, defaults=defaults)
    if not np.all(converged):
        raise NotInU(f"{gf.name}: segment leaves the jet set at theta grid points")
    zs, valid = eval_gstar_batch(gf, x, y, u, defaults=defaults)
    if not np.all(valid) or np.max(np.abs(zs - z)) > 1e-9 * (1.0 + np.max(np.abs(z))):
        raise NotInU(f"{gf.name}: dual-segment consistency check failed (Z vs g*)")
    return DualSegment(base=seg, y_theta=y, z_theta=z)


def h_theta(gf: GeneratingFunction, ds: DualSegment, theta_index: int, x: Array,
            defaults: Defaults = DEFAULTS, check_membership: bool = True) -> Array:
    """Height h_theta(x) = g(x, y_theta, z_theta) - g(x, y_0, z_0)."""
    x = np.asarray(x, dtype=float)
    yt, zt = ds.y_theta[theta_index], ds.z_theta[theta_index]
    y0, z0 = ds.y_theta[0], ds.z_theta[0]
    if check_membership:
        ok = gf.gamma.contains(x, np.broadcast_to(yt, x.shape), np.asarray(zt)) & \
            gf.gamma.contains(x, np.broadcast_to(y0, x.shape), np.asarray(z0))
        if not np.all(ok):
            raise OutOfGamma(f"{gf.name}: height evaluation outside Gamma")
    return gf.eval(x, yt, zt) - gf.eval(x, y0, z0)


def h_theta_delta(gf: GeneratingFunction, ds: DualSegment, theta_index: int, delta: float,
                  x: Array, defaults: Defaults = DEFAULTS) -> Array:
    """h_theta minus the uniform-convexity defect (delta/2)|p_theta - p0|^2 |x - x0|^2."""
    if delta < 0.0:
        raise ValueError("delta must be nonnegative")
    x = np.asarray(x, dtype=float)
    seg = ds.base
    pth = (1.0 - theta_index / seg.theta_m) * seg.p0 + (theta_index / seg.theta_m) * seg.p1
    span2 = float(np.sum((pth - seg.p0) ** 2))
    r2 = np.sum((x - seg.x0) ** 2, axis=-1)
    return h_theta(gf, ds, theta_index, x, defaults=defaults) - 0.5 * delta * span2 * r2


def h_zero(gf: GeneratingFunction, ds: DualSegment, x: Array, defaults: Defaults = DEFAULTS) -> Array:
    """g-hyperplane defining function E^(-1)(p1 - p0) . [Q(x) - Q(x0)] at (y0, z0)."""
    seg = ds.base
    y0, z0 = ds.y_theta[0], float(ds.z_theta[0])
    E, detE = matrix_E(gf, FiberPoint(seg.x0, y0, z0), defaults=defaults)
    w = np.linalg.solve(E, seg.p1 - seg.p0)
    x = np.asarray(x, dtype=float)
    q = map_Q_batch(gf, x, np.broadcast_to(y0, x.shape), np.asarray(z0), defaults=defaults)
    q0 = map_Q_batch(gf, seg.x0, y0, np.asarray(z0), defaults=defaults)
    return np.einsum("...i,i->...", q - q0, w)


def make_section(
    gf: GeneratingFunction,
    ds: DualSegment,
    theta_index: int,
    radius: float,
    grid_points: int = 65,
    delta: float = 0.0,
    defaults: Defaults = DEFAULTS,
) -> SectionSample:
    """Sample h_theta (or h_theta_delta) on a centered grid of given radius."""
    seg = ds.base
    n = gf.dim
    axes = [np.linspace(seg.x0[i] - radius, seg.x0[i] + radius, grid_points) for i in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([mm.ravel() for mm in mesh], axis=-1)
    spacing = 2.0 * radius / (grid_points - 1)
    yt, zt = ds.y_theta[theta_index], ds.z_theta[theta_index]
    y0, z0 = ds.y_theta[0], ds.z_theta[0]
    ok = gf.gamma.contains(nodes, np.broadcast_to(yt, nodes.shape), np.asarray(zt)) & \
        gf.gamma.contains(nodes, np.broadcast_to(y0, nodes.shape), np.asarray(z0))
    values = np.full(nodes.shape[0], np.nan)
    if np.any(ok):
        if delta > 0.0:
            values[ok] = h_theta_delta(gf, ds, theta_index, delta, nodes[ok], defaults=defaults)
        else:
            values[ok] = h_theta(gf, ds, theta_index, nodes[ok], defaults=defaults)
    inside = ok & (values < 0.0)
    return SectionSample(
        x0=seg.x0, nodes=nodes, shape=tuple(grid_points for _ in range(n)),
        spacing=spacing, values=values, inside_mask=inside,
        clipped_fraction=float(np.mean(~ok)),
    )


def _lipschitz_on_grid(values_vec: Array, shape: tuple, spacing: float) -> float:
    """Max gradient magnitude of a vector-valued grid map by forward differences."""
    arr = values_vec.reshape(shape + (values_vec.shape[-1],))
    worst = 0.0
    for axis in range(len(shape)):
        d = np.diff(arr, axis=axis)
        if d.size:
            worst = max(worst, float(np.max(np.linalg.norm(d, axis=-1))) / spacing)
    return worst


def check_local_gconvexity(
    gf: GeneratingFunction,
    section: SectionSample,
    y0: Array,
    z0: float,
    radius: float,
    defaults: Defaults = DEFAULTS,
    condition_id: str = "A3w(1)",
) -> ConditionReport:
    """Local g-convexity of the section at x0: convexity of its Q-image.

    The neighborhood is taken as a ball in Q-coordinates (its image is then an
    intersection of convex sets whenever the section is g-convex, so the probe
    never charges box-boundary curvature as a defect).  On failure the q-ball
    is halved down to four image cells; the shrink sequence is recorded.
    margin = -(hull defect) at the last radius tried; holds iff the defect is
    within the discretization allowance 2 h_grid Lip(Q).
    """
    if gf.dim == 1:
        return ConditionReport(condition_id=condition_id, verdict=Verdict.HOLDS,
                               margin=VACUOUS_MARGIN, vacuous=True)
    y0 = np.asarray(y0, dtype=float)
    nodes = section.nodes
    qv = map_Q_batch(gf, nodes, np.broadcast_to(y0, nodes.shape), np.asarray(float(z0)))
    q0 = map_Q_batch(gf, section.x0, y0, np.asarray(float(z0)))
    lip = _lipschitz_on_grid(qv, section.shape, section.spacing)
    allowance = 2.0 * section.spacing * lip
    dist_q = np.linalg.norm(qv - q0, axis=-1)

    # Largest q-ball certain to be covered by the sampled grid.
    boundary = _grid_boundary_mask(section.shape)
    rho_full = 0.95 * float(np.min(dist_q[boundary]))
    rho = rho_full
    rho_floor = 4.0 * section.spacing * lip
    tried = []
    last = None
    while True:
        sel = section.inside_mask & (dist_q <= rho)
        count = int(np.sum(sel))
        if count >= 4 * (gf.dim + 1):
            result = hull_defect(qv[sel], probe_spacing=max(allowance, 1e-12))
            defect = result["defect"]
            tried.append({"rho": rho, "defect": defect, "points": count})
            last = (defect, result, rho, count)
            if defect <= allowance:
                break
        else:
            tried.append({"rho": rho, "defect": None, "points": count})
        if rho <= rho_floor * 2.0:
            break
        rho = max(rho / 2.0, rho_floor)

    if last is None:
        return ConditionReport(
            condition_id=condition_id, verdict=Verdict.INCONCLUSIVE, margin=float("nan"),
            extras={"reason": "too few section samples", "tried": tried,
                    "clipped_fraction": section.clipped_fraction},
        )
    defect, result, rho, count = last
    margin = -defect
    verdict = Verdict.HOLDS if defect <= allowance else Verdict.FAILS
    witness = None
    if verdict == Verdict.FAILS:
        witness = {"defect": defect, "allowance": allowance, "rho": rho,
                   "probe_q": result["probe"], "x0": section.x0, "y0": y0, "z0": float(z0)}
    return ConditionReport(
        condition_id=condition_id, verdict=verdict, margin=margin, witness=witness,
        samples_used=count,
        extras={"allowance": allowance, "lip_Q": lip, "shrink_sequence": tried,
                "clipped_fraction": section.clipped_fraction},
    )


def _grid_boundary_mask(shape: tuple) -> Array:
    idx = np.indices(shape)
    mask = np.zeros(shape, dtype=bool)
    for axis, size in enumerate(shape):
        mask |= (idx[axis] == 0) | (idx[axis] == size - 1)
    return mask.ravel()


def _crest_offsets(gf, ds, t_line, nu, span, defaults):
    """Solve g(., y0, z0) = g(., y1, z1) along nu over each point of t_line.

    The margin of the maximum principle is tightest exactly on this crossing
    crest (off it, one branch of the max grows linearly); bisection is safe
    because the difference is strictly monotone along nu near x0 with slope
    about -|p1 - p0|.
    """
    y0, z0 = ds.y_theta[0], np.asarray(ds.z_theta[0])
    y1, z1 = ds.y_theta[-1], np.asarray(ds.z_theta[-1])

    def diff(s):
        x = t_line + s[:, None] * nu
        return gf.eval(x, y0, z0) - gf.eval(x, y1, z1)

    d0 = diff(np.zeros(t_line.shape[0]))
    half = np.abs(d0) / span + 1e-15
    lo, hi = -2.0 * half, 2.0 * half
    dlo, dhi = diff(lo), diff(hi)
    for _ in range(8):
        bad = dlo * dhi > 0.0
        if not np.any(bad):
            break
        lo[bad] *= 2.0
        hi[bad] *= 2.0
        dlo, dhi = diff(lo), diff(hi)
    bracketed = dlo * dhi <= 0.0
    # Orient so that diff(lo) >= 0 (diff decreases along nu).
    flip = dlo < 0.0
    lo2 = np.where(flip, hi, lo)
    hi2 = np.where(flip, lo, hi)
    a, b = lo2, hi2
    for _ in range(50):
        mid = 0.5 * (a + b)
        dm = diff(mid)
        a = np.where(dm >= 0.0, mid, a)
        b = np.where(dm >= 0.0, b, mid)
    s = 0.5 * (a + b)
    return s, bracketed


def _mp_probe_nodes(gf, ds, radius, grid_points, defaults):
    """Box grid around x0 plus crest probes along each tangent direction.

    Along a tangent direction xi, the linear parts of g_theta and max(g0, g1)
    cancel only near the crossing crest of g0 and g1; chord violations of
    (A xi, xi) appear there at second order in a sliver far thinner than any
    axis-aligned grid cell, so the crest is probed explicitly with a graded
    tangent grid (violations concentrate at small |t|).
    """
    seg = ds.base
    n = gf.dim
    axes = [np.linspace(seg.x0[i] - radius, seg.x0[i] + radius, grid_points) for i in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = [np.stack([mm.ravel() for mm in mesh], axis=-1)]

    span_vec = seg.p1 - seg.p0
    span = float(np.linalg.norm(span_vec))
    if span > 0.0 and n >= 2:
        nu = span_vec / span
        xis = _perp_directions(span_vec, defaults.xi_samples, seed=0)
        graded = radius * np.sign(np.linspace(-1.0, 1.0, 4 * grid_points + 1)) * \
            np.abs(np.linspace(-1.0, 1.0, 4 * grid_points + 1)) ** 1.5
        graded = graded[graded != 0.0]
        for xi in xis:
            t_line = seg.x0 + graded[:, None] * xi
            s, bracketed = _crest_offsets(gf, ds, t_line, nu, span, defaults)
            crest = t_line[bracketed] + s[bracketed, None] * nu
            nodes.append(crest)
    out = np.concatenate(nodes, axis=0)
    keep = np.linalg.norm(out - seg.x0, axis=-1) <= radius
    return out[keep]


def _mp_arrays(gf, ds, radius, grid_points, defaults):
    """Cached pieces of the maximum-principle margin at every probe and theta."""
    seg = ds.base
    nodes = _mp_probe_nodes(gf, ds, radius, grid_points, defaults)
    spacing = 2.0 * radius / (grid_points - 1)
    m1 = ds.y_theta.shape[0]
    ok = np.ones(nodes.shape[0], dtype=bool)
    gvals = np.empty((m1, nodes.shape[0]))
    for k in range(m1):
        okk = gf.gamma.contains(nodes, np.broadcast_to(ds.y_theta[k], nodes.shape), np.asarray(ds.z_theta[k]))
        ok &= okk
        gvals[k] = gf.eval(nodes, ds.y_theta[k], np.asarray(ds.z_theta[k]))
    thetas = seg.thetas()
    span = float(np.linalg.norm(seg.p1 - seg.p0))
    r_x = np.linalg.norm(nodes - seg.x0, axis=-1)
    ceiling = np.maximum(gvals[0], gvals[-1])
    weak = ceiling[None, :] - gvals
    defect_sq = ((thetas * (1.0 - thetas))[:, None] * span * r_x[None, :]) ** 2
    # Tolerance scale: the value variation over the probe window.  The large
    # z-offsets common to all theta cancel exactly in the margin differences,
    # so absolute |g| would only inflate the tolerance.
    if np.any(ok):
        scale = 1.0 + float(np.max(gvals[:, ok]) - np.min(gvals[:, ok]))
    else:
        scale = 1.0
    return nodes, spacing, ok, r_x, thetas, weak, defect_sq, scale


def check_max_principle(
    gf: GeneratingFunction,
    ds: DualSegment,
    radius: float,
    delta0: float = 0.0,
    grid_points: int = 33,
    defaults: Defaults = DEFAULTS,
    condition_id: str = "A3w(2)",
) -> ConditionReport:
    """Local maximum principle along the dual segment.

    margin = min over probes x and grid theta of
      max(g(x, y0, z0), g(x, y1, z1)) - g(x, y_theta, z_theta)
        - delta0 (theta (1 - theta) |p1 - p0| |x - x0|)^2,
    restricted to |x - x0| <= r with r halved from ``radius`` down to four
    grid cells until the margin clears -mp_tol * scale; the shrink sequence
    is recorded.
    """
    if delta0 < 0.0:
        raise ValueError("delta0 must be nonnegative")
    seg = ds.base
    nodes, spacing, ok, r_x, thetas, weak, defect_sq, scale = _mp_arrays(
        gf, ds, radius, grid_points, defaults
    )
    clipped_fraction = float(np.mean(~ok))
    margins = weak - delta0 * defect_sq
    tol = defaults.mp_tol * scale

    r_try = radius
    tried = []
    final = None
    while True:
        sel = ok & (r_x <= r_try)
        if np.any(sel):
            sub = margins[:, sel]
            k = int(np.argmin(sub))
            ti, xi_ = divmod(k, int(np.sum(sel)))
            margin = float(sub.ravel()[k])
            tried.append({"radius": r_try, "margin": margin})
            final = (margin, ti, np.nonzero(sel)[0][xi_], r_try)
            if margin >= -tol:
                break
        else:
            tried.append({"radius": r_try, "margin": None})
        if r_try <= 4.0 * spacing:
            break
        r_try = max(r_try / 2.0, 4.0 * spacing)

    if final is None:
        return ConditionReport(
            condition_id=condition_id, verdict=Verdict.INCONCLUSIVE, margin=float("nan"),
            extras={"reason": "no admissible grid nodes", "clipped_fraction": clipped_fraction},
        )
    margin, ti, node_index, r_used = final
    verdict = Verdict.HOLDS if margin >= -tol else Verdict.FAILS
    witness = None
    if verdict == Verdict.FAILS:
        witness = {
            "x": nodes[node_index], "theta": float(thetas[ti]), "margin": margin,
            "x0": seg.x0, "u0": float(seg.u0), "p0": seg.p0, "p1": seg.p1,
            "delta0": float(delta0),
        }
    return ConditionReport(
        condition_id=condition_id, verdict=verdict, margin=margin, witness=witness,
        samples_used=int(np.sum(ok)),
        extras={"tolerance": tol, "radius_used": r_used, "shrink_sequence": tried,
                "clipped_fraction": clipped_fraction, "delta0": float(delta0)},
    )


def max_principle_delta0(
    gf: GeneratingFunction,
    ds: DualSegment,
    radius: float,
    grid_points: int = 33,
    defaults: Defaults = DEFAULTS,
    bisect_iters: int = 50,
) -> float:
    """Largest delta0 for which the quantitative maximum principle holds.

    Bisection over delta0 against the cached margin arrays (the probe set and
    g-values do not depend on delta0); returns 0.0 when the weak form already
    fails at every retry radius.
    """
    nodes, spacing, ok, r_x, thetas, weak, defect_sq, scale = _mp_arrays(
        gf, ds, radius, grid_points, defaults
    )
    tol = defaults.mp_tol * scale

    r_try = radius
    sel = ok & (r_x <= r_try)
    while (not np.any(sel) or float(np.min(weak[:, sel])) < -tol) and r_try > 4.0 * spacing:
        r_try = max(r_try / 2.0, 4.0 * spacing)
        sel = ok & (r_x <= r_try)
    if not np.any(sel) or float(np.min(weak[:, sel])) < -tol:
        return 0.0

    w = weak[:, sel]
    d2 = defect_sq[:, sel]

    def holds(d0):
        return bool(np.min(w - d0 * d2) >= -tol)

    hi = 1.0
    grow = 0
    while holds(hi) and grow < 60:
        hi *= 2.0
        grow += 1
    if grow >= 60:
        return hi
    lo = hi / 2.0 if grow else 0.0
    for _ in range(bisect_iters):
        mid = 0.5 * (lo + hi)
        if holds(mid):
            lo = mid
        else:
            hi = mid
    return lo


def fundamental_form_monotonicity(
    gf: GeneratingFunction, ds: DualSegment, defaults: Defaults = DEFAULTS, seed: int = 0
) -> ConditionReport:
    """Monotonicity in theta of the normalized boundary Hessians at x0.

    Tests (D^2 h_theta' xi, xi)/theta' >= (D^2 h_theta xi, xi)/theta for all
    grid pairs theta < theta' and tangent directions xi orthogonal to the
    common gradient direction p1 - p0; the restatement of the weak condition
    through second fundamental forms of the section boundaries.
    """
    seg = ds.base
    if gf.dim == 1:
        return ConditionReport(condition_id="fundamental_form", verdict=Verdict.HOLDS,
                               margin=VACUOUS_MARGIN, vacuous=True, seed=seed)
    thetas = seg.thetas()
    m = seg.theta_m
    grad_dir = seg.p1 - seg.p0
    jet0 = eval_jet(gf, seg.x0, ds.y_theta[0], np.asarray(ds.z_theta[0]), defaults=defaults)
    hx = fd.step_sizes(gf.gamma.x_scales(), defaults.h_hess)

    quad_forms = []
    xis = _perp_directions(grad_dir, defaults.xi_samples, seed)
    analytic = gf.gxx is not None
    for k in range(1, m + 1):
        jetk = eval_jet(gf, seg.x0, ds.y_theta[k], np.asarray(ds.z_theta[k]), defaults=defaults)
        grad_h = jetk.gx - jet0.gx
        if np.linalg.norm(grad_h) < 1e-12:
            raise DegenerateGradient(f"{gf.name}: vanishing height gradient at theta index {k}")
        yk, zk = ds.y_theta[k], ds.z_theta[k]
        y0, z0 = ds.y_theta[0], ds.z_theta[0]

        if analytic:
            # D^2 h_theta is exactly the difference of the x-Hessians of g;
            # differencing eval would add eps |g| / h^2 roundoff for nothing.
            H = jetk.gxx - jet0.gxx
        else:
            def h(xx):
                return gf.eval(xx, yk, np.asarray(zk)) - gf.eval(xx, y0, np.asarray(z0))

            H = fd.hessian(h, seg.x0, hx)
        quad_forms.append(np.einsum("ij,si,sj->s", H, xis, xis) / thetas[k])
    quad_forms = np.array(quad_forms)  # (m, S)

    worst = np.inf
    witness = None
    for i in range(m):
        for j in range(i + 1, m):
            diff = quad_forms[j] - quad_forms[i]
            k = int(np.argmin(diff))
            if diff[k] < worst:
                worst = float(diff[k])
                witness = {"theta_low": float(thetas[i + 1]), "theta_high": float(thetas[j + 1]),
                           "xi": xis[k], "xi_index": int(k)}
    # Roundoff floor of the FD path: eps-scale cancellation over steps h,
    # amplified by 1/theta at the smallest grid theta.
    noise_floor = 0.0
    if not analytic:
        g_scale = 1.0 + float(np.max(np.abs(gf.eval(
            np.broadcast_to(seg.x0, (m + 1, gf.dim)), ds.y_theta, ds.z_theta))))
        noise_floor = 64.0 * np.finfo(float).eps * g_scale / float(np.min(hx)) ** 2 / thetas[1]
    tol_eff = max(defaults.ff_tol, noise_floor)
    verdict = Verdict.HOLDS if worst >= -tol_eff else Verdict.FAILS
    return ConditionReport(
        condition_id="fundamental_form", verdict=verdict, margin=worst,
        witness=witness if verdict == Verdict.FAILS else None,
        samples_used=int(quad_forms.size), seed=seed,
        extras={"ff_tol": defaults.ff_tol, "noise_floor": noise_floor},
    )


def section_to_csv(section: SectionSample, path, header_comment: str = "") -> None:
    """Export a SectionSample as CSV: x coordinates, h value, inside mask."""
    n = section.nodes.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        cols = [f"x{i}" for i in range(n)] + ["h", "inside"]
        fh.write(",".join(cols) + "\n")
        for row, val, ins in zip(section.nodes, section.values, section.inside_mask):
            coords = ",".join(repr(float(c)) for c in row)
            fh.write(f"{coords},{repr(float(val))},{int(ins)}\n")
