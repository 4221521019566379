"""Generating-equation solves and the derived maps Q, P, E, A.

solve_YZ inverts the system g(x, Y, Z) = u, g_x(x, Y, Z) = p by damped Newton
iteration in (y, z); the Jacobian of (y, z) -> (g_x, g) has determinant
g_z det E, so nondegeneracy failures surface as SingularJacobian.  All solvers
are batched over leading axes and fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GeneratingFunction, eval_jet, sample_fiber_points
from .errors import NoConvergence, OutOfGamma, OutOfRange, SingularJacobian
from .params import DEFAULTS, Defaults

Array = np.ndarray


@dataclass(frozen=True)
class JetPoint:
    """A point (x, u, p) of the jet set: solve_YZ succeeds with solution in Gamma."""

    x: Array
    u: float
    p: Array


@dataclass(frozen=True)
class FiberPoint:
    x: Array
    y: Array
    z: float


@dataclass
class YZSolution:
    y: Array
    z: float
    residual: float
    iterations: int


def _as_batch(x, u, p, n):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p = np.atleast_2d(np.asarray(p, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    m = max(x.shape[0], p.shape[0], u.shape[0])
    x = np.broadcast_to(x, (m, n)).copy()
    p = np.broadcast_to(p, (m, n)).copy()
    u = np.broadcast_to(u, (m,)).copy()
    return x, u, p, m


def _clamp_yz(gf, x, y, z):
    # y may sit on the closed box boundary; only the open z-interval needs margin.
    gamma = gf.gamma
    yb = gamma.y_box
    y = np.clip(y, yb[:, 0], yb[:, 1])
    lo, hi = gamma.z_interval(x, y)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), z.shape) + gamma.margin
    hi = np.broadcast_to(np.asarray(hi, dtype=float), z.shape) - gamma.margin
    z = np.clip(z, lo, hi)
    return y, z


def _residual(gf, x, u, p, y, z, defaults):
    jet = eval_jet(gf, x, y, z, defaults=defaults, check_membership=False)
    fx = jet.gx - p
    fu = jet.g - u
    r = np.maximum(np.max(np.abs(fx), axis=-1), np.abs(fu))
    return r, jet


def _newton_once(gf, x, u, p, y0, z0, defaults):
    """One damped Newton run from a fixed start; returns per-point status."""
    n = gf.dim
    m = x.shape[0]
    y = np.array(y0, dtype=float)
    z = np.array(z0, dtype=float)
    y, z = _clamp_yz(gf, x, y, z)
    tol = defaults.newton_tol * (1.0 + np.abs(u) + np.linalg.norm(p, axis=-1))
    r, _ = _residual(gf, x, u, p, y, z, defaults)
    iters = np.zeros(m, dtype=int)
    singular = np.zeros(m, dtype=bool)
    stalled = np.zeros(m, dtype=bool)

    for _ in range(defaults.max_iter):
        active = (r > tol) & ~singular & ~stalled
        if not np.any(active):
            break
        idx = np.nonzero(active)[0]
        xa, ua, pa = x[idx], u[idx], p[idx]
        ya, za = y[idx], z[idx]
        jet = eval_jet(gf, xa, ya, za, defaults=defaults, check_membership=False)
        k = idx.size
        J = np.empty((k, n + 1, n + 1))
        J[:, :n, :n] = jet.gxy
        J[:, :n, n] = jet.gxz
        J[:, n, :n] = jet.gy
        J[:, n, n] = jet.gz
        F = np.empty((k, n + 1))
        F[:, :n] = jet.gx - pa
        F[:, n] = jet.g - ua
        det = np.linalg.det(J)
        scale = np.maximum(1.0, np.max(np.abs(J), axis=(1, 2))) ** (n + 1)
        sing = ~np.isfinite(det) | (np.abs(det) < 1e-14 * scale)
        singular[idx[sing]] = True
        good = ~sing
        if not np.any(good):
            continue
        gi = idx[good]
        step = np.linalg.solve(J[good], F[good][..., None])[..., 0]
        alpha = np.ones(gi.size)
        cur_r = r[gi]
        best_y, best_z, best_r = y[gi].copy(), z[gi].copy(), cur_r.copy()
        improved = np.zeros(gi.size, dtype=bool)
        for _d in range(defaults.max_damping):
            ny = y[gi] - alpha[:, None] * step[:, :n]
            nz = z[gi] - alpha * step[:, n]
            ny, nz = _clamp_yz(gf, x[gi], ny, nz)
            nr, _ = _residual(gf, x[gi], u[gi], p[gi], ny, nz, defaults)
            better = nr < best_r
            best_y[better] = ny[better]
            best_z[better] = nz[better]
            best_r[better] = nr[better]
            improved |= better
            if np.all(improved):
                break
            alpha[~improved] *= 0.5
        y[gi] = best_y
        z[gi] = best_z
        r[gi] = best_r
        iters[gi] += 1
        stalled[gi[~improved]] = True

    converged = r <= tol
    return y, z, r, iters, converged, singular


def _multistart_grid(gf, x, defaults):
    """Deterministic 3^n x 3 start grid over (y_box, z_interval)."""
    gamma = gf.gamma
    yb = gamma.shrunk(gamma.y_box)
    axes = [np.linspace(yb[i, 0], yb[i, 1], 5)[1:4] for i in range(gf.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    ys = np.stack([mm.ravel() for mm in mesh], axis=-1)
    starts = []
    for yv in ys:
        yrow = np.broadcast_to(yv, x.shape).copy()
        lo, hi = gamma.z_interval(x, yrow)
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (x.shape[0],))
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (x.shape[0],))
        for t in (0.25, 0.5, 0.75):
            starts.append((yrow, lo + t * (hi - lo)))
    return starts


def solve_YZ_batch(
    gf: GeneratingFunction,
    x: Array,
    u: Array,
    p: Array,
    y_init: Array | None = None,
    z_init: Array | None = None,
    defaults: Defaults = DEFAULTS,
    multistart: bool = True,
):
    """Batched solve of the generating equations.

    Returns (y, z, residual, iterations, converged, singular_seen) with leading
    batch axis; points that never converge keep their best iterate.
    """
    n = gf.dim
    x, u, p, m = _as_batch(x, u, p, n)
    gamma = gf.gamma
    if y_init is None:
        yc = 0.5 * (gamma.y_box[:, 0] + gamma.y_box[:, 1])
        y0 = np.broadcast_to(yc, (m, n)).copy()
    else:
        y0 = np.broadcast_to(np.asarray(y_init, dtype=float), (m, n)).copy()
    if z_init is None:
        lo, hi = gamma.z_interval(x, y0)
        z0 = 0.5 * (np.broadcast_to(np.asarray(lo, float), (m,)) + np.broadcast_to(np.asarray(hi, float), (m,)))
    else:
        z0 = np.broadcast_to(np.asarray(z_init, dtype=float), (m,)).copy()

    y, z, r, iters, converged, singular = _newton_once(gf, x, u, p, y0, z0, defaults)

    if multistart and not np.all(converged):
        failed = np.nonzero(~converged)[0]
        xf, uf, pf = x[failed], u[failed], p[failed]
        starts = _multistart_grid(gf, xf, defaults)
        # Rank starts per point by initial residual; try the best few.
        res0 = np.stack([_residual(gf, xf, uf, pf, sy, sz, defaults)[0] for sy, sz in starts])
        order = np.argsort(res0, axis=0, kind="stable")
        tries = min(defaults.max_multistarts, len(starts))
        still = np.ones(failed.size, dtype=bool)
        for t in range(tries):
            if not np.any(still):
                break
            sub = np.nonzero(still)[0]
            sy = np.stack([starts[order[t, j]][0][j] for j in sub])
            sz = np.array([starts[order[t, j]][1][j] for j in sub])
            ny, nz, nr, nit, nconv, nsing = _newton_once(
                gf, xf[sub], uf[sub], pf[sub], sy, sz, defaults
            )
            gidx = failed[sub]
            better = nr < r[gidx]
            tgt = gidx[better]
            y[tgt] = ny[better]
            z[tgt] = nz[better]
            r[tgt] = nr[better]
            iters[tgt] += nit[better]
            singular[gidx] |= nsing
            converged[gidx] |= nconv
            still[sub[nconv]] = False

    # Final membership check: a converged solution must lie in Gamma.
    member = gamma.contains(x, y, z)
    converged &= member
    return y, z, r, iters, converged, singular


def solve_YZ(
    gf: GeneratingFunction,
    jet: JetPoint,
    init: FiberPoint | None = None,
    defaults: Defaults = DEFAULTS,
) -> YZSolution:
    """Solve the generating equations at one jet point.

    Raises NoConvergence when the jet is (numerically) outside the jet set and
    SingularJacobian when every attempt hit a degenerate Jacobian.
    """
    y_init = None if init is None else np.asarray(init.y, dtype=float)[None, :]
    z_init = None if init is None else np.array([init.z], dtype=float)
    y, z, r, iters, converged, singular = solve_YZ_batch(
        gf, jet.x[None, :], np.array([jet.u]), jet.p[None, :],
        y_init=y_init, z_init=z_init, defaults=defaults,
    )
    if not converged[0]:
        if singular[0]:
            raise SingularJacobian(
                f"{gf.name}: singular (y,z)-Jacobian at iterate (residual {r[0]:.3e})"
            )
        raise NoConvergence(
            f"{gf.name}: generating equations did not converge (residual {r[0]:.3e})",
            residual=float(r[0]), iterations=int(iters[0]),
        )
    return YZSolution(y=y[0], z=float(z[0]), residual=float(r[0]), iterations=int(iters[0]))


def eval_gstar_batch(
    gf: GeneratingFunction,
    x: Array,
    y: Array,
    u: Array,
    defaults: Defaults = DEFAULTS,
    bisect_iters: int = 60,
):
    """Vectorized dual evaluation: the unique z with g(x, y, z) = u.

    Returns (z, valid) where invalid entries had u outside the attainable
    interval (reported, not raised).  Strict monotonicity of g in z makes the
    bracket [z_lo, z_hi] safe; bisection is refined by Newton polish.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    gamma = gf.gamma
    lo, hi = gamma.z_interval(x, y)
    shape = np.broadcast_shapes(x.shape[:-1], y.shape[:-1], u.shape)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), shape) + gamma.margin
    hi = np.broadcast_to(np.asarray(hi, dtype=float), shape) - gamma.margin
    u = np.broadcast_to(u, shape)

    g_lo = gf.eval(x, y, lo + 0.0)
    g_hi = gf.eval(x, y, hi + 0.0)
    # g decreasing in z: attainable range is [g_hi, g_lo].
    valid = (u <= g_lo) & (u >= g_hi) & (hi > lo)
    if gamma.pair_ok is not None:
        valid &= np.broadcast_to(gamma.pair_ok(x, y), shape)

    a = np.array(np.broadcast_to(lo, shape), dtype=float)
    b = np.array(np.broadcast_to(hi, shape), dtype=float)
    for _ in range(bisect_iters):
        mid = 0.5 * (a + b)
        gm = gf.eval(x, y, mid)
        take_right = gm >= u
        a = np.where(take_right, mid, a)
        b = np.where(take_right, b, mid)
    z = 0.5 * (a + b)
    # Newton polish to machine precision; keeps nested solves noise-free.
    for _ in range(3):
        gv = gf.eval(x, y, z)
        if gf.gz is not None:
            dg = gf.gz(x, y, z)
        else:
            h = 1e-6 * max(1.0, gamma.z_scale())
            dg = (gf.eval(x, y, z + h) - gf.eval(x, y, z - h)) / (2.0 * h)
        znew = z - (gv - u) / dg
        z = np.clip(znew, lo, hi)
    z = np.where(valid, z, np.nan)
    return z, valid


def eval_gstar(
    gf: GeneratingFunction, x: Array, y: Array, u: float, defaults: Defaults = DEFAULTS
) -> float | Array:
    """Dual generating value g*(x, y, u); raises OutOfRange outside Gamma*."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    uarr = np.asarray(u, dtype=float)
    z, valid = eval_gstar_batch(gf, x, y, uarr, defaults=defaults)
    if not np.all(valid):
        raise OutOfRange(f"{gf.name}: u outside the attainable interval of g(x, y, .)")
    if z.shape == ():
        return float(z)
    return z


def map_Q(gf: GeneratingFunction, fp: FiberPoint, defaults: Defaults = DEFAULTS) -> Array:
    """Q = -g_y / g_z at a fiber point (one-to-one in x under A1*)."""
    jet = eval_jet(gf, fp.x, fp.y, fp.z, defaults=defaults)
    return -jet.gy / np.asarray(jet.gz)[..., None]


def map_Q_batch(gf, x, y, z, defaults: Defaults = DEFAULTS) -> Array:
    jet = eval_jet(gf, x, y, z, defaults=defaults, check_membership=False)
    return -jet.gy / np.asarray(jet.gz)[..., None]


def map_P(gf: GeneratingFunction, x: Array, y: Array, u: float, defaults: Defaults = DEFAULTS) -> Array:
    """P(x, y, u) = g_x at the g*-lifted fiber point."""
    z = eval_gstar(gf, x, y, u, defaults=defaults)
    if gf.gx is not None:
        return gf.gx(np.asarray(x, float), np.asarray(y, float), np.asarray(z, float))
    jet = eval_jet(gf, x, y, z, defaults=defaults, check_membership=False)
    return jet.gx


def matrix_E(gf: GeneratingFunction, fp: FiberPoint, defaults: Defaults = DEFAULTS):
    """E = g_xy - (g_z)^(-1) g_xz (x) g_y and its determinant."""
    jet = eval_jet(gf, fp.x, fp.y, fp.z, defaults=defaults)
    E = jet.gxy - np.einsum("...i,...j->...ij", jet.gxz, jet.gy) / np.asarray(jet.gz)[..., None, None]
    return E, np.linalg.det(E)


def matrix_E_batch(gf, x, y, z, defaults: Defaults = DEFAULTS):
    jet = eval_jet(gf, x, y, z, defaults=defaults, check_membership=False)
    E = jet.gxy - np.einsum("...i,...j->...ij", jet.gxz, jet.gy) / np.asarray(jet.gz)[..., None, None]
    return E, np.linalg.det(E)


def matrix_A(gf: GeneratingFunction, jet: JetPoint, defaults: Defaults = DEFAULTS) -> Array:
    """A(x, u, p) = g_xx at the solved fiber point, symmetrized."""
    sol = solve_YZ(gf, jet, defaults=defaults)
    full = eval_jet(gf, jet.x, sol.y, sol.z, defaults=defaults, check_membership=False)
    return 0.5 * (full.gxx + np.swapaxes(full.gxx, -1, -2))


def matrix_A_batch(gf, x, u, p, defaults: Defaults = DEFAULTS):
    """Batched A; returns (A, converged mask)."""
    y, z, r, iters, converged, singular = solve_YZ_batch(gf, x, u, p, defaults=defaults)
    jet = eval_jet(gf, x, y, z, defaults=defaults, check_membership=False)
    A = 0.5 * (jet.gxx + np.swapaxes(jet.gxx, -1, -2))
    return A, converged


def invert_Q(
    gf: GeneratingFunction,
    q: Array,
    y: Array,
    z: float,
    x_init: Array,
    defaults: Defaults = DEFAULTS,
) -> Array:
    """Solve Q(x, y, z) = q for x by Newton with the -E^T/g_z Jacobian."""
    q = np.asarray(q, dtype=float)
    y = np.asarray(y, dtype=float)
    gamma = gf.gamma
    xb = gamma.shrunk(gamma.x_box)

    def run(x0):
        x = np.clip(np.asarray(x0, dtype=float), xb[:, 0], xb[:, 1])
        tol = defaults.newton_tol * (1.0 + float(np.linalg.norm(q)))
        best_x, best_r = x.copy(), np.inf
        singular_seen = False
        for _ in range(defaults.max_iter):
            jet = eval_jet(gf, x, y, np.asarray(z, float), defaults=defaults, check_membership=False)
            Qv = -jet.gy / jet.gz
            F = Qv - q
            r = float(np.max(np.abs(F)))
            if r < best_r:
                best_x, best_r = x.copy(), r
            if r <= tol:
                return x, r, singular_seen
            E = jet.gxy - np.outer(jet.gxz, jet.gy) / jet.gz
            J = -E.T / jet.gz
            det = np.linalg.det(J)
            scale = max(1.0, float(np.max(np.abs(J)))) ** gf.dim
            if not np.isfinite(det) or abs(det) < 1e-14 * scale:
                singular_seen = True
                break
            step = np.linalg.solve(J, F)
            alpha, improved = 1.0, False
            for _d in range(defaults.max_damping):
                xn = np.clip(x - alpha * step, xb[:, 0], xb[:, 1])
                jn = eval_jet(gf, xn, y, np.asarray(z, float), defaults=defaults, check_membership=False)
                rn = float(np.max(np.abs(-jn.gy / jn.gz - q)))
                if rn < r:
                    x, improved = xn, True
                    break
                alpha *= 0.5
            if not improved:
                break
        return best_x, best_r, singular_seen

    x, r, singular_seen = run(x_init)
    tol = defaults.newton_tol * (1.0 + float(np.linalg.norm(q)))
    if r <= tol:
        return x
    # Coarse multistart over the x-box.
    axes = [np.linspace(xb[i, 0], xb[i, 1], 5)[1:4] for i in range(gf.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    grid = np.stack([mm.ravel() for mm in mesh], axis=-1)
    any_singular = singular_seen
    for x0 in grid[: defaults.max_multistarts]:
        x, r, sing = run(x0)
        any_singular |= sing
        if r <= tol:
            return x
    if any_singular:
        raise SingularJacobian(f"{gf.name}: singular Q-Jacobian while inverting")
    raise NoConvergence(
        f"{gf.name}: invert_Q did not converge (residual {r:.3e}); "
        "q may lie outside the image or A1* may fail",
        residual=r,
    )


def jets_from_fibers(gf: GeneratingFunction, x: Array, y: Array, z: Array, defaults: Defaults = DEFAULTS):
    """(u, p) = (g, g_x) at fiber points; the forward half of the round trip."""
    jet = eval_jet(gf, x, y, z, defaults=defaults)
    return jet.g, jet.gx


def sample_jets(gf: GeneratingFunction, count: int, seed: int, defaults: Defaults = DEFAULTS):
    """Seeded jets (x, u, p) with their source fiber points."""
    x, y, z = sample_fiber_points(gf, count, seed)
    u, p = jets_from_fibers(gf, x, y, z, defaults=defaults)
    return x, u, p, y, z


def fd_Yp(gf: GeneratingFunction, jet: JetPoint, defaults: Defaults = DEFAULTS) -> Array:
    """Finite-difference p-Jacobian of Y(x, u, .); equals E^(-1) in theory."""
    n = gf.dim
    h = defaults.fd_eps_first * max(1.0, float(np.linalg.norm(jet.p)))
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        sp = solve_YZ(gf, JetPoint(jet.x, jet.u, jet.p + e), defaults=defaults)
        sm = solve_YZ(gf, JetPoint(jet.x, jet.u, jet.p - e), defaults=defaults)
        cols.append((sp.y - sm.y) / (2.0 * h))
    return np.stack(cols, axis=-1)


def fd_Yp_batch(gf: GeneratingFunction, x: Array, u: Array, p: Array, defaults: Defaults = DEFAULTS):
    """Batched FD p-Jacobian of Y; returns (jacobians, converged mask)."""
    n = gf.dim
    m = x.shape[0]
    h = defaults.fd_eps_first * np.maximum(1.0, np.linalg.norm(p, axis=-1))
    cols = []
    ok = np.ones(m, dtype=bool)
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        yp, _, _, _, cp, _ = solve_YZ_batch(gf, x, u, p + h[:, None] * e, defaults=defaults)
        ym, _, _, _, cm, _ = solve_YZ_batch(gf, x, u, p - h[:, None] * e, defaults=defaults)
        ok &= cp & cm
        cols.append((yp - ym) / (2.0 * h[:, None]))
    return np.stack(cols, axis=-1), ok
