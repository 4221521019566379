"""Dual generating function (roles of x and y exchanged) and duality checks.

The dual of g is gbar(y, x, u) = g*(x, y, u), defined through the z-inverse of
g; its first derivatives follow the identities g*_x = -g_x/g_z, g*_y =
-g_y/g_z, g*_u = 1/g_z < 0 evaluated at the lifted fiber point, so the dual
satisfies the same sign normalization and every condition checker runs on it
unchanged.  Second derivatives come from one finite-difference layer over the
analytic first-derivative identities, never from differencing the root-find
twice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fd
from .conditions import SegmentConfig, check_A3s, check_A3w, witness_subsegment, _perp_directions
from .core import Gamma, GeneratingFunction, eval_jet, sample_fiber_points
from .errors import NoConvergence
from .implicit import (FiberPoint, JetPoint, eval_gstar, eval_gstar_batch,
                       jets_from_fibers, map_Q_batch, solve_YZ, solve_YZ_batch)
from .params import DEFAULTS, Defaults
from .reports import ConditionReport, Verdict

Array = np.ndarray


def build_dual(gf: GeneratingFunction, defaults: Defaults = DEFAULTS) -> GeneratingFunction:
    """Dual generating function on Gamma* = {(x, y, g(x, y, z))}, slots (y, x, u)."""
    gamma = gf.gamma

    def dual_eval(yv, xv, w):
        z, valid = eval_gstar_batch(gf, xv, yv, np.asarray(w, dtype=float), defaults=defaults)
        return z

    def _lift_first(yv, xv, w):
        z, _ = eval_gstar_batch(gf, xv, yv, np.asarray(w, dtype=float), defaults=defaults)
        jet = eval_jet(gf, np.asarray(xv, float), np.asarray(yv, float), z,
                       defaults=defaults, check_membership=False)
        return jet

    def dual_gx(yv, xv, w):
        jet = _lift_first(yv, xv, w)
        return -jet.gy / np.asarray(jet.gz)[..., None]

    def dual_gy(yv, xv, w):
        jet = _lift_first(yv, xv, w)
        return -jet.gx / np.asarray(jet.gz)[..., None]

    def dual_gz(yv, xv, w):
        jet = _lift_first(yv, xv, w)
        return 1.0 / np.asarray(jet.gz)

    hy = fd.step_sizes(gamma.y_scales(), defaults.fd_eps_second)
    hx = fd.step_sizes(gamma.x_scales(), defaults.fd_eps_second)
    hz = float(fd.step_sizes(np.array([gamma.z_scale()]), defaults.fd_eps_second)[0])

    def dual_gxx(yv, xv, w):
        return fd.jacobian(lambda q: dual_gx(q, xv, w), np.asarray(yv, float), hy)

    def dual_gxy(yv, xv, w):
        return fd.jacobian(lambda q: dual_gx(yv, q, w), np.asarray(xv, float), hx)

    def dual_gxz(yv, xv, w):
        return fd.partial_scalar(lambda q: dual_gx(yv, xv, q), np.asarray(w, float), hz)

    def dual_z_interval(yv, xv):
        lo, hi = gamma.z_interval(np.asarray(xv, float), np.asarray(yv, float))
        shape = np.broadcast_shapes(np.shape(lo), np.asarray(xv).shape[:-1], np.asarray(yv).shape[:-1])
        lo = np.broadcast_to(np.asarray(lo, dtype=float), shape) + gamma.margin
        hi = np.broadcast_to(np.asarray(hi, dtype=float), shape) - gamma.margin
        # g decreasing in z: u ranges over (g(., hi), g(., lo)).
        return gf.eval(xv, yv, hi), gf.eval(xv, yv, lo)

    dual_pair = None
    if gamma.pair_ok is not None:
        primal_pair = gamma.pair_ok

        def dual_pair(yv, xv):
            return primal_pair(xv, yv)

    def dual_gstar(yv, xv, w):
        # The z-inverse of the z-inverse is g itself.
        return gf.eval(np.asarray(xv, float), np.asarray(yv, float), np.asarray(w, float))

    dual_gamma = Gamma(
        x_box=np.array(gamma.y_box, dtype=float),
        y_box=np.array(gamma.x_box, dtype=float),
        z_interval=dual_z_interval,
        pair_ok=dual_pair,
        margin=gamma.margin,
    )
    return GeneratingFunction(
        dim=gf.dim, eval=dual_eval, gamma=dual_gamma, name=gf.name + "*",
        params=dict(gf.params),
        gx=dual_gx, gy=dual_gy, gz=dual_gz,
        gxx=dual_gxx, gxy=dual_gxy, gxz=dual_gxz,
        gstar=dual_gstar,
    )


@dataclass(frozen=True)
class JetCorrespondence:
    """A primal jet, its fiber point, and the dual-side coordinates (y, z, q)."""

    primal: JetPoint
    fiber: FiberPoint
    dual_y: Array
    dual_z: float
    dual_q: Array


def correspond_jet(gf: GeneratingFunction, primal: JetPoint, defaults: Defaults = DEFAULTS) -> JetCorrespondence:
    """Fill the fiber point and dual coordinates for a primal jet."""
    sol = solve_YZ(gf, primal, defaults=defaults)
    fiber = FiberPoint(x=primal.x, y=sol.y, z=sol.z)
    q = map_Q_batch(gf, primal.x, sol.y, np.asarray(sol.z), defaults=defaults)
    zstar = eval_gstar(gf, primal.x, sol.y, primal.u, defaults=defaults)
    if abs(zstar - sol.z) > 1e-9 * (1.0 + abs(sol.z)):
        raise NoConvergence(f"{gf.name}: jet correspondence z-consistency failed")
    return JetCorrespondence(primal=primal, fiber=fiber, dual_y=sol.y, dual_z=sol.z, dual_q=np.asarray(q))


def corresponded_dual_segments(
    gf: GeneratingFunction,
    dual: GeneratingFunction,
    count: int,
    seed: int,
    theta_m: int | None = None,
    reach: float = 0.35,
    defaults: Defaults = DEFAULTS,
    max_tries: int = 80,
) -> list:
    """Dual segment configs whose endpoints correspond to primal fiber pairs.

    A pair of primal fibers (x_a, y0, z0), (x_b, y0, z0) sharing the target
    side maps through the jet correspondence to dual jets (y0, z0, q_a) and
    (y0, z0, q_b); the straight q-segment between them is the dual-side datum.
    """
    m = theta_m or defaults.theta_m
    rng = np.random.default_rng(seed)
    gamma = gf.gamma
    xb = gamma.shrunk(gamma.x_box)
    width = xb[:, 1] - xb[:, 0]
    out = []
    for _ in range(max_tries):
        if len(out) >= count:
            break
        xa, y0, z0 = sample_fiber_points(gf, count - len(out), int(rng.integers(2**63)))
        step = rng.uniform(-reach, reach, size=xa.shape) * width
        xbp = np.clip(xa + step, xb[:, 0], xb[:, 1])
        ok = gamma.contains(xbp, y0, z0)
        xa, xbp, y0, z0 = xa[ok], xbp[ok], y0[ok], z0[ok]
        if xa.shape[0] == 0:
            continue
        qa = map_Q_batch(gf, xa, y0, z0, defaults=defaults)
        qb = map_Q_batch(gf, xbp, y0, z0, defaults=defaults)
        span = np.linalg.norm(qb - qa, axis=-1)
        keep = span > 1e-6
        for i in np.nonzero(keep)[0]:
            seg = SegmentConfig(x0=y0[i], u0=float(z0[i]), p0=qa[i], p1=qb[i], theta_m=m)
            pth = seg.p_theta()
            xs = np.broadcast_to(seg.x0, (m + 1, dual.dim))
            us = np.full(m + 1, seg.u0)
            _, _, _, _, conv, _ = solve_YZ_batch(dual, xs, us, pth, defaults=defaults)
            if np.all(conv):
                out.append(seg)
                if len(out) >= count:
                    break
    if len(out) < count:
        raise NoConvergence(f"{gf.name}: could not build {count} corresponded dual segments")
    return out


def dual_witness_to_primal_jet(
    gf: GeneratingFunction, dual: GeneratingFunction, witness: dict, defaults: Defaults = DEFAULTS
) -> JetPoint:
    """Map a dual segment witness back to the primal jet at its midpoint.

    The dual jet (y0, z0, q_mid) solves to the dual fiber (y0, x*, u*), i.e.
    the primal fiber (x*, y0, z0); the primal jet there is (x*, u*, g_x).
    """
    y0 = np.asarray(witness["x0"], dtype=float)
    z0 = float(witness["u0"])
    ta, tb = float(witness["theta_a"]), float(witness["theta_b"])
    tmid = 0.5 * (ta + tb)
    p0, p1 = np.asarray(witness["p0"], dtype=float), np.asarray(witness["p1"], dtype=float)
    q_mid = (1.0 - tmid) * p0 + tmid * p1
    sol = solve_YZ(dual, JetPoint(x=y0, u=z0, p=q_mid), defaults=defaults)
    x_star = sol.y
    u_star = sol.z
    jet = eval_jet(gf, x_star, y0, np.asarray(z0), defaults=defaults)
    return JetPoint(x=x_star, u=float(jet.g), p=jet.gx)


def confirm_violation_near_jet(
    gf: GeneratingFunction,
    jet: JetPoint,
    seed: int = 0,
    directions: int = 16,
    span: float = 0.25,
    theta_m: int = 8,
    defaults: Defaults = DEFAULTS,
):
    """Search small segments through a jet for a convexity violation.

    Returns (confirmed, worst_defect): confirmed when some sampled segment has
    a midpoint defect beyond ten times the convexity slack.
    """
    n = gf.dim
    rng = np.random.default_rng(seed)
    if n == 2:
        angles = np.linspace(0.0, np.pi, directions, endpoint=False)
        etas = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    else:
        etas = rng.normal(size=(directions, n))
        etas /= np.linalg.norm(etas, axis=-1, keepdims=True)
    h = span * max(1.0, float(np.linalg.norm(jet.p)))
    worst = np.inf
    for eta in etas:
        for scale in (1.0, 0.5, 0.25):
            seg = SegmentConfig(x0=jet.x, u0=jet.u, p0=jet.p - scale * h * eta,
                                p1=jet.p + scale * h * eta, theta_m=theta_m)
            rep = check_A3w(gf, seg, defaults=defaults)
            if rep.verdict == Verdict.INCONCLUSIVE:
                continue
            raw = rep.margin - rep.extras["conv_tol"]
            worst = min(worst, raw / max(rep.extras["conv_tol"], 1e-300))
            break
    confirmed = worst < -10.0
    return confirmed, worst


def check_duality_invariance(
    gf: GeneratingFunction,
    condition_id: str,
    samples: int = 12,
    seed: int = 0,
    theta_m: int | None = None,
    defaults: Defaults = DEFAULTS,
) -> ConditionReport:
    """Verdict agreement for A3w or A3s between a generating function and its dual.

    The dual runs the same checker over corresponded segment families; when
    both sides fail the dual witness is mapped back and a primal violation is
    confirmed near the back-mapped jet.
    """
    if condition_id not in ("A3w", "A3s"):
        raise ValueError("condition_id must be A3w or A3s")
    from .conditions import sample_segments

    dual = build_dual(gf, defaults=defaults)
    primal_segments = sample_segments(gf, samples, seed, theta_m=theta_m, defaults=defaults)
    dual_segments = corresponded_dual_segments(gf, dual, samples, seed + 1, theta_m=theta_m, defaults=defaults)

    if condition_id == "A3w":
        primal_reps = [check_A3w(gf, s, seed=seed, defaults=defaults) for s in primal_segments]
        dual_reps = [check_A3w(dual, s, seed=seed, defaults=defaults) for s in dual_segments]
        pv = _family_verdict(primal_reps)
        dv = _family_verdict(dual_reps)
        p_margin = float(min(r.margin for r in primal_reps))
        d_margin = float(min(r.margin for r in dual_reps))
        p_fail = pv == Verdict.FAILS
        d_fail = dv == Verdict.FAILS
        dual_witness = next((r.witness for r in dual_reps if r.verdict == Verdict.FAILS), None)
    else:
        p_rep = check_A3s(gf, primal_segments, seed=seed, defaults=defaults)
        d_rep = check_A3s(dual, dual_segments, seed=seed, defaults=defaults)
        pv, dv = p_rep.verdict, d_rep.verdict
        p_margin, d_margin = float(p_rep.margin), float(d_rep.margin)
        p_fail = pv == Verdict.FAILS
        d_fail = dv == Verdict.FAILS
        dual_witness = d_rep.witness if d_fail else None

    extras = {
        "primal_verdict": pv.value, "dual_verdict": dv.value,
        "primal_margin": p_margin, "dual_margin": d_margin,
    }
    if pv == Verdict.INCONCLUSIVE or dv == Verdict.INCONCLUSIVE:
        return ConditionReport(
            condition_id=f"duality:{condition_id}", verdict=Verdict.INCONCLUSIVE,
            margin=float("nan"), samples_used=samples, seed=seed, extras=extras,
        )

    agree = (pv == dv)
    # Witness transport applies to genuine negative violations only; an A3s
    # failure with delta_hat near zero (flat profile) carries no violation to
    # map back.
    genuine = condition_id == "A3w" or (
        dual_witness is not None
        and dual_witness.get("delta_hat", 0.0) < -10.0 * defaults.a3s_tol
    )
    if agree and p_fail and d_fail and dual_witness is not None and genuine:
        back_jet = dual_witness_to_primal_jet(gf, dual, dual_witness, defaults=defaults)
        confirmed, worst = confirm_violation_near_jet(gf, back_jet, seed=seed, defaults=defaults)
        extras["backmapped_jet_x"] = back_jet.x
        extras["backmapped_defect_over_tol"] = worst
        agree = agree and confirmed

    verdict = Verdict.HOLDS if agree else Verdict.FAILS
    witness = None
    if verdict == Verdict.FAILS:
        witness = {"primal_verdict": pv.value, "dual_verdict": dv.value,
                   "primal_margin": p_margin, "dual_margin": d_margin}
    return ConditionReport(
        condition_id=f"duality:{condition_id}", verdict=verdict,
        margin=min(p_margin, d_margin), witness=witness,
        samples_used=samples, seed=seed, extras=extras,
    )


def _family_verdict(reports: list) -> Verdict:
    if any(r.verdict == Verdict.FAILS for r in reports):
        return Verdict.FAILS
    if any(r.verdict == Verdict.INCONCLUSIVE for r in reports):
        return Verdict.INCONCLUSIVE
    return Verdict.HOLDS


def dualize_table(
    gf: GeneratingFunction, samples: int, seed: int, defaults: Defaults = DEFAULTS
) -> np.ndarray:
    """Sampled rows (x, y, u, g*, g*_x, g*_y, g*_u) for CSV export."""
    x, y, z = sample_fiber_points(gf, samples, seed)
    jet = eval_jet(gf, x, y, z, defaults=defaults)
    u = jet.g
    zstar, valid = eval_gstar_batch(gf, x, y, u, defaults=defaults)
    gsx = -jet.gx / np.asarray(jet.gz)[..., None]
    gsy = -jet.gy / np.asarray(jet.gz)[..., None]
    gsu = 1.0 / np.asarray(jet.gz)
    return np.column_stack([x, y, u, zstar, gsx, gsy, gsu])
