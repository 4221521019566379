"""Generating-function abstraction: domain, jets, and derivative evaluation.

A generating function g(x, y, z) is a scalar function on a fibered domain
Gamma, normalized so that g_z < 0 everywhere.  All callables are vectorized:
x and y broadcast with trailing axis n, z broadcasts with the batch shape.
Analytic partials are used when declared; central finite differences on the
eval callable fill in the rest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import fd
from .errors import DegenerateGz, OutOfGamma
from .params import DEFAULTS, Defaults
from .reports import ConditionReport, Verdict

Array = np.ndarray


@dataclass(frozen=True)
class Gamma:
    """Fibered domain: x_box x y_box with an open z-interval over each (x, y).

    Boxes are (n, 2) arrays of [lo, hi].  ``pair_ok`` restricts admissible
    (x, y) pairs (e.g. a separation constraint for costs singular on the
    diagonal); membership is box containment plus interval containment plus
    ``pair_ok``.
    """

    x_box: Array
    y_box: Array
    z_interval: Callable[[Array, Array], tuple]
    pair_ok: Optional[Callable[[Array, Array], Array]] = None
    margin: float = DEFAULTS.box_margin

    @property
    def dim(self) -> int:
        return self.x_box.shape[0]

    def contains(self, x: Array, y: Array, z: Array) -> Array:
        """Vectorized membership test (closed boxes, open z-interval)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        in_x = np.all((x >= self.x_box[:, 0]) & (x <= self.x_box[:, 1]), axis=-1)
        in_y = np.all((y >= self.y_box[:, 0]) & (y <= self.y_box[:, 1]), axis=-1)
        lo, hi = self.z_interval(x, y)
        in_z = (z > lo) & (z < hi)
        ok = in_x & in_y & in_z
        if self.pair_ok is not None:
            ok = ok & self.pair_ok(x, y)
        return ok

    def shrunk(self, box: Array) -> Array:
        out = np.array(box, dtype=float)
        out[:, 0] += self.margin
        out[:, 1] -= self.margin
        return out

    def x_scales(self) -> Array:
        return np.max(np.abs(self.x_box), axis=1)

    def y_scales(self) -> Array:
        return np.max(np.abs(self.y_box), axis=1)

    def z_scale(self) -> float:
        xc = 0.5 * (self.x_box[:, 0] + self.x_box[:, 1])
        yc = 0.5 * (self.y_box[:, 0] + self.y_box[:, 1])
        lo, hi = self.z_interval(xc, yc)
        return float(max(abs(float(lo)), abs(float(hi))))


@dataclass(frozen=True)
class GeneratingFunction:
    """Callable bundle for g and its partials on a domain Gamma.

    Partial callables are optional; missing ones fall back to central finite
    differences of ``eval`` (or of an analytic first derivative when one is
    declared, which is preferred for second derivatives).  ``gstar`` is an
    optional closed-form z-inverse used as a fast path by grid transforms; the
    root-finding route stays authoritative and is tested against it.
    """

    dim: int
    eval: Callable[[Array, Array, Array], Array]
    gamma: Gamma
    name: str = "anonymous"
    params: dict = field(default_factory=dict)
    gx: Optional[Callable] = None
    gy: Optional[Callable] = None
    gz: Optional[Callable] = None
    gxx: Optional[Callable] = None
    gxy: Optional[Callable] = None
    gxz: Optional[Callable] = None
    gstar: Optional[Callable] = None

    def __post_init__(self):
        if self.gamma.dim != self.dim:
            raise ValueError("Gamma dimension does not match dim")

    @property
    def analytic_flags(self) -> dict:
        return {
            "gx": self.gx is not None,
            "gy": self.gy is not None,
            "gz": self.gz is not None,
            "gxx": self.gxx is not None,
            "gxy": self.gxy is not None,
            "gxz": self.gxz is not None,
        }

    def without_partials(self, keep_first: bool = False) -> "GeneratingFunction":
        """Clone with derivative callables stripped (FD-fallback exercise)."""
        kept = {}
        if keep_first:
            kept = {"gx": self.gx, "gy": self.gy, "gz": self.gz}
        return GeneratingFunction(
            dim=self.dim,
            eval=self.eval,
            gamma=self.gamma,
            name=self.name + "#fd",
            params=dict(self.params),
            gstar=None,
            **kept,
        )


@dataclass
class GJet:
    """All partials of g needed by the matrices E and A at one fiber point."""

    g: Array
    gx: Array
    gy: Array
    gz: Array
    gxx: Array
    gxy: Array
    gxz: Array
    source: str  # analytic | finite_difference | mixed


def _fd_steps(gf: GeneratingFunction, eps: float):
    hx = fd.step_sizes(gf.gamma.x_scales(), eps)
    hy = fd.step_sizes(gf.gamma.y_scales(), eps)
    hz = float(fd.step_sizes(np.array([gf.gamma.z_scale()]), eps)[0])
    return hx, hy, hz


def eval_jet(
    gf: GeneratingFunction,
    x: Array,
    y: Array,
    z: Array,
    defaults: Defaults = DEFAULTS,
    check_membership: bool = True,
) -> GJet:
    """Evaluate g with first partials and the second partials g_xx, g_xy, g_xz.

    Inputs broadcast; with batched inputs the jet fields carry the batch shape.
    Raises OutOfGamma when membership fails and DegenerateGz when g_z >= 0
    anywhere in the batch.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if check_membership:
        ok = gf.gamma.contains(x, y, z)
        if not np.all(ok):
            raise OutOfGamma(f"{gf.name}: point outside Gamma")

    hx1, hy1, hz1 = _fd_steps(gf, defaults.fd_eps_first)
    hx2, _, hz2 = _fd_steps(gf, defaults.fd_eps_second)

    used_analytic = []
    used_fd = []

    def track(name, value, analytic):
        (used_analytic if analytic else used_fd).append(name)
        return value

    g = gf.eval(x, y, z)

    if gf.gx is not None:
        gx = track("gx", gf.gx(x, y, z), True)
    else:
        gx = track("gx", fd.grad(lambda xx: gf.eval(xx, y, z), x, hx1), False)
    if gf.gy is not None:
        gy = track("gy", gf.gy(x, y, z), True)
    else:
        gy = track("gy", fd.grad(lambda yy: gf.eval(x, yy, z), y, hy1), False)
    if gf.gz is not None:
        gz = track("gz", gf.gz(x, y, z), True)
    else:
        gz = track("gz", fd.partial_scalar(lambda zz: gf.eval(x, y, zz), z, hz1), False)

    if gf.gxx is not None:
        gxx = track("gxx", gf.gxx(x, y, z), True)
    elif gf.gx is not None:
        gxx = track("gxx", fd.jacobian(lambda xx: gf.gx(xx, y, z), x, hx1), False)
    else:
        gxx = track("gxx", fd.hessian(lambda xx: gf.eval(xx, y, z), x, hx2), False)

    if gf.gxy is not None:
        gxy = track("gxy", gf.gxy(x, y, z), True)
    elif gf.gx is not None:
        gxy = track("gxy", fd.jacobian(lambda yy: gf.gx(x, yy, z), y, hy1), False)
    else:
        gxy = track(
            "gxy",
            fd.jacobian(
                lambda yy: fd.grad(lambda xx: gf.eval(xx, yy, z), x, fd.step_sizes(gf.gamma.x_scales(), defaults.fd_eps_second)),
                y,
                fd.step_sizes(gf.gamma.y_scales(), defaults.fd_eps_second),
            ),
            False,
        )

    if gf.gxz is not None:
        gxz = track("gxz", gf.gxz(x, y, z), True)
    elif gf.gx is not None:
        gxz = track("gxz", fd.partial_scalar(lambda zz: gf.gx(x, y, zz), z, hz1), False)
    else:
        gxz = track(
            "gxz",
            fd.partial_scalar(
                lambda zz: fd.grad(lambda xx: gf.eval(xx, y, zz), x, fd.step_sizes(gf.gamma.x_scales(), defaults.fd_eps_second)),
                z,
                hz2,
            ),
            False,
        )

    gxx = 0.5 * (gxx + np.swapaxes(gxx, -1, -2))

    if np.any(np.asarray(gz) >= 0.0):
        raise DegenerateGz(f"{gf.name}: g_z >= 0 inside Gamma")

    if not used_fd:
        source = "analytic"
    elif not used_analytic:
        source = "finite_difference"
    else:
        source = "mixed"
    return GJet(g=g, gx=gx, gy=gy, gz=gz, gxx=gxx, gxy=gxy, gxz=gxz, source=source)


def sample_fiber_points(
    gf: GeneratingFunction, count: int, seed: int, max_tries: int = 200
) -> tuple:
    """Deterministic rejection sampling of (x, y, z) in the interior of Gamma.

    Returns arrays x (count, n), y (count, n), z (count,).
    """
    rng = np.random.default_rng(seed)
    gamma = gf.gamma
    xb = gamma.shrunk(gamma.x_box)
    yb = gamma.shrunk(gamma.y_box)
    xs, ys, zs = [], [], []
    have = 0
    for _ in range(max_tries):
        need = count - have
        if need <= 0:
            break
        m = max(2 * need, 16)
        x = rng.uniform(xb[:, 0], xb[:, 1], size=(m, gamma.dim))
        y = rng.uniform(yb[:, 0], yb[:, 1], size=(m, gamma.dim))
        lo, hi = gamma.z_interval(x, y)
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (m,)).copy() + gamma.margin
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (m,)).copy() - gamma.margin
        t = rng.uniform(0.0, 1.0, size=m)
        z = lo + t * (hi - lo)
        ok = (hi > lo) & gamma.contains(x, y, z)
        xs.append(x[ok])
        ys.append(y[ok])
        zs.append(z[ok])
        have += int(np.sum(ok))
    if have < count:
        raise OutOfGamma(f"{gf.name}: could not sample {count} interior points")
    x = np.concatenate(xs)[:count]
    y = np.concatenate(ys)[:count]
    z = np.concatenate(zs)[:count]
    return x, y, z


def validate_gamma(
    gf: GeneratingFunction, samples: int, seed: int, defaults: Defaults = DEFAULTS
) -> ConditionReport:
    """Check the sign normalization g_z < 0 on seeded interior points.

    Reports min(-g_z) over the samples and any membership inconsistency; the
    verdict passes iff min(-g_z) > 0.  Failures are reported, never raised.
    """
    x, y, z = sample_fiber_points(gf, samples, seed)
    member = gf.gamma.contains(x, y, z)
    if gf.gz is not None:
        gz = np.asarray(gf.gz(x, y, z), dtype=float)
    else:
        _, _, hz1 = _fd_steps(gf, defaults.fd_eps_first)
        gz = fd.partial_scalar(lambda zz: gf.eval(x, y, zz), z, hz1)
    neg_gz = -gz
    k = int(np.argmin(neg_gz))
    margin = float(neg_gz[k])
    bad_membership = int(np.sum(~member))
    verdict = Verdict.HOLDS if (margin > 0.0 and bad_membership == 0) else Verdict.FAILS
    witness = None
    if verdict == Verdict.FAILS:
        witness = {
            "x": x[k],
            "y": y[k],
            "z": float(z[k]),
            "gz": float(gz[k]),
            "membership_failures": bad_membership,
        }
    return ConditionReport(
        condition_id="gamma",
        verdict=verdict,
        margin=margin,
        witness=witness,
        samples_used=samples,
        seed=seed,
        extras={"membership_failures": bad_membership},
    )


def verify_partials(
    gf: GeneratingFunction,
    samples: int = 100,
    seed: int = 0,
    rel_tol: float = 1e-5,
    defaults: Defaults = DEFAULTS,
) -> dict:
    """Compare declared analytic partials against central differences of eval.

    Returns a map partial-name -> worst relative error over the samples.
    GeneratingFunction invariant: every declared partial agrees to rel_tol.
    """
    x, y, z = sample_fiber_points(gf, samples, seed)
    hx1, hy1, hz1 = _fd_steps(gf, defaults.fd_eps_first)
    errors = {}

    def rel(a, b):
        scale = np.maximum(1.0, np.abs(b))
        return float(np.max(np.abs(a - b) / scale))

    if gf.gx is not None:
        errors["gx"] = rel(gf.gx(x, y, z), fd.grad(lambda xx: gf.eval(xx, y, z), x, hx1))
    if gf.gy is not None:
        errors["gy"] = rel(gf.gy(x, y, z), fd.grad(lambda yy: gf.eval(x, yy, z), y, hy1))
    if gf.gz is not None:
        errors["gz"] = rel(gf.gz(x, y, z), fd.partial_scalar(lambda zz: gf.eval(x, y, zz), z, hz1))
    if gf.gxx is not None and gf.gx is not None:
        errors["gxx"] = rel(gf.gxx(x, y, z), fd.jacobian(lambda xx: gf.gx(xx, y, z), x, hx1))
    if gf.gxy is not None and gf.gx is not None:
        errors["gxy"] = rel(gf.gxy(x, y, z), fd.jacobian(lambda yy: gf.gx(x, yy, z), y, hy1))
    if gf.gxz is not None and gf.gx is not None:
        errors["gxz"] = rel(gf.gxz(x, y, z), fd.partial_scalar(lambda zz: gf.gx(x, y, zz), z, hz1))
    bad = {k: v for k, v in errors.items() if v > rel_tol}
    if bad:
        raise AssertionError(f"{gf.name}: analytic partials disagree with FD: {bad}")
    return errors
