"""Scenario runner: config parsing, check orchestration, and report emission.

A scenario names a catalog entry (or registered plugin), a list of checks, a
seed, and grid/tolerance overrides.  Checks never abort the run on a failing
verdict; the runner aggregates every ConditionReport into a RunReport whose
JSON serialization is byte-stable for a fixed config (timings are emitted to
a separate sidecar file precisely so the main report stays deterministic).
"""

from __future__ import annotations

import configparser
import json
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, catalog
from .conditions import (SegmentConfig, check_A1_sampled, check_A1star_sampled,
                         check_A2, check_A3s, check_A3w, sample_segments,
                         witness_subsegment)
from .core import GeneratingFunction, sample_fiber_points, validate_gamma
from .duality import check_duality_invariance
from .errors import ConfigError, GenFunError, HypothesisUnverifiable
from .gconvex import (GAffine, Grid, SampledFunction, check_corollary31,
                      check_theorem31, check_theorem32, g_transform,
                      sample_g_affine_max)
from .geometry import (check_local_gconvexity, check_max_principle,
                       dual_segment, fundamental_form_monotonicity,
                       make_section, max_principle_delta0)
from .implicit import eval_gstar_batch
from .parallel import ordered_map
from .params import DEFAULTS, Defaults
from .reports import ConditionReport, Verdict, _jsonable

KNOWN_CHECKS = (
    "gamma", "A1", "A1*", "A2", "A3w", "A3s",
    "duality:A3w", "duality:A3s",
    "thm2.1", "thm2.2", "thm3.1", "cor3.1", "thm3.2",
)

_TOLERANCE_KEYS = (
    "newton_tol", "max_iter", "conv_tol", "a2_tol", "a3s_tol", "mp_tol",
    "ff_tol", "sep_tol", "coll_tol", "hess_tol", "fd_eps_first",
    "fd_eps_second", "h_mtw", "h_hess",
)


@dataclass
class ScenarioConfig:
    gf_id: str
    gf_params: dict = field(default_factory=dict)
    checks: tuple = ()
    seed: int = 0
    samples: int = 400
    theta_m: int = DEFAULTS.theta_m
    x_grid: int = 65
    y_grid: int = 33
    radius: float | None = None
    tolerances: dict = field(default_factory=dict)
    output_dir: str = "out"

    def defaults(self) -> Defaults:
        overrides = dict(self.tolerances)
        overrides["theta_m"] = self.theta_m
        if "max_iter" in overrides:
            overrides["max_iter"] = int(overrides["max_iter"])
        return DEFAULTS.replace(**overrides)

    def echo(self) -> dict:
        return {
            "generating_function": {"id": self.gf_id, "params": dict(self.gf_params)},
            "checks": list(self.checks),
            "seed": int(self.seed),
            "samples": int(self.samples),
            "grids": {"theta_m": self.theta_m, "x_grid": self.x_grid,
                      "y_grid": self.y_grid, "radius": self.radius},
            "tolerances": dict(self.tolerances),
            "output_dir": self.output_dir,
        }


def parse_config(path) -> ScenarioConfig:
    """Read the keyed INI scenario file (sections: scenario, params, grids, tolerances)."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file: {path}")
    if "scenario" not in parser:
        raise ConfigError("missing [scenario] section")
    sc = parser["scenario"]
    gf_id = sc.get("generating_function", sc.get("id", "")).strip()
    if not gf_id:
        raise ConfigError("scenario.generating_function is required")
    checks = tuple(c.strip() for c in sc.get("checks", "").split(",") if c.strip())
    for c in checks:
        if c not in KNOWN_CHECKS:
            raise ConfigError(f"unknown check id: {c}")
    try:
        seed = int(sc.get("seed", "0"))
        samples = int(sc.get("samples", "400"))
    except ValueError as exc:
        raise ConfigError(f"bad scenario value: {exc}") from None

    params = {}
    if "params" in parser:
        for key, val in parser["params"].items():
            try:
                params[key] = int(val) if val.strip().isdigit() else float(val)
            except ValueError:
                raise ConfigError(f"parameter {key} must be numeric") from None

    grids = parser["grids"] if "grids" in parser else {}
    try:
        theta_m = int(grids.get("theta_m", DEFAULTS.theta_m))
        x_grid = int(grids.get("x_grid", 65))
        y_grid = int(grids.get("y_grid", 33))
        radius = grids.get("radius", None)
        radius = float(radius) if radius is not None else None
    except ValueError as exc:
        raise ConfigError(f"bad grid value: {exc}") from None

    tolerances = {}
    if "tolerances" in parser:
        for key, val in parser["tolerances"].items():
            if key not in _TOLERANCE_KEYS:
                raise ConfigError(f"unknown tolerance key: {key}")
            try:
                fval = float(val)
            except ValueError:
                raise ConfigError(f"tolerance {key} must be numeric") from None
            if fval <= 0.0:
                raise ConfigError(f"tolerance {key} must be positive")
            tolerances[key] = fval

    return ScenarioConfig(
        gf_id=gf_id, gf_params=params, checks=checks, seed=seed, samples=samples,
        theta_m=theta_m, x_grid=x_grid, y_grid=y_grid, radius=radius,
        tolerances=tolerances, output_dir=sc.get("output_dir", "out"),
    )


def _check_seed(base_seed: int, check_id: str) -> int:
    return int(np.random.SeedSequence((base_seed, zlib.crc32(check_id.encode()))).generate_state(1)[0])


def _default_radius(gf: GeneratingFunction) -> float:
    return 0.1 * float(np.linalg.norm(gf.gamma.x_box[:, 1] - gf.gamma.x_box[:, 0]))


def _segment_count(cfg: ScenarioConfig) -> int:
    return max(4, min(20, cfg.samples // 50))


def _worst(reports) -> Verdict:
    if any(r.verdict == Verdict.FAILS for r in reports):
        return Verdict.FAILS
    if any(r.verdict == Verdict.INCONCLUSIVE for r in reports):
        return Verdict.INCONCLUSIVE
    return Verdict.HOLDS


def _aggregate(condition_id, reports, seed, extras=None) -> ConditionReport:
    verdict = _worst(reports)
    margins = [r.margin for r in reports if np.isfinite(r.margin)]
    margin = float(min(margins)) if margins else float("nan")
    witness = next((r.witness for r in reports if r.verdict == Verdict.FAILS), None)
    ex = dict(extras or {})
    ex["sub_reports"] = [r.to_dict() for r in reports]
    return ConditionReport(
        condition_id=condition_id, verdict=verdict, margin=margin, witness=witness,
        samples_used=int(sum(r.samples_used for r in reports)), seed=seed, extras=ex,
    )


def _run_gamma(gf, cfg, defaults, seed):
    return validate_gamma(gf, cfg.samples, seed, defaults=defaults)


def _run_A1(gf, cfg, defaults, seed):
    xb = gf.gamma.shrunk(gf.gamma.x_box)
    xs = [0.5 * (xb[:, 0] + xb[:, 1])]
    extra, _, _ = sample_fiber_points(gf, 2, seed)
    xs.extend(extra)
    reports = [
        check_A1_sampled(gf, x, cfg.samples * 10, seed, defaults=defaults) for x in xs
    ]
    return _aggregate("A1", reports, seed)


def _run_A1star(gf, cfg, defaults, seed):
    _, ys, zs = sample_fiber_points(gf, 3, seed)
    reports = [
        check_A1star_sampled(gf, ys[i], float(zs[i]), cfg.samples * 10, seed, defaults=defaults)
        for i in range(3)
    ]
    return _aggregate("A1*", reports, seed)


def _run_A2(gf, cfg, defaults, seed):
    return check_A2(gf, cfg.samples, seed, defaults=defaults)


def _run_A3w(gf, cfg, defaults, seed):
    segs = sample_segments(gf, _segment_count(cfg), seed, theta_m=cfg.theta_m, defaults=defaults)
    reports = [check_A3w(gf, s, seed=seed, defaults=defaults) for s in segs]
    return _aggregate("A3w", reports, seed)


def _run_A3s(gf, cfg, defaults, seed):
    segs = sample_segments(gf, _segment_count(cfg), seed, theta_m=cfg.theta_m, defaults=defaults)
    return check_A3s(gf, segs, seed=seed, defaults=defaults)


def _run_duality(which):
    def run(gf, cfg, defaults, seed):
        return check_duality_invariance(
            gf, which, samples=max(4, _segment_count(cfg) // 2), seed=seed,
            theta_m=min(cfg.theta_m, 16), defaults=defaults,
        )
    return run


def _run_thm21(gf, cfg, defaults, seed):
    """Equivalence chain: where A3w holds both geometric forms hold; where it
    fails, at least one fails at the transported witness sub-segment."""
    radius = cfg.radius or _default_radius(gf)
    segs = sample_segments(gf, _segment_count(cfg), seed, theta_m=min(cfg.theta_m, 16), defaults=defaults)
    reports = []
    chain_ok = True
    details = []
    for i, seg in enumerate(segs):
        a3w = check_A3w(gf, seg, seed=seed, defaults=defaults)
        if a3w.verdict == Verdict.FAILS:
            sub = witness_subsegment(seg, a3w.witness)
        else:
            sub = seg
        ds = dual_segment(gf, sub, defaults=defaults)
        section = make_section(gf, ds, sub.theta_m, radius, grid_points=cfg.x_grid, defaults=defaults)
        gc = check_local_gconvexity(gf, section, ds.y_theta[0], float(ds.z_theta[0]), radius, defaults=defaults)
        mp = check_max_principle(gf, ds, radius, delta0=0.0, grid_points=cfg.y_grid, defaults=defaults)
        if a3w.verdict == Verdict.HOLDS:
            consistent = gc.verdict == Verdict.HOLDS and mp.verdict == Verdict.HOLDS
        elif a3w.verdict == Verdict.FAILS:
            consistent = gc.verdict == Verdict.FAILS or mp.verdict == Verdict.FAILS
        else:
            consistent = True
        chain_ok &= consistent
        details.append({
            "segment": i, "A3w": a3w.verdict.value, "A3w(1)": gc.verdict.value,
            "A3w(2)": mp.verdict.value, "consistent": consistent,
            "gc_margin": gc.margin, "mp_margin": mp.margin,
        })
        reports.extend([gc, mp])
    verdict = Verdict.HOLDS if chain_ok else Verdict.FAILS
    if any(r.verdict == Verdict.INCONCLUSIVE for r in reports):
        verdict = Verdict.INCONCLUSIVE
    margins = [r.margin for r in reports if np.isfinite(r.margin)]
    witness = None
    if verdict == Verdict.FAILS:
        witness = next((d for d in details if not d["consistent"]), None)
    return ConditionReport(
        condition_id="thm2.1", verdict=verdict,
        margin=float(min(margins)) if margins else float("nan"),
        witness=witness, samples_used=len(segs), seed=seed,
        extras={"chain": details},
    )


def _run_thm22(gf, cfg, defaults, seed):
    """Quantitative chain: sign of the bisected delta0 matches sign of
    delta_hat, and the fundamental-form monotonicity margin stays above
    -ff_tol."""
    radius = cfg.radius or _default_radius(gf)
    segs = sample_segments(gf, max(3, _segment_count(cfg) // 2), seed,
                           theta_m=min(cfg.theta_m, 16), defaults=defaults)
    a3s = check_A3s(gf, segs, seed=seed, defaults=defaults)
    probe_segs = list(segs)
    if a3s.witness is not None:
        # The modulus minimizer may be an interior triple; the quantitative
        # principle must be probed on that sub-segment, where the full-segment
        # crest would average the defect away.
        w = a3s.witness
        base = SegmentConfig(x0=np.asarray(w["x0"]), u0=float(w["u0"]),
                             p0=np.asarray(w["p0"]), p1=np.asarray(w["p1"]),
                             theta_m=min(cfg.theta_m, 16))
        probe_segs.append(witness_subsegment(base, w))
    delta0s = []
    ff_reports = []
    for seg in probe_segs:
        ds = dual_segment(gf, seg, defaults=defaults)
        delta0s.append(max_principle_delta0(gf, ds, radius, grid_points=cfg.y_grid, defaults=defaults))
        ff_reports.append(fundamental_form_monotonicity(gf, ds, defaults=defaults, seed=seed))
    delta0_min = float(min(delta0s))
    delta_hat = a3s.extras.get("delta_hat", float("nan"))
    pos_tol = 1e-4
    sign_agree = (delta0_min > pos_tol) == (delta_hat > defaults.a3s_tol)
    ff_margin = float(min(r.margin for r in ff_reports))
    ff_holds = all(r.verdict == Verdict.HOLDS for r in ff_reports)
    # The normalized-Hessian monotonicity restates the weak condition; it must
    # hold whenever the profile is not clearly concave (for clearly concave
    # profiles it is allowed to detect the violation).
    clearly_concave = delta_hat <= -10.0 * defaults.a3s_tol
    ff_consistent = clearly_concave or ff_holds
    verdict = Verdict.HOLDS if (sign_agree and ff_consistent) else Verdict.FAILS
    witness = None
    if verdict == Verdict.FAILS:
        witness = {"delta0_min": delta0_min, "delta_hat": delta_hat, "ff_margin": ff_margin}
    return ConditionReport(
        condition_id="thm2.2", verdict=verdict, margin=ff_margin, witness=witness,
        samples_used=len(segs), seed=seed,
        extras={"delta0_per_segment": delta0s, "delta0_min": delta0_min,
                "delta_hat": delta_hat, "sign_agreement": sign_agree,
                "ff_consistent": ff_consistent},
    )


def _seeded_g_affines(gf, count, seed, defaults, shrink=0.5):
    """Seeded support parameters, y drawn from a central sub-box.

    Dual paths between support parameters roughly follow their chord; keeping
    the parameters central keeps the hypothesis segments inside the boxed
    domain.
    """
    yb = gf.gamma.y_box
    yc = 0.5 * (yb[:, 0] + yb[:, 1])
    half = 0.5 * shrink * (yb[:, 1] - yb[:, 0])
    out = []
    attempt = 0
    while len(out) < count and attempt < 50:
        x, y, z = sample_fiber_points(gf, 4 * count, seed + attempt)
        keep = np.all(np.abs(y - yc) <= half, axis=-1)
        for i in np.nonzero(keep)[0]:
            # Contract z toward the interval midpoint so lifted values stay
            # well inside the open interval.
            lo, hi = gf.gamma.z_interval(x[i], y[i])
            zc = 0.5 * (float(lo) + float(hi))
            out.append(GAffine(y=y[i], z=zc + shrink * (float(z[i]) - zc)))
            if len(out) >= count:
                break
        attempt += 1
    if len(out) < count:
        raise GenFunError(f"{gf.name}: could not seed {count} central support parameters")
    return out


def _central_box(box, scale=0.7):
    c = 0.5 * (box[:, 0] + box[:, 1])
    half = 0.5 * scale * (box[:, 1] - box[:, 0])
    return np.stack([c - half, c + half], axis=1)


def _run_thm31(gf, cfg, defaults, seed):
    # The theorem domain is a central sub-box: lifted hypothesis values stay
    # well inside the z-interval even for entries with narrow intervals.
    xg = Grid(box=_central_box(gf.gamma.x_box), shape=(cfg.x_grid,) * gf.dim)
    yg = Grid(box=gf.gamma.shrunk(gf.gamma.y_box), shape=(cfg.y_grid,) * gf.dim)
    gas = _seeded_g_affines(gf, 5, seed, defaults, shrink=0.25)
    u = sample_g_affine_max(gf, xg, gas)
    # Reference g-affine: a sixth seeded parameter, shifted up so the section
    # {u < g0} is a nonempty proper subset.
    ref = _seeded_g_affines(gf, 1, seed + 1, defaults, shrink=0.25)[0]
    vals = gf.eval(xg.nodes(), ref.y, np.asarray(ref.z))
    shift = float(np.quantile(u.values - vals, 0.6))
    lo, hi = gf.gamma.z_interval(xg.nodes()[:1], np.broadcast_to(ref.y, (1, gf.dim)))
    lo, hi = float(np.max(lo)), float(np.min(hi))
    # g decreasing in z: lowering z raises the g-affine; stay in the central
    # part of the interval so the hypothesis lifts remain attainable.
    znew = ref.z - shift
    znew = float(np.clip(znew, lo + 0.2 * (hi - lo), hi - 0.2 * (hi - lo)))
    ga0 = GAffine(y=ref.y, z=znew)
    try:
        return check_theorem31(gf, u, ga0, yg, seed=seed, theta_m=min(cfg.theta_m, 8), defaults=defaults)
    except HypothesisUnverifiable as exc:
        return ConditionReport(
            condition_id="thm3.1", verdict=Verdict.INCONCLUSIVE, margin=float("nan"),
            seed=seed, extras={"reason": str(exc)},
        )


def _kink_fixture(gf, xg, yg, seed, defaults):
    """Two g-affine parameters on the y-grid whose graphs cross at a grid node."""
    rng = np.random.default_rng(seed)
    ynodes = yg.nodes()
    xnodes = xg.nodes()
    xc = xnodes[xg.index_of(xnodes[np.argmin(np.linalg.norm(xnodes - np.mean(xnodes, axis=0), axis=-1))])]
    for _ in range(50):
        ia, ib = rng.integers(0, ynodes.shape[0], size=2)
        ya, yb = ynodes[ia], ynodes[ib]
        if np.linalg.norm(ya - yb) < 0.2 * float(np.max(yg.box[:, 1] - yg.box[:, 0])):
            continue
        lo_a, hi_a = gf.gamma.z_interval(xc, ya)
        za = 0.25 * float(lo_a) + 0.75 * float(hi_a)
        target = gf.eval(xc, ya, np.asarray(za))
        zb, valid = eval_gstar_batch(gf, xc, yb, np.asarray(target), defaults=defaults)
        if not bool(valid):
            continue
        return GAffine(y=ya, z=float(za)), GAffine(y=yb, z=float(zb)), xc
    raise GenFunError(f"{gf.name}: could not construct a kink fixture")


def _run_cor31(gf, cfg, defaults, seed):
    xg = Grid(box=_central_box(gf.gamma.x_box), shape=(cfg.x_grid,) * gf.dim)
    yg = Grid(box=gf.gamma.shrunk(gf.gamma.y_box), shape=(cfg.y_grid,) * gf.dim)
    ga, gb, xc = _kink_fixture(gf, xg, yg, seed, defaults)
    u = sample_g_affine_max(gf, xg, [ga, gb])
    return check_corollary31(gf, u, xc, yg, defaults=defaults)


def _run_thm32(gf, cfg, defaults, seed):
    shape = (min(cfg.x_grid, 33),) * gf.dim
    xg = Grid(box=_central_box(gf.gamma.x_box), shape=shape)
    yg = Grid(box=gf.gamma.shrunk(gf.gamma.y_box), shape=(min(cfg.y_grid, 33),) * gf.dim)
    gas = _seeded_g_affines(gf, 4, seed, defaults)
    u = sample_g_affine_max(gf, xg, gas)
    return check_theorem32(gf, u, yg, seed=seed, defaults=defaults)


_RUNNERS = {
    "gamma": _run_gamma,
    "A1": _run_A1,
    "A1*": _run_A1star,
    "A2": _run_A2,
    "A3w": _run_A3w,
    "A3s": _run_A3s,
    "duality:A3w": _run_duality("A3w"),
    "duality:A3s": _run_duality("A3s"),
    "thm2.1": _run_thm21,
    "thm2.2": _run_thm22,
    "thm3.1": _run_thm31,
    "cor3.1": _run_cor31,
    "thm3.2": _run_thm32,
}


@dataclass
class RunReport:
    config: dict
    checks: list          # (check_id, ConditionReport)
    timings: dict         # check_id -> seconds; sidecar only, never in report.json
    defaults_used: dict
    version: str

    @property
    def overall(self) -> str:
        return _worst([rep for _, rep in self.checks]).value

    def exit_code(self) -> int:
        verdicts = [rep.verdict for _, rep in self.checks]
        if any(v == Verdict.FAILS for v in verdicts):
            return 1
        if any(v == Verdict.INCONCLUSIVE for v in verdicts):
            return 2
        return 0

    def to_dict(self) -> dict:
        return {
            "config": _jsonable(self.config),
            "version": self.version,
            "defaults_used": _jsonable(self.defaults_used),
            "checks": [
                {"check": cid, "report": rep.to_dict()} for cid, rep in self.checks
            ],
            "overall": self.overall,
        }


def build_gf(cfg: ScenarioConfig) -> GeneratingFunction:
    try:
        entry = catalog.get_entry(cfg.gf_id)
    except KeyError as exc:
        raise ConfigError(str(exc)) from None
    try:
        return entry.build(cfg.gf_params)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{cfg.gf_id}: {exc}") from None


def run_scenario(cfg: ScenarioConfig) -> RunReport:
    """Execute the configured checks in declared order; never abort on fails."""
    if not cfg.checks:
        raise ConfigError("no checks requested")
    gf = build_gf(cfg)
    defaults = cfg.defaults()

    def one(check_id):
        t0 = time.perf_counter()
        seed = _check_seed(cfg.seed, check_id)
        try:
            rep = _RUNNERS[check_id](gf, cfg, defaults, seed)
        except GenFunError as exc:
            rep = ConditionReport(
                condition_id=check_id, verdict=Verdict.INCONCLUSIVE, margin=float("nan"),
                seed=seed, extras={"error": f"{type(exc).__name__}: {exc}"},
            )
        return check_id, rep, time.perf_counter() - t0

    results = ordered_map(one, list(cfg.checks))
    checks = [(cid, rep) for cid, rep, _ in results]
    timings = {cid: dt for cid, _, dt in results}
    return RunReport(
        config=cfg.echo(), checks=checks, timings=timings,
        defaults_used=defaults.as_dict(), version=__version__,
    )


def _fmt17(value) -> str:
    return f"{float(value):.17g}"


def _witness_csv(witness) -> str:
    if not witness:
        return ""
    parts = []
    for key in sorted(witness):
        val = witness[key]
        if isinstance(val, (list, tuple, np.ndarray)):
            flat = np.asarray(val, dtype=float).ravel()
            parts.append(f"{key}=[" + " ".join(_fmt17(v) for v in flat) + "]")
        elif isinstance(val, (int, float, np.floating, np.integer)):
            parts.append(f"{key}={_fmt17(val)}")
        else:
            parts.append(f"{key}={val}")
    return ";".join(parts)


def emit_report(report: RunReport, output_dir=None, formats=("json", "csv")) -> dict:
    """Write report.json (byte-stable) and margins.csv; timings go to a sidecar."""
    out = Path(output_dir or report.config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    if "json" in formats:
        path = out / "report.json"
        payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
        path.write_text(payload + "\n", encoding="utf-8")
        written["json"] = str(path)
        tpath = out / "timings.json"
        tpath.write_text(
            json.dumps({k: round(v, 6) for k, v in report.timings.items()}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        written["timings"] = str(tpath)
    if "csv" in formats:
        path = out / "margins.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("check_id,margin,verdict,witness\n")
            for cid, rep in report.checks:
                margin = _fmt17(rep.margin) if np.isfinite(rep.margin) else "nan"
                fh.write(f"{cid},{margin},{rep.verdict.value},\"{_witness_csv(rep.witness)}\"\n")
        written["csv"] = str(path)
    return written
