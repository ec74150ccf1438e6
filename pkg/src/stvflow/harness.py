"""Batch runs: configuration files, studies, CSV outputs and run manifests.

A run configuration is a flat text file with one ``key = value`` pair per
line; ``#`` starts a comment.  Recognized keys::

    radius = 1.0              # disc radius R
    n = 64                    # cells per axis (even, >= 8)
    omegas = 1.0, 0.5         # one rotation rate per Brownian motion; empty for none
    lambda = 0.1              # or a comma list for study = lambda-sweep
    dt = 0.001
    T = 0.2                   # or "auto": 4 |x|_2 / rho for the extinction study
    scheme = rescaled         # rescaled | ito
    frame = invariant         # invariant | conjugate
    seed_base = 0
    seed_count = 1            # 0 means the deterministic path beta = 0
    initial = cone            # cone | bump | square | checkerboard | image:<file.pgm>
    study = single            # single | ensemble | lambda-sweep | extinction |
                              # vi-check | contraction | unit-properties
    output_dir = out
    snapshot_stride = 0       # write every k-th state grid; 0 disables
    pairs = 10                # initial pairs for study = contraction

Every study writes CSV files (RFC 4180, CRLF line ends, ``repr`` floats) and a
``summary.json`` with one boolean per property check, then a
``manifest.json`` that echoes the configuration and lists SHA-256 hashes of
all outputs.  CSV content never depends on timing or worker count, so
:func:`verify_manifest` can rerun a manifest and compare hashes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, StvflowError
from .grid import GridSpec, ScalarField, build_grid, l2_norm
from .noise import sample_path, write_path_csv, zero_path
from .solver import SolverConfig, compute_diagnostics, lambda_sweep, solve, solve_rescaled, write_snapshots
from .transport import TransportSystem, group_apply_multi

__all__ = [
    "RunConfig",
    "RunManifest",
    "parse_config",
    "load_config",
    "initial_condition",
    "load_image",
    "run",
    "ensemble",
    "verify_manifest",
    "default_workers",
    "WORKERS_ENV",
]

WORKERS_ENV = "STVFLOW_WORKERS"
STUDIES = ("single", "ensemble", "lambda-sweep", "extinction", "vi-check", "contraction", "unit-properties")
BUILTINS = ("cone", "bump", "square", "checkerboard")


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Parsed run configuration; ``raw`` keeps the key/value text for manifests."""

    radius: float = 1.0
    n: int = 64
    omegas: tuple = (1.0,)
    lams: tuple = (0.1,)
    dt: float = 1e-3
    T: float | None = 0.2  # None means "auto"
    scheme: str = "rescaled"
    frame: str = "invariant"
    seed_base: int = 0
    seed_count: int = 1
    initial: str = "cone"
    study: str = "single"
    output_dir: str = "out"
    snapshot_stride: int = 0
    pairs: int = 10
    base_dir: str = "."
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def lam(self) -> float:
        return self.lams[0]

    @property
    def seeds(self) -> tuple:
        return tuple(range(self.seed_base, self.seed_base + self.seed_count))

    def grid(self) -> GridSpec:
        return build_grid(self.radius, self.n)

    def transport(self) -> TransportSystem:
        return TransportSystem.from_omegas(self.omegas)


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


_PARSERS = {
    "radius": ("radius", float),
    "n": ("n", int),
    "omegas": ("omegas", _floats),
    "lambda": ("lams", _floats),
    "dt": ("dt", float),
    "T": ("T", lambda v: None if v.strip().lower() == "auto" else float(v)),
    "scheme": ("scheme", str),
    "frame": ("frame", str),
    "seed_base": ("seed_base", int),
    "seed_count": ("seed_count", int),
    "initial": ("initial", str),
    "study": ("study", str),
    "output_dir": ("output_dir", str),
    "snapshot_stride": ("snapshot_stride", int),
    "pairs": ("pairs", int),
}


def parse_config(text: str, base_dir: str | os.PathLike = ".") -> RunConfig:
    """Parse configuration text; errors name the offending line and key.

    Relative image paths are resolved against ``base_dir``.
    """
    values, raw, lines = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {body!r}")
        key, value = (p.strip() for p in body.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: key {key!r} repeated (first on line {lines[key]})")
        name, conv = _PARSERS[key]
        try:
            values[name] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: key {key!r}: cannot parse {value!r} ({exc})") from None
        raw[key], lines[key] = value, lineno
    cfg = RunConfig(base_dir=str(base_dir), raw=raw, **values)

    def fail(key, msg):
        where = f"line {lines[key]}: " if key in lines else ""
        raise ConfigError(f"{where}key {key!r}: {msg}")

    if cfg.radius <= 0:
        fail("radius", "must be positive")
    if cfg.n < 8 or cfg.n % 2:
        fail("n", "must be an even integer >= 8")
    if not cfg.lams or any(not 0 < v <= 1 for v in cfg.lams):
        fail("lambda", "values must lie in (0, 1]")
    if cfg.dt <= 0:
        fail("dt", "must be positive")
    if cfg.T is not None and (cfg.T < cfg.dt or abs(round(cfg.T / cfg.dt) * cfg.dt - cfg.T) > 1e-9 * cfg.T):
        fail("T", "must be an integer multiple of dt, at least dt")
    if cfg.T is None and cfg.study != "extinction":
        fail("T", "'auto' is only available for study = extinction")
    if cfg.scheme not in ("rescaled", "ito"):
        fail("scheme", "must be 'rescaled' or 'ito'")
    if cfg.frame not in ("invariant", "conjugate"):
        fail("frame", "must be 'invariant' or 'conjugate'")
    if cfg.seed_count < 0:
        fail("seed_count", "must be >= 0")
    if cfg.study not in STUDIES:
        fail("study", f"must be one of {', '.join(STUDIES)}")
    if cfg.study == "ensemble" and cfg.seed_count < 2:
        fail("seed_count", "ensemble needs at least 2 seeds")
    if cfg.study == "lambda-sweep" and (len(cfg.lams) < 2 or any(b >= a for a, b in zip(cfg.lams, cfg.lams[1:]))):
        fail("lambda", "lambda-sweep needs a strictly decreasing list of at least two values")
    if cfg.initial.startswith("image:"):
        p = Path(cfg.initial[len("image:"):].strip())
        if not p.is_absolute():
            p = Path(base_dir) / p
        if not p.is_file():
            fail("initial", f"image file {str(p)!r} does not exist")
    elif cfg.initial not in BUILTINS:
        fail("initial", f"must be one of {', '.join(BUILTINS)} or image:<file>")
    if cfg.snapshot_stride < 0:
        fail("snapshot_stride", "must be >= 0")
    if cfg.pairs < 1:
        fail("pairs", "must be >= 1")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc}") from None
    return parse_config(text, base_dir=path.parent)


# -- initial data -------------------------------------------------------------------


def initial_condition(cfg: RunConfig, grid: GridSpec | None = None) -> ScalarField:
    """Builtin initial datum or image named by ``cfg.initial``."""
    grid = grid or cfg.grid()
    R = grid.radius
    xi1, xi2 = grid.coords
    name = cfg.initial
    if name.startswith("image:"):
        p = Path(name[len("image:"):].strip())
        return load_image(p if p.is_absolute() else Path(cfg.base_dir) / p, grid)
    if name == "cone":
        v = np.maximum(0.0, 1.0 - np.hypot(xi1, xi2) / (0.9 * R))
    elif name == "bump":
        v = np.exp(-((xi1 - 0.3 * R) ** 2 + xi2**2) / (0.08 * R**2))
    elif name == "square":
        v = ((np.abs(xi1) < 0.5 * R) & (np.abs(xi2) < 0.5 * R)).astype(float)
    elif name == "checkerboard":
        k = np.floor((xi1 + R) * 4 / R) + np.floor((xi2 + R) * 4 / R)
        v = (k % 2 == 0).astype(float)
    else:
        raise ConfigError(f"unknown initial condition {name!r}")
    return ScalarField(grid, v)


def _pgm_tokens(data: bytes, count: int, start: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, i = [], start
    while len(tokens) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
            j += 1
        if j == i:
            raise ValueError("corrupt PGM header")
        tokens.append(data[i:j])
        i = j
    return tokens, i


def read_pgm(path) -> np.ndarray:
    """8-bit grayscale PGM (``P2`` or ``P5``) scaled to ``[0, 1]``; rows top to bottom."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"unsupported image format {magic!r}; expected PGM P2 or P5")
    try:
        (w, h, maxval), pos = _pgm_tokens(data, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ValueError("corrupt PGM header") from None
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise ValueError(f"corrupt PGM header: width={w}, height={h}, maxval={maxval} (8-bit only)")
    if magic == b"P5":
        body = data[pos + 1 : pos + 1 + w * h]
        if len(body) != w * h:
            raise ValueError("truncated PGM raster")
        img = np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(float)
    else:
        vals = data[pos:].split()
        if len(vals) < w * h:
            raise ValueError("truncated PGM raster")
        try:
            img = np.array([int(v) for v in vals[: w * h]], dtype=float).reshape(h, w)
        except ValueError:
            raise ValueError("corrupt PGM raster") from None
    if img.max() > maxval:
        raise ValueError("PGM sample exceeds maxval")
    return img / maxval


def _overlap(src: int, dst: int) -> np.ndarray:
    """``dst x src`` matrix of fractional overlaps between uniform partitions of [0, 1]."""
    e_src = np.linspace(0.0, 1.0, src + 1)
    e_dst = np.linspace(0.0, 1.0, dst + 1)
    lo = np.maximum(e_dst[:-1, None], e_src[None, :-1])
    hi = np.minimum(e_dst[1:, None], e_src[None, 1:])
    W = np.clip(hi - lo, 0.0, None)
    return W / W.sum(axis=1, keepdims=True)


def load_image(path, grid: GridSpec) -> ScalarField:
    """Map a PGM image onto ``[-R, R]^2`` by area averaging, masked to the disc.

    Image columns run along ``xi1`` and rows from top (``xi2 = R``) to bottom.
    """
    img = read_pgm(path)
    h, w = img.shape
    Wx = _overlap(w, grid.n)  # grid i <- image column
    Wy = _overlap(h, grid.n)  # grid j <- image row, counted from the bottom
    vals = Wx @ img[::-1, :].T @ Wy.T
    return ScalarField(grid, vals)


def write_pgm(path, img: np.ndarray, binary: bool = True) -> None:
    """Write values in ``[0, 1]`` as an 8-bit PGM; used for demos and tests."""
    q = np.clip(np.rint(np.asarray(img) * 255), 0, 255).astype(np.uint8)
    h, w = q.shape
    if binary:
        Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + q.tobytes())
    else:
        rows = "\n".join(" ".join(str(v) for v in r) for r in q)
        Path(path).write_text(f"P2\n{w} {h}\n255\n{rows}\n", encoding="ascii")


# -- workers ----------------------------------------------------------------------


def default_workers() -> int:
    """Worker count from ``$STVFLOW_WORKERS``, else 1."""
    text = os.environ.get(WORKERS_ENV, "").strip()
    if not text:
        return 1
    try:
        v = int(text)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {text!r}") from None
    if v < 1:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {text!r}")
    return v


class _Pool:
    """``map`` over a process pool, or the builtin ``map`` for one worker."""

    def __init__(self, workers: int):
        self.workers = workers
        self._ex = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None

    def map(self, fn, items):
        if self._ex is None:
            return map(fn, items)
        return self._ex.map(fn, items)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self._ex is not None:
            self._ex.shutdown()


def _solver_config(cfg: RunConfig, grid: GridSpec, T: float, lam: float | None = None) -> SolverConfig:
    return SolverConfig(
        lam=cfg.lam if lam is None else lam,
        dt=cfg.dt,
        T=T,
        grid=grid,
        transport=cfg.transport(),
        scheme=cfg.scheme,
        frame=cfg.frame,
    )


def _path(cfg: RunConfig, seed, T: float):
    N = len(cfg.omegas)
    if seed is None or N == 0:
        return zero_path(N, T, cfg.dt)
    return sample_path(seed, N, T, cfg.dt)


def _paths(cfg: RunConfig, T: float):
    """``(seed, path)`` pairs; ``seed_count = 0`` gives the single path ``beta = 0``."""
    if cfg.seed_count == 0:
        return [(None, _path(cfg, None, T))]
    return [(s, _path(cfg, s, T)) for s in cfg.seeds]


# -- manifest -----------------------------------------------------------------------


@dataclass
class RunManifest:
    """Record of one run: enough to repeat it and check the outputs."""

    config: dict
    study: str
    code_version: str
    seeds: list
    checks: dict
    outputs: dict
    wall_clock_seconds: float
    errors: list = field(default_factory=list)
    platform: str = field(default_factory=platform.platform)

    @property
    def passed(self) -> bool:
        return not self.errors and all(self.checks.values())

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def to_json(self) -> str:
        d = {
            "config": self.config,
            "study": self.study,
            "code_version": self.code_version,
            "seeds": self.seeds,
            "checks": self.checks,
            "passed": self.passed,
            "errors": self.errors,
            "outputs": self.outputs,
            "wall_clock_seconds": self.wall_clock_seconds,
            "platform": self.platform,
        }
        return json.dumps(d, indent=2, sort_keys=True)


# -- studies -------------------------------------------------------------------------


def _checks_single(traj, x0) -> dict:
    x2 = l2_norm(x0) ** 2
    n = traj["l2_norm"]
    checks = {
        "norm_monotone": bool(np.all(n <= n[0] + traj.grid.h * max(n[0], 1e-300))),
        "energy_residual": bool(np.max(np.abs(traj["energy_residual"])) <= 0.01 * max(x2, 1e-300) or x2 == 0),
    }
    if x0.min() >= 0:
        checks["positivity"] = bool(traj["min_value"].min() >= -1e-12 * max(x0.max(), 0.0))
    return checks


def _study_single(cfg, grid, x0, out: Path, pool) -> tuple:
    T = cfg.T
    seed, path = _paths(cfg, T)[0]
    traj = solve(x0, path, _solver_config(cfg, grid, T))
    traj.to_csv(out / "trajectory.csv")
    write_path_csv(path, out / "path.csv")
    if cfg.snapshot_stride:
        write_snapshots(traj, out / "snapshots", cfg.snapshot_stride)
    return _checks_single(traj, x0), {"max_abs_energy_residual": float(np.max(np.abs(traj["energy_residual"])))}


def _ensemble_sample(args):
    x0, scfg, seed, shared_Y = args
    path = sample_path(seed, len(scfg.transport), scfg.T, scfg.dt)
    if shared_Y is not None:
        values = np.stack(
            [group_apply_multi(ScalarField(scfg.grid, shared_Y[k]), scfg.transport, path.at(k)).values for k in range(shared_Y.shape[0])]
        )
        d = compute_diagnostics(scfg.grid, np.arange(values.shape[0]) * scfg.dt, values, scfg.lam)
    else:
        d = solve(x0, path, scfg).diagnostics
    return {k: d[k] for k in ("l2_norm", "phi_lambda", "min_value")}


def _run_samples(fn, jobs, pool, seeds):
    """Evaluate every job; failures are recorded per seed without stopping the others."""
    results, errors = {}, []
    if pool._ex is None:
        for job, s in zip(jobs, seeds):
            try:
                results[s] = fn(job)
            except (StvflowError, ValueError, ArithmeticError) as exc:
                errors.append(f"seed {s}: {type(exc).__name__}: {exc}")
        return results, errors
    futures = [(s, pool._ex.submit(fn, job)) for job, s in zip(jobs, seeds)]
    for s, fut in futures:
        try:
            results[s] = fut.result()
        except Exception as exc:  # sample isolation: report and keep collecting
            errors.append(f"seed {s}: {type(exc).__name__}: {exc}")
    return results, errors


def ensemble(cfg: RunConfig, x0: ScalarField | None = None, pool=None, rho: float | None = None) -> dict:
    """Per-time mean and 95% half-width of ``|X|_2``, ``phi_lambda`` and min value over seeds.

    Also evaluates ``mean |X(t)| + rho * int_0^t P[|X(s)| > 0] ds`` against
    ``1.05 |x|``.  Returns a dict with arrays, per-seed errors and the check.
    """
    from .verify import estimate_rho, norm_occupation_curve

    grid = cfg.grid()
    x0 = initial_condition(cfg, grid) if x0 is None else x0
    own = pool is None
    pool = _Pool(1) if own else pool
    T = cfg.T
    scfg = _solver_config(cfg, grid, T)
    shared = None
    if scfg.scheme == "rescaled" and scfg.frame == "invariant":
        shared = solve_rescaled(x0, zero_path(len(scfg.transport), T, cfg.dt), scfg).values
    seeds = list(cfg.seeds)
    results, errors = _run_samples(_ensemble_sample, [(x0, scfg, s, shared) for s in seeds], pool, seeds)
    if own:
        pool.__exit__(None, None, None)
    times = np.arange(scfg.n_steps + 1) * cfg.dt
    out = {"times": times, "errors": errors, "count": len(results)}
    if not results:
        return out
    ok = [s for s in seeds if s in results]
    for key in ("l2_norm", "phi_lambda", "min_value"):
        arr = np.stack([results[s][key] for s in ok])
        out[f"mean_{key}"] = arr.mean(axis=0)
        sd = arr.std(axis=0, ddof=1) if len(ok) > 1 else np.zeros(arr.shape[1])
        out[f"ci_{key}"] = 1.96 * sd / np.sqrt(len(ok))
    norms = np.stack([results[s]["l2_norm"] for s in ok])
    x_norm = l2_norm(x0)
    rho = estimate_rho(grid) if rho is None else rho
    hit = norms <= 1e-8 * x_norm
    tau = np.where(hit.any(axis=1), times[np.argmax(hit, axis=1)], np.inf)
    curve = norm_occupation_curve(times, norms, tau, rho)
    out.update(rho=rho, x_norm=x_norm, norm_occupation=curve, occupation_ok=bool(np.all(curve <= 1.05 * x_norm)))
    return out


def _study_ensemble(cfg, grid, x0, out: Path, pool):
    res = ensemble(cfg, x0, pool)
    if "norm_occupation" not in res:
        return {"all_samples_ok": False}, {"errors": res["errors"]}
    cols = ["mean_l2_norm", "ci_l2_norm", "mean_phi_lambda", "ci_phi_lambda", "mean_min_value", "ci_min_value", "norm_occupation"]
    _write_csv(out / "ensemble.csv", ["t"] + cols, zip(res["times"], *[res[c] for c in cols]))
    checks = {"all_samples_ok": not res["errors"], "norm_occupation_inequality": res["occupation_ok"]}
    return checks, {"rho_hat": res["rho"], "errors": res["errors"], "samples": res["count"]}


def _study_lambda_sweep(cfg, grid, x0, out: Path, pool):
    T = cfg.T
    seed, path = _paths(cfg, T)[0]
    sweep = lambda_sweep(x0, path, _solver_config(cfg, grid, T), cfg.lams)
    rows = [(a, b, sweep.gap(a, b)) for i, a in enumerate(sweep.lams) for b in sweep.lams[i + 1 :]]
    _write_csv(out / "lambda_sweep.csv", ["lambda_a", "lambda_b", "sup_gap"], rows)
    for lam, traj in sweep.trajectories.items():
        traj.to_csv(out / f"trajectory_lambda_{lam!r}.csv")
    # gaps shrink as both parameters shrink: consecutive pairs should decrease
    consecutive = [sweep.gap(a, b) for a, b in zip(sweep.lams, sweep.lams[1:])]
    checks = {
        "exponent_in_range": bool(0.7 <= sweep.exponent <= 1.3),
        "gaps_shrink": bool(all(b <= a for a, b in zip(consecutive, consecutive[1:]))),
    }
    return checks, {"exponent": sweep.exponent, "constant": sweep.constant}


def _study_extinction(cfg, grid, x0, out: Path, pool):
    from .verify import estimate_rho, extinction_study

    rho = estimate_rho(grid)
    x_norm = l2_norm(x0)
    T = cfg.T
    if T is None:
        K = max(1, int(np.ceil(4.0 * x_norm / rho / cfg.dt)))
        T = K * cfg.dt
    scfg = _solver_config(cfg, grid, T)
    seeds = list(cfg.seeds) if cfg.seed_count else [0]
    if cfg.seed_count == 0:
        scfg = scfg.with_(transport=TransportSystem(()))
    rep = extinction_study(x0, scfg, seeds, rho=rho, map_fn=pool.map)
    _write_csv(
        out / "extinction_tau.csv",
        ["seed", "tau", "censored"],
        [(s, float(t), int(c)) for s, t, c in zip(seeds, rep.tau, rep.censored)],
    )
    _write_csv(
        out / "survival.csv",
        ["t", "survival", "band_lower", "band_upper", "bound"],
        zip(rep.t_grid, rep.survival, rep.band_lower, rep.band_upper, rep.bound),
    )
    curve, occupation_ok = rep.norm_occupation()
    _write_csv(out / "norm_occupation.csv", ["t", "mean_l2_norm", "norm_occupation"], zip(rep.times, rep.norms.mean(axis=0), curve))
    checks = {"no_censored": rep.n_censored == 0, "survival_dominated": rep.dominated, "norm_occupation_inequality": occupation_ok}
    extra = {"rho_hat": rho, "rho_continuum": rep.rho_continuum, "T": T, "x_norm": x_norm, "t_min": rep.t_min}
    return checks, extra


def _study_vi(cfg, grid, x0, out: Path, pool):
    from .verify import vi_battery, vi_slack, vi_tolerance

    T = cfg.T
    scfg = _solver_config(cfg, grid, T)
    tol = vi_tolerance(x0)
    rows, worst = [], np.inf
    for seed, path in _paths(cfg, T):
        traj = solve(x0, path, scfg)
        for pair in vi_battery(traj, path, scfg.transport):
            slack = vi_slack(traj, pair)
            worst = min(worst, float(slack.min()))
            rows.extend((-1 if seed is None else seed, pair.label, t, s) for t, s in zip(traj.times, slack))
    _write_csv(out / "vi_slack.csv", ["seed", "pair", "t", "slack"], rows)
    return {"slack_above_tolerance": bool(worst >= -tol)}, {"min_slack": worst, "tolerance": tol}


def _random_initial(grid: GridSpec, rng) -> ScalarField:
    from scipy import ndimage

    f = ndimage.gaussian_filter(rng.random((grid.n, grid.n)), 2.0)
    return ScalarField(grid, f / f.max())


def _study_contraction(cfg, grid, x0, out: Path, pool):
    from .verify import contraction_check

    T = cfg.T
    scfg = _solver_config(cfg, grid, T)
    rng = np.random.default_rng(cfg.seed_base)
    pairs = [(_random_initial(grid, rng), _random_initial(grid, rng)) for _ in range(cfg.pairs)]
    rows, checks = [], {"contraction": True, "norm_monotone": True, "positivity": True}
    for seed, path in _paths(cfg, T):
        for i, (a, b) in enumerate(pairs):
            rep = contraction_check(a, b, path, scfg)
            rows.append((-1 if seed is None else seed, i, rep.initial_gap, rep.sup_gap, rep.ratio, rep.norm_excess, rep.min_value))
            checks["contraction"] &= rep.passed
            checks["norm_monotone"] &= rep.norm_excess <= grid.h * max(l2_norm(a), l2_norm(b))
            checks["positivity"] &= rep.min_value >= -1e-12 * max(a.max(), b.max())
    _write_csv(out / "contraction.csv", ["seed", "pair", "initial_gap", "sup_gap", "ratio", "norm_excess", "min_value"], rows)
    return {k: bool(v) for k, v in checks.items()}, {}


def _study_unit(cfg, grid, x0, out: Path, pool):
    from .grid import VectorField2, divergence, gradient, inner, inner_vector
    from .regularization import moreau_j, psi_lambda
    from .transport import b_operator

    rng = np.random.default_rng(cfg.seed_base)
    spec = cfg.transport().fields[0] if cfg.omegas else None
    rows = []
    worst_div = worst_b = 0.0
    for k in range(100):
        u = ScalarField(grid, rng.standard_normal((grid.n, grid.n)))
        v = ScalarField(grid, rng.standard_normal((grid.n, grid.n)))
        p = VectorField2(grid, rng.standard_normal((grid.n + 1,) * 2), rng.standard_normal((grid.n + 1,) * 2))
        d = abs(inner(divergence(p), u) + inner_vector(p, gradient(u)))
        b = abs(inner(b_operator(u, spec), v) + inner(u, b_operator(v, spec))) if spec else 0.0
        worst_div, worst_b = max(worst_div, d), max(worst_b, b)
        rows.append((k, d, b))
    _write_csv(out / "unit_properties.csv", ["instance", "div_grad_defect", "b_skew_defect"], rows)
    z = rng.standard_normal((10_000, 2)) * 0.3
    lam = cfg.lam
    gap = np.max(np.linalg.norm(z, axis=1) - moreau_j(z, lam))
    eps = 1e-6
    fd = np.stack(
        [(moreau_j(z + eps * e, lam) - moreau_j(z - eps * e, lam)) / (2 * eps) for e in np.eye(2)], axis=-1
    )
    grad_err = float(np.max(np.abs(fd - psi_lambda(z, lam))))
    checks = {
        "div_grad_duality": worst_div <= 1e-12,
        "b_skew": worst_b <= 1e-12,
        "yosida_gap": bool(gap <= lam / 2 + 1e-15),
        "yosida_gradient": grad_err <= 1e-6,
    }
    return checks, {"div_defect": worst_div, "b_defect": worst_b, "yosida_gradient_error": grad_err}


_STUDIES = {
    "single": _study_single,
    "ensemble": _study_ensemble,
    "lambda-sweep": _study_lambda_sweep,
    "extinction": _study_extinction,
    "vi-check": _study_vi,
    "contraction": _study_contraction,
    "unit-properties": _study_unit,
}


def run(cfg: RunConfig, output_dir=None, workers: int | None = None, seed_base: int | None = None) -> RunManifest:
    """Execute the configured study and write CSVs, ``summary.json`` and ``manifest.json``.

    ``output_dir`` and ``seed_base`` override the configuration; ``workers``
    defaults to :func:`default_workers`.
    """
    from dataclasses import replace

    if seed_base is not None:
        cfg = replace(cfg, seed_base=int(seed_base), raw={**cfg.raw, "seed_base": str(int(seed_base))})
    out = Path(output_dir if output_dir is not None else Path(cfg.base_dir) / cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = default_workers() if workers is None else int(workers)
    if workers < 1:
        raise ConfigError("workers must be a positive integer")
    start = time.perf_counter()
    before = {p: p.stat().st_mtime_ns for p in out.rglob("*.csv")}
    grid = cfg.grid()
    x0 = initial_condition(cfg, grid)
    errors = []
    with _Pool(workers) as pool:
        try:
            checks, extra = _STUDIES[cfg.study](cfg, grid, x0, out, pool)
        except StvflowError as exc:
            checks, extra = {}, {}
            errors.append(f"{type(exc).__name__}: {exc}")
    errors.extend(extra.pop("errors", []) if isinstance(extra.get("errors"), list) else [])
    summary = {"study": cfg.study, "checks": checks, "values": extra, "errors": errors}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float), encoding="utf-8")
    outputs = {
        str(p.relative_to(out)).replace(os.sep, "/"): _sha256(p)
        for p in sorted(out.rglob("*.csv"))
        if before.get(p) != p.stat().st_mtime_ns  # only files written by this run
    }
    config_echo = dict(cfg.raw)
    if cfg.initial.startswith("image:"):
        img = Path(cfg.initial[len("image:"):].strip())
        img = img if img.is_absolute() else Path(cfg.base_dir) / img
        config_echo["initial"] = f"image:{img.resolve()}"
        config_echo["initial_sha256"] = _sha256(img)
    manifest = RunManifest(
        config=config_echo,
        study=cfg.study,
        code_version=__version__,
        seeds=[None] if cfg.seed_count == 0 else list(cfg.seeds),
        checks=checks,
        outputs=outputs,
        wall_clock_seconds=time.perf_counter() - start,
        errors=errors,
    )
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def verify_manifest(manifest_path, output_dir=None, workers: int | None = None) -> tuple:
    """Rerun the configuration recorded in a manifest and compare CSV hashes.

    Returns ``(identical, mismatches)`` where ``mismatches`` lists CSV names
    whose hash differs or that are missing on either side.
    """
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    raw = {k: v for k, v in manifest["config"].items() if k != "initial_sha256"}
    if manifest.get("code_version") != __version__:
        return False, [f"code version {manifest.get('code_version')!r} != {__version__!r}"]
    if "initial_sha256" in manifest["config"]:
        img = Path(raw["initial"][len("image:"):])
        if not img.is_file() or _sha256(img) != manifest["config"]["initial_sha256"]:
            return False, ["input image missing or changed"]
    text = "\n".join(f"{k} = {v}" for k, v in raw.items())
    cfg = parse_config(text)
    with tempfile.TemporaryDirectory() as tmp:
        target = Path(output_dir) if output_dir is not None else Path(tmp)
        rerun = run(cfg, output_dir=target, workers=workers)
    expected, got = manifest["outputs"], rerun.outputs
    mismatches = sorted(k for k in set(expected) | set(got) if expected.get(k) != got.get(k))
    return not mismatches, mismatches
