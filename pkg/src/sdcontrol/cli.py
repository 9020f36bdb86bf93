"""
Command line front-end.

Commands: ``solve``, ``converge``, ``robust`` and ``check-op``. A JSON
config file supplies defaults that flags override. Exit status is 0 when
every pass/fail flag holds, 1 on a failed flag or runtime error and 2 on a
usage error.
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import mesh as msh
from . import verify
from .assembly import DataError
from .reconstruction import build_reconstruction, rt_divergence, rt_interface_jump
from .spaces import build_spaces
from .system import build_system, random_admissible_velocities, solve
from .vtkio import write_mesh_vtk, write_solution_vtk

log = logging.getLogger("sdcontrol")

COMMANDS = ("solve", "converge", "robust", "check-op")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "solve"
    rect_s: list = field(default_factory=lambda: [0.0, 1.0, 1.0, 2.0])
    rect_d: list = field(default_factory=lambda: [0.0, 1.0, 0.0, 1.0])
    n0: int = 2
    level: int = 1
    levels: int = 4
    scheme: str = "both"
    mu: float = 1.0
    K: list = field(default_factory=lambda: [[1.0, 0.0], [0.0, 1.0]])
    alpha: float = 1.0
    alpha1: float = 1.0
    octet: str = "smooth"
    robust_octet: str = "quadratic"
    scales: list = field(default_factory=lambda: [1.0, 1e2, 1e4])
    samples: int = 100
    seed: int = 0
    out: str = "results"
    vtk: bool = False
    eoc_window: list = field(default_factory=lambda: [0.85, 1.3])
    spread_tol: float = 1e-6
    growth_factor: float = 10.0
    operator_tol: float = 1e-10

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError("unknown command %r" % self.command)
        if self.scheme not in ("classical", "robust", "both"):
            raise ConfigError("scheme must be classical, robust or both")
        for name in ("mu", "alpha", "alpha1"):
            if not getattr(self, name) > 0:
                raise ConfigError("%s must be positive" % name)
        K = np.asarray(self.K, dtype=float)
        if K.shape != (2, 2) or not np.allclose(K, K.T) or np.linalg.eigvalsh(K).min() <= 0:
            raise ConfigError("K must be a symmetric positive definite 2x2 matrix")
        if self.n0 < 1 or self.level < 0:
            raise ConfigError("n0 must be >= 1 and level >= 0")
        if self.command == "converge" and self.levels < 3:
            raise ConfigError("levels must be >= 3")
        for name in ("octet", "robust_octet"):
            if getattr(self, name) not in verify.OCTETS:
                raise ConfigError("unknown octet %r" % getattr(self, name))
        if not self.scales or any(not np.isfinite(s) for s in self.scales):
            raise ConfigError("scales must be a non-empty list of numbers")
        try:
            msh.shared_edge(self.rectangle("s"), self.rectangle("d"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def rectangle(self, which):
        return msh.Rectangle.from_bounds(self.rect_s if which == "s" else self.rect_d)

    @property
    def schemes(self):
        return ("classical", "robust") if self.scheme == "both" else (self.scheme,)

    def exact(self, name=None):
        ex = verify.OCTETS[name or self.octet](
            **({} if (name or self.octet) == "zero" else
               dict(mu=self.mu, K=self.K, alpha=self.alpha, alpha1=self.alpha1)))
        ex.rect_s, ex.rect_d = self.rectangle("s"), self.rectangle("d")
        return ex


def load_config(path):
    with open(path) as fh:
        raw = json.load(fh)
    known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError("unknown config keys: %s" % ", ".join(sorted(unknown)))
    return raw


def _scales(text):
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected a comma separated list of numbers")


def make_parser():
    p = argparse.ArgumentParser(prog="sdcontrol", description=__doc__.strip().splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--levels", type=int)
    p.add_argument("--level", type=int, help="refinement level for solve/robust")
    p.add_argument("--n0", type=int)
    p.add_argument("--scheme", choices=("classical", "robust", "both"))
    p.add_argument("--scales", type=_scales)
    p.add_argument("--octet", choices=sorted(verify.OCTETS))
    p.add_argument("--out")
    p.add_argument("--vtk", action="store_true", default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_config(args):
    raw = load_config(args.config) if args.config else {}
    raw["command"] = args.command
    for name in ("levels", "level", "n0", "scheme", "scales", "octet", "out", "vtk"):
        v = getattr(args, name)
        if v is not None:
            raw[name] = v
    try:
        return RunConfig(**raw).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# -- commands ---------------------------------------------------------------------------

def cmd_solve(cfg):
    ex = cfg.exact()
    mesh = verify.make_mesh(ex, cfg.n0, cfg.level)
    spaces = build_spaces(mesh)
    data = verify.derive_data(ex)
    Pi = build_reconstruction(mesh, spaces)
    out, flags = {}, {}
    for scheme in cfg.schemes:
        sol = solve(build_system(mesh, spaces, data, scheme, Pi))
        row = verify.error_norms(sol, ex)
        row.update(residual=sol.residual, cost=verify.evaluate_cost(sol, data),
                   ndof=int(sol.system.free.sum()), h=mesh.h)
        out[scheme] = row
        flags["%s_residual" % scheme] = sol.residual < 1e-10
        if cfg.vtk:
            for w in ("u", "z"):
                write_solution_vtk(os.path.join(cfg.out, "%s_%s.vtk" % (scheme, w)), sol, w)
        print("%-9s  u_X %.6g  z_X %.6g  p %.6g  r %.6g  cost %.6g  residual %.3g"
              % (scheme, row["u_X"], row["z_X"], row["p_L2"], row["r_L2"],
                 row["cost"], row["residual"]))
    if data.g_s is not None or data.gz_s is not None:
        out["note"] = "nonzero Stokes divergence data in use"
    if cfg.vtk:
        write_mesh_vtk(os.path.join(cfg.out, "mesh.vtk"), mesh)
    return out, flags


def cmd_converge(cfg):
    ex = cfg.exact()
    lo, hi = cfg.eoc_window
    rows, out, flags = [], {}, {}
    for scheme in cfg.schemes:
        rep = verify.convergence_study(ex, cfg.levels, scheme, cfg.n0)
        rows.extend(rep.table())
        eu, ez = rep.last_eoc("u_X"), rep.last_eoc("z_X")
        out[scheme] = dict(rows=rep.rows, eoc={k: rep.eoc(k) for k in verify.EOC_KEYS})
        flags["%s_eoc" % scheme] = bool(lo <= eu <= hi and lo <= ez <= hi)
        for r in rep.table():
            print("%-9s level %d  h %.6g  u_X %.6g (%.3g)  z_X %.6g (%.3g)  p %.6g  r %.6g"
                  % (scheme, r["level"], r["h"], r["u_X"], r["eoc_u_X"], r["z_X"],
                     r["eoc_z_X"], r["p_L2"], r["r_L2"]))
    verify.write_csv(os.path.join(cfg.out, "convergence.csv"), rows)
    return out, flags


def cmd_robust(cfg):
    ex = cfg.exact(cfg.robust_octet)
    rows = verify.robustness_experiment(ex, scales=cfg.scales, n0=cfg.n0, level=cfg.level)
    for r in rows:
        print("scale %-8.6g classical %.6g  robust %.6g" % (r["scale"], r["classical"], r["robust"]))
    verify.write_csv(os.path.join(cfg.out, "robustness.csv"), rows,
                     ["scale", "classical", "robust"])
    spread = verify.robust_spread(rows)
    growth = verify.classical_growth(rows)
    out = dict(rows=[{k: r[k] for k in ("scale", "classical", "robust")} for r in rows],
               robust_spread=spread, classical_growth=growth, octet=ex.name)
    flags = dict(robust_flat=spread < cfg.spread_tol)
    if len(rows) > 1:
        flags["classical_growth"] = growth >= cfg.growth_factor
    return out, flags


def cmd_check_op(cfg):
    ex = cfg.exact()
    mesh = verify.make_mesh(ex, cfg.n0, cfg.level)
    spaces = build_spaces(mesh)
    Pi = build_reconstruction(mesh, spaces)
    system = build_system(mesh, spaces, verify.derive_data(ex), "robust", Pi)
    V = random_admissible_velocities(system, cfg.samples, cfg.seed)
    W = Pi.matrix @ V
    div = max(float(np.abs(rt_divergence(spaces, W[:, i])).max()) for i in range(W.shape[1]))
    jump = max(float(np.abs(rt_interface_jump(spaces, W[:, i])).max()) for i in range(W.shape[1]))
    print("max |div Pi v| = %.6g, max interface jump = %.6g over %d fields"
          % (div, jump, cfg.samples))
    return (dict(max_divergence=div, max_jump=jump, samples=cfg.samples),
            dict(divergence=div < cfg.operator_tol, jump=jump < cfg.operator_tol))


HANDLERS = {"solve": cmd_solve, "converge": cmd_converge, "robust": cmd_robust,
            "check-op": cmd_check_op}


def run(cfg):
    """Execute one command; returns the exit status."""
    os.makedirs(cfg.out, exist_ok=True)
    t0 = time.perf_counter()
    result, flags = HANDLERS[cfg.command](cfg)
    flags = {k: bool(v) for k, v in flags.items()}
    report = dict(command=cfg.command, config=asdict(cfg), result=result, flags=flags,
                  passed=all(flags.values()), seconds=time.perf_counter() - t0)
    verify.write_json(os.path.join(cfg.out, "report.json"), report)
    log.info("%s finished in %.2f s", cfg.command, report["seconds"])
    for k, v in sorted(flags.items()):
        print("%s: %s" % ("PASS" if v else "FAIL", k))
    return 0 if report["passed"] else 1


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        cfg = build_config(args)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print("usage error: %s" % exc, file=sys.stderr)
        return 2
    try:
        return run(cfg)
    except (DataError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
