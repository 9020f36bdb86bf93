"""
Manufactured solutions, error norms and the verification experiments.

Exact fields are sympy expressions in ``x, y``; every derived quantity
(sources, targets, interface residuals) is obtained by symbolic
differentiation and then compiled to numpy callables.
"""

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import sympy

from . import mesh as msh
from .assembly import InterfaceResiduals, ProblemData, interface_tangent
from .quadrature import make_quadrature
from .reconstruction import build_reconstruction
from .spaces import build_spaces, tabulate_on_edges
from .system import StateSolver, build_system, evaluate_cost, solve

X, Y = sympy.symbols("x y", real=True)

DEFAULT_RECT_S = msh.Rectangle(0.0, 1.0, 1.0, 2.0)
DEFAULT_RECT_D = msh.Rectangle(0.0, 1.0, 0.0, 1.0)


# -- symbolic helpers ----------------------------------------------------------------

def _sym(e):
    return sympy.sympify(e, locals={"x": X, "y": Y})


def _vec(v):
    return sympy.Matrix([_sym(v[0]), _sym(v[1])])


def _grad(s):
    return sympy.Matrix([sympy.diff(s, X), sympy.diff(s, Y)])


def _jac(v):
    """Rows are components, columns derivatives."""
    return sympy.Matrix(2, 2, lambda i, j: sympy.diff(v[i], (X, Y)[j]))


def _strain(v):
    G = _jac(v)
    return (G + G.T) / 2


def _div(v):
    return sympy.diff(v[0], X) + sympy.diff(v[1], Y)


def _div_tensor(T):
    return sympy.Matrix([sympy.diff(T[i, 0], X) + sympy.diff(T[i, 1], Y) for i in range(2)])


def _compile(expr):
    """numpy callable of points ``(n, 2)`` for a scalar, vector or matrix."""
    if isinstance(expr, sympy.MatrixBase):
        parts = [_compile(e) for e in expr]
        shape = expr.shape if expr.shape[1] > 1 else (expr.shape[0],)

        def fm(pts):
            pts = np.asarray(pts, dtype=float).reshape(-1, 2)
            out = np.stack([p(pts) for p in parts], axis=-1)
            return out.reshape((len(pts),) + shape)
        return fm
    f = sympy.lambdify((X, Y), expr, "numpy")

    def fs(pts):
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        return np.broadcast_to(np.asarray(f(pts[:, 0], pts[:, 1]), dtype=float),
                               (len(pts),)).copy()
    return fs


# -- exact fields ----------------------------------------------------------------------

class ExactFields:
    """
    Closed-form octet ``(u^s, p^s, u^d, p^d, z^s, r^s, z^d, r^d)``.

    Vector fields are pairs of sympy expressions (or strings) in ``x, y``.
    ``K`` is a constant 2x2 array or a 2x2 sympy matrix in ``x, y``.
    """

    NAMES = ("u_s", "p_s", "u_d", "p_d", "z_s", "r_s", "z_d", "r_d")

    def __init__(self, u_s, p_s, u_d, p_d, z_s, r_s, z_d, r_d, mu=1.0,
                 K=((1.0, 0.0), (0.0, 1.0)), alpha=1.0, alpha1=1.0, name="custom",
                 rect_s=DEFAULT_RECT_S, rect_d=DEFAULT_RECT_D):
        self.name = name
        self.mu, self.alpha, self.alpha1 = float(mu), float(alpha), float(alpha1)
        self.rect_s, self.rect_d = rect_s, rect_d
        self.sym = dict(u_s=_vec(u_s), p_s=_sym(p_s), u_d=_vec(u_d), p_d=_sym(p_d),
                        z_s=_vec(z_s), r_s=_sym(r_s), z_d=_vec(z_d), r_d=_sym(r_d))
        self.K_sym = sympy.Matrix(K).applyfunc(_sym)
        self._cache = {}

    def __repr__(self):
        return "ExactFields(%s)" % self.name

    @property
    def K_constant(self):
        return not self.K_sym.free_symbols

    def K_value(self):
        if self.K_constant:
            return np.array(self.K_sym.tolist(), dtype=float)
        return _compile(self.K_sym)

    def fn(self, key):
        """Compiled callable of a field or of ``grad_<field>`` / ``div_<field>``."""
        if key not in self._cache:
            if key.startswith("grad_"):
                e = self.sym[key[5:]]
                expr = _jac(e) if isinstance(e, sympy.MatrixBase) else _grad(e)
            elif key.startswith("div_"):
                expr = _div(self.sym[key[4:]])
            else:
                expr = self.sym[key]
            self._cache[key] = _compile(expr)
        return self._cache[key]

    def __getattr__(self, key):
        if key.startswith("_") or key in ("sym", "K_sym"):
            raise AttributeError(key)
        try:
            return self.fn(key)
        except KeyError:
            raise AttributeError(key) from None

    def with_pressure_shift(self, phi, scale):
        """Copy with ``p^s <- p^s + scale * phi``."""
        s = self.sym
        return ExactFields(s["u_s"], s["p_s"] + scale * _sym(phi), s["u_d"], s["p_d"],
                           s["z_s"], s["r_s"], s["z_d"], s["r_d"], self.mu,
                           self.K_sym, self.alpha, self.alpha1, self.name,
                           self.rect_s, self.rect_d)


def default_octet(mu=1.0, K=((1.0, 0.0), (0.0, 1.0)), alpha=1.0, alpha1=1.0):
    """Smooth trigonometric octet with all interface residuals nonzero."""
    return ExactFields(
        u_s=("sin(pi*x)*cos(pi*y) + y**2", "-cos(pi*x)*sin(pi*y) + x*y"),
        p_s="sin(pi*x)*cos(pi*y/2) + x",
        u_d=("cos(pi*x)*sin(pi*y) + x", "sin(pi*x)*y**2"),
        p_d="cos(pi*x)*cos(pi*y)",
        z_s=("x**2*sin(pi*y)", "cos(pi*x)*y"),
        r_s="exp(x)*sin(y)",
        z_d=("y*sin(pi*x)", "cos(pi*y) + x**2"),
        r_d="sin(pi*x*y)",
        mu=mu, K=K, alpha=alpha, alpha1=alpha1, name="smooth")


def quadratic_octet(mu=1.0, K=((1.0, 0.0), (0.0, 1.0)), alpha=1.0, alpha1=1.0):
    """Octet inside the spaces of the classical scheme (P2 Stokes, RT1 Darcy)."""
    return ExactFields(
        u_s=("x**2 + y*x", "1 - x*y + y**2/2"),
        p_s="2*x - y + 1",
        u_d=("x + y", "x - y + 2"),
        p_d="x + 3*y",
        z_s=("y**2 - x", "x**2 + y"),
        r_s="1 - x + y",
        z_d=("1 + x", "y"),
        r_d="x - y",
        mu=mu, K=K, alpha=alpha, alpha1=alpha1, name="quadratic")


def linear_octet(mu=1.0, K=((1.0, 0.0), (0.0, 1.0)), alpha=1.0, alpha1=1.0):
    """Octet that both schemes reproduce exactly (linear Stokes velocities)."""
    return ExactFields(
        u_s=("x + 2*y", "1 - x - y"),
        p_s="2*x - y + 1",
        u_d=("x + y", "x - y + 2"),
        p_d="x + 3*y",
        z_s=("y - x", "x + y"),
        r_s="1 - x + y",
        z_d=("1 + x", "y"),
        r_d="x - y",
        mu=mu, K=K, alpha=alpha, alpha1=alpha1, name="linear")


def zero_octet(**kw):
    z = ("0", "0")
    return ExactFields(z, "0", z, "0", z, "0", z, "0", name="zero", **kw)


OCTETS = {"smooth": default_octet, "quadratic": quadratic_octet,
          "linear": linear_octet, "zero": zero_octet}


def pressure_bubble():
    """Quartic bubble on the Stokes rectangle, vanishing to second order."""
    return _sym("x**2*(1 - x)**2*(y - 1)**2*(2 - y)**2")


# -- data derivation -------------------------------------------------------------------

def _interface_geometry(exact):
    _, n = msh.shared_edge(exact.rect_s, exact.rect_d)
    n = sympy.Matrix([sympy.nsimplify(n[0]), sympy.nsimplify(n[1])])
    tau = sympy.Matrix([-n[1], n[0]])
    return n, tau


def _strong_terms(exact, vel_s, pres_s, vel_d, pres_d):
    mu = exact.mu
    Kinv = exact.K_sym.inv()
    stokes = -2 * mu * _div_tensor(_strain(vel_s)) + _grad(pres_s)
    darcy = mu * Kinv * vel_d + _grad(pres_d)
    return stokes, darcy


def _residuals(exact, vel_s, pres_s, vel_d, pres_d):
    n, tau = _interface_geometry(exact)
    mu, a1 = exact.mu, exact.alpha1
    kappa = (tau.T * exact.K_sym * tau)[0, 0]
    Dn = _strain(vel_s) * n
    j0 = (vel_s.T * n)[0, 0] - (vel_d.T * n)[0, 0]
    j2 = pres_s - 2 * mu * (Dn.T * n)[0, 0] - pres_d
    j3 = (vel_s.T * tau)[0, 0] + 2 * sympy.sqrt(kappa) / a1 * (Dn.T * tau)[0, 0]
    return j0, j2, j3


def derive_symbolic(exact):
    """All problem data as sympy expressions (dict)."""
    s = exact.sym
    a = 1 / sympy.sqrt(_sym(exact.alpha))
    st_u, da_u = _strong_terms(exact, s["u_s"], s["p_s"], s["u_d"], s["p_d"])
    st_z, da_z = _strong_terms(exact, s["z_s"], s["r_s"], s["z_d"], s["r_d"])
    sq = sympy.sqrt(_sym(exact.alpha))
    out = dict(
        f_s=st_u + a * s["z_s"], f_d=da_u + a * s["z_d"],
        g_s=_div(s["u_s"]), g_d=_div(s["u_d"]),
        gz_s=_div(s["z_s"]), gz_d=_div(s["z_d"]),
        u_star_s=s["u_s"] - sq * st_z, u_star_d=s["u_d"] - sq * da_z)
    out["state"] = _residuals(exact, s["u_s"], s["p_s"], s["u_d"], s["p_d"])
    out["adjoint"] = _residuals(exact, s["z_s"], s["r_s"], s["z_d"], s["r_d"])
    return out


def _maybe(expr, on=None):
    """
    Compile, or return None for identically zero expressions.

    ``on`` is an optional substitution (e.g. ``{y: 1}``) restricting the
    zero test to a line; the compiled expression is not restricted.
    """
    test = expr if on is None else expr.subs(on)
    if isinstance(test, sympy.MatrixBase):
        if all(sympy.simplify(e) == 0 for e in test):
            return None
    elif sympy.simplify(test) == 0:
        return None
    return _compile(expr)


def _interface_line(exact):
    (a, b), n = msh.shared_edge(exact.rect_s, exact.rect_d)
    if n[0] == 0:
        return {Y: sympy.nsimplify(a[1])}
    return {X: sympy.nsimplify(a[0])}


def derive_data(exact, K_bounds=None):
    """
    Problem data for which ``exact`` solves the optimality system.

    Sources, divergences, targets, interface residuals and boundary traces
    are derived symbolically; identically zero data become ``None``.
    """
    d = derive_symbolic(exact)
    line = _interface_line(exact)
    res = [InterfaceResiduals(*[_maybe(_sym(e), line) for e in d[k]])
           for k in ("state", "adjoint")]
    return ProblemData(
        mu=exact.mu, K=exact.K_value(), alpha1=exact.alpha1, alpha=exact.alpha,
        f_s=_maybe(d["f_s"]), f_d=_maybe(d["f_d"]),
        u_star_s=_maybe(d["u_star_s"]), u_star_d=_maybe(d["u_star_d"]),
        g_s=_maybe(d["g_s"]), g_d=_maybe(d["g_d"]),
        gz_s=_maybe(d["gz_s"]), gz_d=_maybe(d["gz_d"]),
        state_interface=res[0], adjoint_interface=res[1],
        u_boundary_s=exact.fn("u_s"), u_boundary_d=exact.fn("u_d"),
        z_boundary_s=exact.fn("z_s"), z_boundary_d=exact.fn("z_d"),
        K_bounds=K_bounds)


def add_gradient_source(data, phi, scale):
    """Copy of ``data`` with ``f^s <- f^s + scale * grad(phi)``."""
    g = _compile(_grad(_sym(phi)))
    base = data.f_s

    def f_s(pts):
        out = scale * g(pts)
        return out if base is None else out + base(pts)
    return dataclasses.replace(data, f_s=f_s)


def make_mesh(exact=None, n0=2, level=0):
    rs = DEFAULT_RECT_S if exact is None else exact.rect_s
    rd = DEFAULT_RECT_D if exact is None else exact.rect_d
    return msh.refine(msh.build_two_domain_mesh(rs, rd, n0), level)


# -- weak residual gate ----------------------------------------------------------------

def weak_residual(exact, mesh, data=None, degree=20):
    """
    Residuals of the exact octet in the discrete weak forms.

    Every integral is evaluated by quadrature of degree ``degree`` with the
    exact fields themselves (no interpolation, no solver). Returns a dict
    of residual vectors restricted to non-essential test functions:
    ``state``/``adjoint`` momentum, ``div_u``/``div_z`` and
    ``jump_u``/``jump_z``.
    """
    data = derive_data(exact) if data is None else data
    spaces = build_spaces(mesh)
    a = data.coupling
    q = make_quadrature("triangle", degree)
    eq = make_quadrature("edge", degree)
    mu = data.mu
    out = {}
    for which, (vs, ps, vd, pd, other_s, other_d, src_s, src_d, res) in {
            "state": ("u_s", "p_s", "u_d", "p_d", "z_s", "z_d",
                      data.f_s, data.f_d, data.state_interface),
            "adjoint": ("z_s", "r_s", "z_d", "r_d", "u_s", "u_d",
                        None, None, data.adjoint_interface)}.items():
        sign = 1.0 if which == "state" else -1.0
        r = np.zeros(spaces.n_velocity)
        # Stokes volume terms
        V = spaces.stokes
        tab = V.tabulate(q.points)
        _, det = mesh.jacobians(V.cells)
        pts = tab.points.reshape(-1, 2)
        sh = tab.points.shape[:2]
        G = exact.fn("grad_" + vs)(pts).reshape(sh + (2, 2))
        D = 0.5 * (G + G.swapaxes(-1, -2))
        Dp = 0.5 * (tab.grads + tab.grads.swapaxes(-1, -2))
        P = exact.fn(ps)(pts).reshape(sh)
        Z = exact.fn(other_s)(pts).reshape(sh + (2,))
        if which == "state":
            S = _eval_or_zero(src_s, pts, sh + (2,))
            rhs = S - sign * a * Z
        else:
            rhs = -a * _eval_or_zero(data.u_star_s, pts, sh + (2,)) + a * Z
        loc = np.einsum("cqxy,clqxy->clq", 2 * mu * D, Dp) \
            - np.einsum("cq,clq->clq", P, tab.div) \
            - np.einsum("cqx,clqx->clq", rhs, tab.values)
        np.add.at(r, V.cell_dofs, np.einsum("clq,q,c->cl", loc, q.weights, det))
        # Darcy volume terms
        W = spaces.darcy
        tab = W.tabulate(q.points)
        _, det = mesh.jacobians(W.cells)
        pts = tab.points.reshape(-1, 2)
        sh = tab.points.shape[:2]
        Kinv = np.linalg.inv(data.K_at(pts)).reshape(sh + (2, 2))
        U = exact.fn(vd)(pts).reshape(sh + (2,))
        P = exact.fn(pd)(pts).reshape(sh)
        Z = exact.fn(other_d)(pts).reshape(sh + (2,))
        if which == "state":
            rhs = _eval_or_zero(src_d, pts, sh + (2,)) - a * Z
        else:
            rhs = -a * _eval_or_zero(data.u_star_d, pts, sh + (2,)) + a * Z
        loc = mu * np.einsum("cqxy,cqy,clqx->clq", Kinv, U, tab.values) \
            - np.einsum("cq,clq->clq", P, tab.div) \
            - np.einsum("cqx,clqx->clq", rhs, tab.values)
        np.add.at(r, spaces.stokes.ndof + W.cell_dofs,
                  np.einsum("clq,q,c->cl", loc, q.weights, det))
        # interface terms
        gam = msh.interface_edges(mesh)
        tau = interface_tangent(mesh)
        s = eq.points[:, 1]
        w = eq.weights[None, :] * mesh.edge_lengths[gam.edges][:, None]
        ts = tabulate_on_edges(V, gam.edges, gam.stokes_tris, s)
        td = tabulate_on_edges(W, gam.edges, gam.darcy_tris, s)
        pts = ts.points.reshape(-1, 2)
        sh = ts.points.shape[:2]
        kap = data.kappa(pts, tau).reshape(sh)
        beta = data.alpha1 * mu / np.sqrt(kap)
        Us = exact.fn(vs)(pts).reshape(sh + (2,))
        lam = exact.fn(pd)(pts).reshape(sh)
        j2 = _eval_or_zero(res.normal_stress, pts, sh)
        j3 = _eval_or_zero(res.slip, pts, sh)
        vn = np.einsum("elqx,ex->elq", ts.values, gam.normals)
        vt = np.einsum("elqx,x->elq", ts.values, tau)
        loc = beta[:, None] * (Us @ tau)[:, None] * vt + (lam + j2)[:, None] * vn \
            - (beta * j3)[:, None] * vt
        np.add.at(r, V.cell_dofs[V.local_index[gam.stokes_tris]],
                  np.einsum("elq,eq->el", loc, w))
        vnd = -np.einsum("elqx,ex->elq", td.values, gam.normals)
        np.add.at(r, spaces.stokes.ndof + W.cell_dofs[W.local_index[gam.darcy_tris]],
                  np.einsum("elq,eq->el", lam[:, None] * vnd, w))
        out[which] = r[~spaces.velocity_essential]

        # divergence rows: -(div v, q) + (g, q)
        Pq = spaces.pressure
        rdiv = np.zeros(Pq.ndof)
        for cells, key, g in ((V.cells, vs, data.g_s if which == "state" else data.gz_s),
                              (W.cells, vd, data.g_d if which == "state" else data.gz_d)):
            rows = Pq.local_index[cells]
            pt = Pq.tabulate(q.points, rows)
            _, det = mesh.jacobians(cells)
            p2 = pt.points.reshape(-1, 2)
            dv = exact.fn("div_" + key)(p2).reshape(pt.points.shape[:2])
            gv = _eval_or_zero(g, p2, dv.shape)
            np.add.at(rdiv, Pq.cell_dofs[rows],
                      np.einsum("cq,clq,q,c->cl", gv - dv, pt.values, q.weights, det))
        out["div_u" if which == "state" else "div_z"] = rdiv
        # interface mass rows
        Ud = exact.fn(vd)(pts).reshape(sh + (2,))
        jump = Us @ np.asarray(gam.normals[0]) - Ud @ np.asarray(gam.normals[0])
        j0 = _eval_or_zero(res.mass, pts, sh)
        lt = spaces.trace.tabulate(eq.points).values
        rj = np.zeros(spaces.trace.ndof)
        np.add.at(rj, spaces.trace.cell_dofs[spaces.trace.local_index[gam.edges]],
                  np.einsum("elq,eq->el", lt, (jump - j0) * w))
        out["jump_u" if which == "state" else "jump_z"] = rj
    return out


def _eval_or_zero(fn, pts, shape):
    if fn is None:
        return np.zeros(shape)
    return np.asarray(fn(pts), dtype=float).reshape(shape)


def max_weak_residual(exact, mesh, **kw):
    return max(float(np.abs(v).max()) if len(v) else 0.0
               for v in weak_residual(exact, mesh, **kw).values())


# -- error norms -------------------------------------------------------------------------

def _mean(spaces, fs, fd, q):
    mesh = spaces.mesh
    tot = 0.0
    for cells, fn in ((spaces.stokes.cells, fs), (spaces.darcy.cells, fd)):
        pts = mesh.to_physical(cells, q.points)
        _, det = mesh.jacobians(cells)
        tot += np.einsum("cq,q,c->", fn(pts.reshape(-1, 2)).reshape(pts.shape[:2]),
                         q.weights, det)
    return tot / (mesh.rect_s.area + mesh.rect_d.area)


def velocity_errors(spaces, v, exact, which="u", degree=10):
    """``(|e^s|_1, ||e^d||, ||div e^d||, X-norm)`` of a combined velocity."""
    q = make_quadrature("triangle", degree)
    mesh = spaces.mesh
    vs, vd = spaces.split_velocity(v)
    V = spaces.stokes
    tab = V.tabulate(q.points)
    _, det = mesh.jacobians(V.cells)
    Gh = np.einsum("cl,clqxy->cqxy", vs[V.cell_dofs], tab.grads)
    G = exact.fn("grad_%s_s" % which)(tab.points.reshape(-1, 2)).reshape(Gh.shape)
    h1 = np.sqrt(np.einsum("cqxy,q,c->", (G - Gh) ** 2, q.weights, det))
    W = spaces.darcy
    tab = W.tabulate(q.points)
    _, det = mesh.jacobians(W.cells)
    pts = tab.points.reshape(-1, 2)
    Uh = np.einsum("cl,clqx->cqx", vd[W.cell_dofs], tab.values)
    dh = np.einsum("cl,clq->cq", vd[W.cell_dofs], tab.div)
    U = exact.fn("%s_d" % which)(pts).reshape(Uh.shape)
    dv = exact.fn("div_%s_d" % which)(pts).reshape(dh.shape)
    l2 = np.sqrt(np.einsum("cqx,q,c->", (U - Uh) ** 2, q.weights, det))
    ld = np.sqrt(np.einsum("cq,q,c->", (dv - dh) ** 2, q.weights, det))
    return float(h1), float(l2), float(ld), float(math.sqrt(h1 ** 2 + l2 ** 2 + ld ** 2))


def pressure_error(spaces, ph, exact, which="p", degree=10):
    """L2 error of a pressure, the exact one shifted to zero mean over Omega."""
    q = make_quadrature("triangle", degree)
    mesh = spaces.mesh
    fs, fd = exact.fn(which + "_s"), exact.fn(which + "_d")
    m = _mean(spaces, fs, fd, q)
    P = spaces.pressure
    tab = P.tabulate(q.points)
    _, det = mesh.jacobians(P.cells)
    vh = np.einsum("cl,clq->cq", ph[P.cell_dofs], tab.values)
    pts = tab.points.reshape(-1, 2)
    sd = mesh.subdomain[P.cells]
    ex = np.where(np.repeat(sd == msh.STOKES, q.weights.size),
                  fs(pts), fd(pts)).reshape(vh.shape) - m
    mh = np.einsum("cq,q,c->", vh, q.weights, det) / (mesh.rect_s.area + mesh.rect_d.area)
    return float(np.sqrt(np.einsum("cq,q,c->", (ex - vh + mh) ** 2, q.weights, det)))


def error_norms(sol, exact, degree=10):
    """One report row: X-norm and component errors for u, z; L2 errors for p, r."""
    if degree < 8:
        raise ValueError("error norms need quadrature degree >= 8")
    spaces = sol.system.spaces
    row = {}
    for w in ("u", "z"):
        h1, l2, dv, xn = velocity_errors(spaces, sol._get(w), exact, w, degree)
        row.update({"%s_h1_s" % w: h1, "%s_l2_d" % w: l2, "%s_div_d" % w: dv,
                    "%s_X" % w: xn})
    row["p_L2"] = pressure_error(spaces, sol.p, exact, "p", degree)
    row["r_L2"] = pressure_error(spaces, sol.r, exact, "r", degree)
    return row


# -- convergence study ------------------------------------------------------------------

EOC_KEYS = ("u_X", "z_X", "p_L2", "r_L2")
EXACT_LEVEL = 1e-9


@dataclass
class ConvergenceReport:
    """Per-level errors and EOCs of one scheme."""
    scheme: str
    octet: str
    rows: list = field(default_factory=list)

    def eoc(self, key):
        """``log2(e_l / e_(l+1))`` per increment; NaN when errors are at solver level."""
        e = np.array([r[key] for r in self.rows])
        out = []
        for a, b in zip(e[:-1], e[1:]):
            if max(a, b) < EXACT_LEVEL or b <= 0:
                out.append(float("nan"))
            else:
                out.append(float(np.log2(a / b)))
        return out

    def last_eoc(self, key):
        e = self.eoc(key)
        return e[-1] if e else float("nan")

    def table(self):
        """Rows with the EOC of the increment ending at each level."""
        out = []
        eocs = {k: [float("nan")] + self.eoc(k) for k in EOC_KEYS}
        for i, r in enumerate(self.rows):
            row = dict(scheme=self.scheme, **r)
            row.update({"eoc_" + k: eocs[k][i] for k in EOC_KEYS})
            out.append(row)
        return out


class StudyError(RuntimeError):
    pass


def solve_exact(exact, mesh, scheme, data=None, spaces=None, Pi=None):
    """Build spaces, reconstruction and system on ``mesh`` and solve."""
    spaces = build_spaces(mesh) if spaces is None else spaces
    data = derive_data(exact) if data is None else data
    if scheme == "robust" and Pi is None:
        Pi = build_reconstruction(mesh, spaces)
    return solve(build_system(mesh, spaces, data, scheme, Pi))


def convergence_study(exact, levels=4, scheme="classical", n0=2):
    """
    Solve on levels ``0..levels-1`` of uniform refinement and record errors.

    Raises
    ------
    ValueError
        If ``levels < 3``.
    StudyError
        If a level fails; the message names the level.
    """
    if levels < 3:
        raise ValueError("a convergence study needs at least 3 levels")
    data = derive_data(exact)
    report = ConvergenceReport(scheme, exact.name)
    mesh = msh.build_two_domain_mesh(exact.rect_s, exact.rect_d, n0)
    for level in range(levels):
        if level:
            mesh = msh.refine_uniform(mesh)
        try:
            sol = solve_exact(exact, mesh, scheme, data)
        except Exception as exc:
            raise StudyError("level %d: %s" % (level, exc)) from exc
        row = dict(level=level, h=mesh.h, ndof=int(sol.system.free.sum()),
                   residual=sol.residual)
        row.update(error_norms(sol, exact))
        row["cost"] = evaluate_cost(sol, data)
        report.rows.append(row)
    return report


# -- robustness experiment -----------------------------------------------------------------

def check_compact_support(phi, exact, tol=1e-12, samples=101):
    """Raise ``ValueError`` unless ``phi`` vanishes on the Stokes boundary."""
    f = _compile(_sym(phi))
    g = _compile(_grad(_sym(phi)))
    r = exact.rect_s
    t = np.linspace(0.0, 1.0, samples)
    pts = np.concatenate([
        np.column_stack([r.x0 + t * r.width, np.full_like(t, r.y0)]),
        np.column_stack([r.x0 + t * r.width, np.full_like(t, r.y1)]),
        np.column_stack([np.full_like(t, r.x0), r.y0 + t * r.height]),
        np.column_stack([np.full_like(t, r.x1), r.y0 + t * r.height])])
    if np.abs(f(pts)).max() > tol or np.abs(g(pts)).max() > tol:
        raise ValueError("phi must vanish with its gradient on the Stokes boundary")


def robustness_experiment(exact, phi=None, scales=(1.0, 1e2, 1e4), n0=2, level=1):
    """
    Velocity errors of both schemes under ``f^s <- f^s + s grad(phi)``.

    The exact velocity is unchanged; the exact Stokes pressure becomes
    ``p^s + s phi``. Returns a list of dicts with keys ``scale``,
    ``classical``, ``robust`` (u errors in the X-norm) and the robust
    velocity coefficient vectors under ``robust_u``.
    """
    phi = pressure_bubble() if phi is None else _sym(phi)
    check_compact_support(phi, exact)
    mesh = make_mesh(exact, n0, level)
    spaces = build_spaces(mesh)
    Pi = build_reconstruction(mesh, spaces)
    base = derive_data(exact)
    rows = []
    for s in scales:
        data = add_gradient_source(base, phi, s)
        row = {"scale": float(s)}
        for scheme in ("classical", "robust"):
            sol = solve(build_system(mesh, spaces, data, scheme, Pi))
            row[scheme] = velocity_errors(spaces, sol.u, exact, "u")[3]
            row[scheme + "_u"] = sol.u
        rows.append(row)
    return rows


def robust_spread(rows):
    e = np.array([r["robust"] for r in rows])
    return float((e.max() - e.min()) / e.min())


def classical_growth(rows):
    by = {r["scale"]: r["classical"] for r in rows}
    return by[max(by)] / by[min(by)]


# -- reduced-cost optimality check ---------------------------------------------------------

def control_problem_data(mu=1.0, K=((1.0, 0.0), (0.0, 1.0)), alpha=1.0, alpha1=1.0):
    """
    A genuine optimal control problem: source and target only.

    No adjoint residual data, zero divergences and homogeneous boundary
    values, so the optimality system is exactly the first-order condition
    of the discrete reduced cost.
    """
    f_s = _compile(_vec(("sin(pi*x)*y", "cos(pi*y)*x")))
    f_d = _compile(_vec(("x*y", "sin(pi*x)")))
    us_s = _compile(_vec(("cos(pi*x)*(y - 1)", "x**2")))
    us_d = _compile(_vec(("y**2", "sin(pi*x*y)")))
    return ProblemData(mu=mu, K=np.array(K, dtype=float), alpha=alpha, alpha1=alpha1,
                       f_s=f_s, f_d=f_d, u_star_s=us_s, u_star_d=us_d)


def finite_difference_check(mesh, scheme="classical", directions=5, eps=1e-3,
                            data=None, rng=0):
    """
    Central differences of the reduced cost at the computed control.

    Returns the list of ``|dJ| / ||d||`` along random directions.
    """
    spaces = build_spaces(mesh)
    data = control_problem_data() if data is None else data
    Pi = build_reconstruction(mesh, spaces) if scheme == "robust" else None
    sol = solve(build_system(mesh, spaces, data, scheme, Pi))
    st = StateSolver(sol.system)
    eta = sol.eta
    gen = np.random.default_rng(rng)
    out = []
    for _ in range(directions):
        d = gen.standard_normal(eta.shape)
        d /= st.control_norm(d)
        jp = st.reduced_cost(eta + eps * d)
        jm = st.reduced_cost(eta - eps * d)
        out.append(abs(jp - jm) / (2 * eps))
    return out


# -- output --------------------------------------------------------------------------------

def write_csv(path, rows, keys=None):
    rows = list(rows)
    keys = keys or [k for k in rows[0] if not isinstance(rows[0][k], np.ndarray)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(keys)
        for r in rows:
            wr.writerow([_fmt(r.get(k)) for k in keys])


def _fmt(v):
    if isinstance(v, float):
        return "%.6g" % v
    return v


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
