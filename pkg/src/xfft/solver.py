"""Matrix-free residual evaluation and the iterative solution schemes.

The global force residual is assembled element-wise: one vectorized pass
applies the shared per-(tet type, phase) reference matrices to every
element of the grid, then the cached matrices of the cut and fallback
elements correct their contributions.  The same pass accumulates the
volume-integrated stress, so each solver iteration costs one sweep over
the elements plus one FFT preconditioner application.

Sign convention: the residual is the gradient of the discrete energy,
r(u) = sum_e L_e^T (A_e u_e + Bfac_e eps_bar), i.e. the internal force of
the total strain eps_bar + grad^s u.  It vanishes for homogeneous cells at
u = 0 and at the converged solution, and the average stress then satisfies
<sigma> = C_eff eps_bar.

All schemes share the stopping criterion res_k <= tol * |<sigma(u_k)>|,
where res_k is the preconditioned residual norm of the cell-averaged
assembly, sqrt(r^T P^-1 r) / |Y|.  This normalization keeps the measure
mesh-stable and consistent with the averaged stress on the right-hand
side; `System.res_norm` itself returns the raw quadratic form.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import greenop
from .element import ElementCaches, build_caches
from .mesh import DofLayout, Grid, build_topology, detect_enrichment
from .microstructure import sample_nodal
from .voigt import MaterialIso, iso_stiffness, stiffness_bounds

ZERO6 = np.zeros(6)

# absolute-residual fallback when the average stress vanishes (eps_bar = 0)
SIGMA_NORM_FLOOR = 1e-300


@dataclass
class DofVector:
    """Displacement-type vector: grid field plus enriched values."""

    grid: np.ndarray  # (N1, N2, N3, 3)
    enr: np.ndarray  # (n_x, 3)

    @classmethod
    def zeros(cls, layout: DofLayout):
        return cls(
            grid=np.zeros(tuple(layout.grid.n) + (3,)),
            enr=np.zeros((layout.n_x, 3)),
        )

    def copy(self):
        return DofVector(self.grid.copy(), self.enr.copy())

    def dot(self, other) -> float:
        return float(np.vdot(self.grid, other.grid) + np.vdot(self.enr, other.enr))

    def axpy(self, a: float, other):
        self.grid += a * other.grid
        self.enr += a * other.enr

    def scaled(self, a: float):
        return DofVector(a * self.grid, a * self.enr)


@dataclass
class SolverConfig:
    scheme: str = "lcg"
    tol: float = 1e-7
    maxit: int = 500
    report_interval: int = 0

    def __post_init__(self):
        if self.scheme not in ("basic", "bb", "lcg", "ncg"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.maxit < 1:
            raise ValueError("maxit must be at least 1")


@dataclass
class SolveResult:
    u: DofVector
    converged: bool
    iterations: int
    scheme: str
    sigma: np.ndarray  # final average stress (6,)
    history: list  # rows (iteration, res, res / |<sigma>|, wall_time)
    energies: list
    res_final: float
    res_verified: float  # recomputed from scratch after the solve
    wall_time: float


class System:
    """Discretized cell problem: geometry, caches and preconditioner."""

    def __init__(self, grid, topo, layout, caches: ElementCaches, symbol, stiffness):
        self.grid = grid
        self.topo = topo
        self.layout = layout
        self.caches = caches
        self.symbol = symbol
        self.stiffness = np.asarray(stiffness, dtype=float)
        self.c_minus, self.c_plus = stiffness_bounds(list(self.stiffness))
        self._cut_groups = self._make_groups(caches.cut_ttype, caches.cut_pbase)
        self._mi_groups = self._make_groups(caches.mi_ttype, caches.mi_pbase)

    @staticmethod
    def _make_groups(ttype, pbase):
        groups = []
        if len(ttype):
            keys = ttype.astype(np.int64) * 256 + pbase
            for key in np.unique(keys):
                groups.append((int(key) // 256, int(key) % 256, np.nonzero(keys == key)[0]))
        return groups

    def zeros(self) -> DofVector:
        return DofVector.zeros(self.layout)

    # -- element sweeps ----------------------------------------------------

    def _gather(self, u_grid, t):
        parts = [
            np.roll(u_grid, shift=(-a, -b, -c), axis=(0, 1, 2))
            for a, b, c in self.topo.offsets[t]
        ]
        return np.concatenate(parts, axis=-1)

    def _scatter(self, acc, t, fe):
        for l, (a, b, c) in enumerate(self.topo.offsets[t]):
            acc += np.roll(fe[..., 3 * l : 3 * l + 3], shift=(a, b, c), axis=(0, 1, 2))

    def _sweep(self, u: DofVector, eps_bar, want_force=True):
        """One pass over all elements.

        Returns (force residual or None, volume-integrated stress (6,)).
        """
        c = self.caches
        eps_bar = np.asarray(eps_bar, dtype=float)
        nshape = tuple(self.grid.n)
        vol = c.tet_volume
        sig_total = np.zeros(6)
        r = DofVector.zeros(self.layout) if want_force else None
        for t in range(6):
            ue = self._gather(u.grid, t).reshape(-1, 12)
            eps = ue @ c.b_mats[t].T
            eps += eps_bar
            sig = np.empty_like(eps)
            pt = c.ptype[t].ravel()
            for p in range(len(c.stiffness)):
                rows = pt == p
                if rows.any():
                    sig[rows] = eps[rows] @ c.stiffness[p].T
            sig_total += vol * sig.sum(axis=0)
            if want_force:
                fe = sig @ (vol * c.b_mats[t])
                self._scatter(r.grid, t, fe.reshape(nshape + (12,)))

        if c.n_cut:
            uflat = u.grid.reshape(-1, 3)
            ue24 = np.concatenate(
                [uflat[c.cut_nodes], u.enr[c.cut_enr]], axis=1
            ).reshape(-1, 24)
            y = np.einsum("eij,ej->ei", c.cut_a, ue24)
            y += c.cut_bfac @ eps_bar
            sig_total += np.einsum("eid,ei->d", c.cut_bfac, ue24)
            sig_total += c.cut_cv.sum(axis=0) @ eps_bar
            for t, p, idx in self._cut_groups:
                u12 = ue24[idx, :12]
                y[idx, :12] -= u12 @ c.ref_a[t, p].T + c.ref_bfac[t, p] @ eps_bar
                eps_sum = c.b_mats[t] @ u12.sum(axis=0) + len(idx) * eps_bar
                sig_total -= vol * c.stiffness[p] @ eps_sum
            if want_force:
                np.add.at(
                    r.grid.reshape(-1, 3), c.cut_nodes, y[:, :12].reshape(-1, 4, 3)
                )
                np.add.at(r.enr, c.cut_enr, y[:, 12:].reshape(-1, 4, 3))

        if c.n_mi:
            uflat = u.grid.reshape(-1, 3)
            ue12 = uflat[c.mi_nodes].reshape(-1, 12)
            y = np.einsum("eij,ej->ei", c.mi_a, ue12)
            y += c.mi_bfac @ eps_bar
            sig_total += np.einsum("eid,ei->d", c.mi_bfac, ue12)
            sig_total += c.mi_cv.sum(axis=0) @ eps_bar
            for t, p, idx in self._mi_groups:
                u12 = ue12[idx]
                y[idx] -= u12 @ c.ref_a[t, p].T + c.ref_bfac[t, p] @ eps_bar
                eps_sum = c.b_mats[t] @ u12.sum(axis=0) + len(idx) * eps_bar
                sig_total -= vol * c.stiffness[p] @ eps_sum
            if want_force:
                np.add.at(r.grid.reshape(-1, 3), c.mi_nodes, y.reshape(-1, 4, 3))

        return r, sig_total

    # -- operations --------------------------------------------------------

    def residual(self, u: DofVector, eps_bar) -> DofVector:
        """Assembled force residual r(u) = sum_e L_e^T (A_e u_e + Bfac_e eps_bar)."""
        return self._sweep(u, eps_bar, want_force=True)[0]

    def operator(self, d: DofVector) -> DofVector:
        """Linear part A d of the residual."""
        return self._sweep(d, ZERO6, want_force=True)[0]

    def average_stress(self, u: DofVector, eps_bar) -> np.ndarray:
        """Cell-averaged stress <sigma> = (1/|Y|) sum_e (S_e u_e + V_e <C>_e eps_bar)."""
        return self._sweep(u, eps_bar, want_force=False)[1] / self.grid.volume

    def precondition(self, f: DofVector) -> DofVector:
        """Block preconditioner: Green inverse on the grid, identity on enriched."""
        z_grid = greenop.apply_preconditioner(self.symbol, f.grid)
        return DofVector(z_grid, f.enr.copy())

    def res_norm(self, f: DofVector, z: DofVector | None = None) -> float:
        """Preconditioned residual norm sqrt(f^T P^-1 f)."""
        if z is None:
            z = self.precondition(f)
        val = f.dot(z)
        if val < -1e-14 * max(f.dot(f), 1e-300):
            raise RuntimeError("preconditioner produced a negative quadratic form")
        return float(np.sqrt(max(val, 0.0)))

    @property
    def step_size(self) -> float:
        """Basic-scheme step denominator s0 = (C_minus + C_plus) / 2."""
        return 0.5 * (self.c_minus + self.c_plus)


def build_system(
    assembly, grid: Grid, materials, mode: str = "xfem", store_quadrature: bool = True
) -> System:
    """Discretize a cell: sample geometry, detect enrichment, build caches."""
    if mode not in ("xfem", "p1"):
        raise ValueError(f"unknown discretization {mode!r}")
    topo = build_topology()
    stiffness = np.array(
        [
            iso_stiffness(m) if isinstance(m, MaterialIso) else np.asarray(m, dtype=float)
            for m in materials
        ]
    )
    nodal = sample_nodal(assembly, grid)
    if mode == "xfem" and assembly.n_interfaces:
        layout = detect_enrichment(nodal, topo, grid)
    else:
        layout = DofLayout(
            grid=grid,
            enr_index=np.full(tuple(grid.n), -1, dtype=np.int64),
            n_x=0,
            cut_region=np.full((topo.n_tets,) + tuple(grid.n), -1, dtype=np.int8),
            n_multi_interface=0,
        )
    caches = build_caches(
        assembly,
        grid,
        topo,
        layout,
        nodal,
        stiffness,
        mode=mode,
        store_quadrature=store_quadrature,
    )
    symbol = greenop.build_symbol(grid, topo)
    return System(grid, topo, layout, caches, symbol, stiffness)


# ---------------------------------------------------------------------------
# iterative schemes
# ---------------------------------------------------------------------------


class _Run:
    """Shared bookkeeping: stopping criterion, history, timing."""

    def __init__(self, system: System, config: SolverConfig, eps_bar):
        self.system = system
        self.config = config
        self.eps_bar = np.asarray(eps_bar, dtype=float)
        self.inv_vol = 1.0 / system.grid.volume
        self.t0 = time.perf_counter()
        self.history = []
        self.energies = []

    def record(self, k, res_raw, sigma):
        res = res_raw * self.inv_vol
        sig_norm = float(np.linalg.norm(sigma))
        rel = res / sig_norm if sig_norm > 0 else np.inf
        self.history.append((k, res, rel, time.perf_counter() - self.t0))
        if self.config.report_interval and k % self.config.report_interval == 0:
            print(f"  it {k:4d}  res {res:.6e}  res/|sigma| {rel:.6e}")

    def done(self, res_raw, sigma) -> bool:
        res = res_raw * self.inv_vol
        sig_norm = float(np.linalg.norm(sigma))
        if sig_norm < SIGMA_NORM_FLOOR:
            return res <= self.config.tol
        return res <= self.config.tol * sig_norm

    def finish(self, u, converged, k, sigma, res_raw) -> SolveResult:
        f_check = self.system.residual(u, self.eps_bar)
        res_verified = self.system.res_norm(f_check) * self.inv_vol
        return SolveResult(
            u=u,
            converged=converged,
            iterations=k,
            scheme=self.config.scheme,
            sigma=np.asarray(sigma, dtype=float),
            history=self.history,
            energies=self.energies,
            res_final=res_raw * self.inv_vol,
            res_verified=res_verified,
            wall_time=time.perf_counter() - self.t0,
        )


def run_lcg(system: System, config: SolverConfig, eps_bar) -> SolveResult:
    """Preconditioned linear conjugate gradients on the displacement dofs."""
    run = _Run(system, config, eps_bar)
    vol = system.grid.volume
    u = system.zeros()
    f, sig_int = system._sweep(u, eps_bar)
    r0 = f.copy()
    sigma = sig_int / vol
    z = system.precondition(f)
    res = system.res_norm(f, z)
    d = z.scaled(-1.0)
    k = 0
    converged = False
    while True:
        run.record(k, res, sigma)
        run.energies.append(0.5 * (u.dot(f) + u.dot(r0)))
        if run.done(res, sigma):
            converged = True
            break
        if k >= config.maxit:
            break
        w, dsig_int = system._sweep(d, ZERO6)
        dw = d.dot(w)
        if dw <= 0.0:
            raise RuntimeError(
                f"conjugate gradients lost positive definiteness (d^T A d = {dw:g})"
            )
        alpha = res**2 / dw
        u.axpy(alpha, d)
        f.axpy(alpha, w)
        sigma = sigma + (alpha / vol) * dsig_int
        z = system.precondition(f)
        res_sq_new = f.dot(z)
        beta = res_sq_new / res**2
        d = DofVector(beta * d.grid - z.grid, beta * d.enr - z.enr)
        res = float(np.sqrt(max(res_sq_new, 0.0)))
        k += 1
    return run.finish(u, converged, k, sigma, res)


def run_basic(system: System, config: SolverConfig, eps_bar) -> SolveResult:
    """Preconditioned gradient descent with the fixed step 1/s0."""
    run = _Run(system, config, eps_bar)
    vol = system.grid.volume
    inv_s0 = 1.0 / system.step_size
    u = system.zeros()
    k = 0
    converged = False
    while True:
        f, sig_int = system._sweep(u, eps_bar)
        sigma = sig_int / vol
        z = system.precondition(f)
        res = system.res_norm(f, z)
        run.record(k, res, sigma)
        if run.done(res, sigma):
            converged = True
            break
        if k >= config.maxit:
            break
        u.axpy(-inv_s0, z)
        k += 1
    return run.finish(u, converged, k, sigma, res)


def run_bb(system: System, config: SolverConfig, eps_bar) -> SolveResult:
    """Barzilai-Borwein step selection on the preconditioned gradient.

    BB1 step tau = <s, s>_P / <s, y>_P evaluated in the P inner product,
    which reduces to cheap Euclidean dots of stored vectors; falls back to
    the basic step 1/s0 on the first iteration and on a non-positive
    denominator.  The residual may grow between iterations.
    """
    run = _Run(system, config, eps_bar)
    vol = system.grid.volume
    inv_s0 = 1.0 / system.step_size
    u = system.zeros()
    z_prev = None
    tau_prev = res_prev = None
    k = 0
    converged = False
    while True:
        f, sig_int = system._sweep(u, eps_bar)
        sigma = sig_int / vol
        z = system.precondition(f)
        res = system.res_norm(f, z)
        run.record(k, res, sigma)
        if run.done(res, sigma):
            converged = True
            break
        if k >= config.maxit:
            break
        tau = inv_s0
        if z_prev is not None:
            # s = -tau_prev z_prev, y = f - f_prev;  <s,s>_P = tau_prev^2 res_prev^2
            denom = -tau_prev * (z_prev.dot(f) - res_prev**2)
            if np.isfinite(denom) and denom > 0.0:
                tau = tau_prev**2 * res_prev**2 / denom
        u.axpy(-tau, z)
        z_prev, tau_prev, res_prev = z, tau, res
        k += 1
    return run.finish(u, converged, k, sigma, res)


def run_ncg(system: System, config: SolverConfig, eps_bar, line_search: str = "fixed"):
    """Preconditioned Fletcher-Reeves nonlinear conjugate gradients.

    The trial step is the basic-scheme step 1/s0 ("fixed"); "exact" uses
    the quadratic line minimum and then reproduces linear CG iterates.
    Restarts on loss of descent.
    """
    if line_search not in ("fixed", "exact"):
        raise ValueError(f"unknown line search {line_search!r}")
    run = _Run(system, config, eps_bar)
    vol = system.grid.volume
    inv_s0 = 1.0 / system.step_size
    u = system.zeros()
    f, sig_int = system._sweep(u, eps_bar)
    sigma = sig_int / vol
    z = system.precondition(f)
    res = system.res_norm(f, z)
    d = z.scaled(-1.0)
    k = 0
    converged = False
    while True:
        run.record(k, res, sigma)
        if run.done(res, sigma):
            converged = True
            break
        if k >= config.maxit:
            break
        if line_search == "exact":
            w = system.operator(d)
            dw = d.dot(w)
            if dw <= 0.0:
                raise RuntimeError("non-positive curvature in line search")
            alpha = -f.dot(d) / dw
        else:
            alpha = inv_s0
        u.axpy(alpha, d)
        f, sig_int = system._sweep(u, eps_bar)
        sigma = sig_int / vol
        z = system.precondition(f)
        res_new = system.res_norm(f, z)
        beta = res_new**2 / res**2
        d = DofVector(beta * d.grid - z.grid, beta * d.enr - z.enr)
        if f.dot(d) >= 0.0:
            d = z.scaled(-1.0)
        res = res_new
        k += 1
    return run.finish(u, converged, k, sigma, res)


_SCHEMES = {"lcg": run_lcg, "basic": run_basic, "bb": run_bb, "ncg": run_ncg}


def run_scheme(system: System, config: SolverConfig, eps_bar) -> SolveResult:
    """Dispatch to the configured iterative scheme."""
    return _SCHEMES[config.scheme](system, config, eps_bar)
