"""Shared test oracles, kept independent of the production code paths.

The dense assembler walks every element with the slow reference element
routines and its own node-indexing arithmetic, so it cross-checks the
vectorized cache builder, the gather/scatter maps and the matrix-free
residual at once.
"""

import math

import numpy as np

from xfft.element import assemble_enriched, assemble_plain, b_matrix, p1_grads
from xfft.mesh import tet_vertices


def simplex_monomial(a, b, c):
    """Exact integral of x^a y^b z^c over the unit reference tetrahedron."""
    return (
        math.factorial(a)
        * math.factorial(b)
        * math.factorial(c)
        / math.factorial(a + b + c + 3)
    )


# degree-3 five-point rule (centroid with negative weight + four satellites);
# validated against closed-form monomial integrals in test_element
DEG3_BARY = np.array(
    [
        [0.25, 0.25, 0.25, 0.25],
        [0.5, 1 / 6, 1 / 6, 1 / 6],
        [1 / 6, 0.5, 1 / 6, 1 / 6],
        [1 / 6, 1 / 6, 0.5, 1 / 6],
        [1 / 6, 1 / 6, 1 / 6, 0.5],
    ]
)
DEG3_WEIGHTS = np.array([-0.8, 0.45, 0.45, 0.45, 0.45])


def deg3_quadrature(verts):
    verts = np.asarray(verts, dtype=float)
    vol = abs(np.linalg.det(verts[1:] - verts[0])) / 6.0
    return DEG3_BARY @ verts, DEG3_WEIGHTS * vol


def point_in_tet(verts, x, tol=1e-12):
    """Barycentric membership test (brute force)."""
    verts = np.asarray(verts, dtype=float)
    d = (verts[1:] - verts[0]).T
    lam = np.linalg.solve(d, np.asarray(x, dtype=float) - verts[0])
    lam = np.concatenate([[1.0 - lam.sum()], lam])
    return np.all(lam >= -tol)


def node_id(i, j, k, n):
    """Flat node index, recomputed from first principles."""
    return (i % n[0]) * n[1] * n[2] + (j % n[1]) * n[2] + (k % n[2])


def element_matrices_reference(system, assembly, t, voxel):
    """Reference matrices and dof slots of one element.

    Returns (a, bfac, fe_nodes, enr_slots or None) using the slow
    per-element assembly and independent index arithmetic.
    """
    c = system.caches
    grid, topo = system.grid, system.topo
    verts = tet_vertices(topo, grid, t)
    offs = topo.offsets[t]
    nodes = [node_id(voxel[0] + o[0], voxel[1] + o[1], voxel[2] + o[2], grid.n) for o in offs]
    cut_slot = c.slot_map("cut")[t, voxel[0], voxel[1], voxel[2]]
    mi_slot = c.slot_map("mi")[t, voxel[0], voxel[1], voxel[2]]
    if cut_slot >= 0:
        e = cut_slot
        reg = int(c.cut_region[e])
        # walk regions with the cut side overriding region `reg`
        def side_phase(side):
            for r, region in enumerate(assembly.regions):
                if r == reg:
                    s = side
                else:
                    corner = np.array(voxel) + offs[0]
                    x = corner * np.array(grid.h)
                    s = 1.0 if assembly.eval(r, x, grid.lengths) > 0 else -1.0
                if s > 0:
                    return region.inside_phase
            return assembly.regions[-1].outside_phase

        mats = assemble_enriched(
            verts,
            c.cut_levels[e],
            c.stiffness[side_phase(+1)],
            c.stiffness[side_phase(-1)],
            c.cut_scale[e],
        )
        return mats.a, mats.bfac, nodes, c.cut_enr[e]
    if mi_slot >= 0:
        e = mi_slot
        return c.mi_a[e], c.mi_bfac[e], nodes, None
    p = c.ptype[t, voxel[0], voxel[1], voxel[2]]
    mats = assemble_plain(verts, c.stiffness[p])
    return mats.a, mats.bfac, nodes, None


def dense_system(system, assembly):
    """Dense (A, B) with residual(u, eps) == A u + B eps, dofs flattened.

    Dof order: 3*n_fe grid dofs (node-major, component-minor) followed by
    3*n_x enriched dofs.
    """
    n_fe = system.grid.n_nodes
    n_x = system.layout.n_x
    nd = 3 * (n_fe + n_x)
    a = np.zeros((nd, nd))
    bmat = np.zeros((nd, 6))
    nshape = system.grid.n
    for t in range(6):
        for i in range(nshape[0]):
            for j in range(nshape[1]):
                for k in range(nshape[2]):
                    ae, bfac, nodes, enr = element_matrices_reference(
                        system, assembly, t, (i, j, k)
                    )
                    slots = []
                    for nid in nodes:
                        slots.extend(3 * nid + c for c in range(3))
                    if enr is not None:
                        for es in enr:
                            slots.extend(3 * n_fe + 3 * es + c for c in range(3))
                    slots = np.array(slots)
                    a[np.ix_(slots, slots)] += ae
                    bmat[slots] += bfac
    return a, bmat


def flatten_dofs(u):
    return np.concatenate([u.grid.reshape(-1), u.enr.reshape(-1)])


def unflatten_dofs(vec, system):
    u = system.zeros()
    n_grid = u.grid.size
    u.grid[:] = vec[:n_grid].reshape(u.grid.shape)
    u.enr[:] = vec[n_grid:].reshape(u.enr.shape)
    return u


def solve_dense(system, assembly, eps_bar):
    """Direct minimum-norm solve of the dense system (oracle)."""
    a, bmat = dense_system(system, assembly)
    rhs = -bmat @ np.asarray(eps_bar, dtype=float)
    sol, *_ = np.linalg.lstsq(a, rhs, rcond=None)
    return unflatten_dofs(sol, system), a, bmat
