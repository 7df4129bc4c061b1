"""P1 element kernels: shape gradients, interface enrichment, cut-cell
quadrature and cached element matrices.

Element degrees of freedom are ordered node-major, component-minor: slots
0..11 hold the four standard nodal displacements, slots 12..23 (enriched
elements only) the four enriched nodal displacements.  All strain-like
rows use the Mandel convention of :mod:`xfft.voigt`.

Interfaces inside an element are linearized from the nodal level-set
values; the resulting subtetrahedra are integrated with the four-point
symmetric simplex rule, which is degree-2 exact and therefore integrates
the (at most quadratic) stiffness integrands without error.  Sliver
subtets below 1e-12 of the parent volume are dropped and the remaining
weights renormalized, since weights at round-off scale destabilize the
internal scaling factors.
"""

from dataclasses import dataclass, field

import numpy as np

from .mesh import DofLayout, ElementTopology, Grid, corner_fields, tet_vertices

SQRT2 = np.sqrt(2.0)

# degree-2 symmetric 4-point simplex rule: equal weights V/4 at the four
# permutations of barycentric (a, b, b, b)
SH_A = 0.5854101966249685  # (5 + 3*sqrt(5)) / 20
SH_B = 0.1381966011250105  # (5 - sqrt(5)) / 20
SH_BARY = np.full((4, 4), SH_B)
np.fill_diagonal(SH_BARY, SH_A)

DEGENERATE_REL_VOLUME = 1e-12
SCALE_DROP_THRESHOLD = 1e-300


def p1_grads(verts: np.ndarray) -> np.ndarray:
    """Constant gradients (4, 3) of the barycentric shape functions."""
    verts = np.asarray(verts, dtype=float)
    d = (verts[1:] - verts[0]).T
    det = np.linalg.det(d)
    scale = np.max(np.abs(verts[1:] - verts[0]))
    if abs(det) < 1e-12 * scale**3:
        raise ValueError("degenerate tetrahedron")
    g = np.empty((4, 3))
    g[1:] = np.linalg.inv(d)
    g[0] = -g[1:].sum(axis=0)
    return g


def barycentric(verts: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Barycentric coordinates (..., 4) of points x inside tet `verts`."""
    verts = np.asarray(verts, dtype=float)
    x = np.asarray(x, dtype=float)
    d = (verts[1:] - verts[0]).T
    lam123 = (x - verts[0]) @ np.linalg.inv(d).T
    lam = np.empty(x.shape[:-1] + (4,))
    lam[..., 1:] = lam123
    lam[..., 0] = 1.0 - lam123.sum(axis=-1)
    return lam


def shunn_ham_4(verts: np.ndarray):
    """Four-point degree-2 quadrature: points (4, 3) and weights (4,)."""
    verts = np.asarray(verts, dtype=float)
    vol = abs(np.linalg.det(verts[1:] - verts[0])) / 6.0
    return SH_BARY @ verts, np.full(4, vol / 4.0)


def sym_grad_cols(g: np.ndarray) -> np.ndarray:
    """Mandel columns (..., 6, 3) of sym(e_c (x) g) for the three components.

    Column c is the Mandel vector of the symmetrized gradient of a
    displacement field N(x) e_c whose scalar gradient is g.
    """
    g = np.asarray(g, dtype=float)
    out = np.zeros(g.shape[:-1] + (6, 3))
    gx, gy, gz = g[..., 0], g[..., 1], g[..., 2]
    out[..., 0, 0] = gx
    out[..., 1, 1] = gy
    out[..., 2, 2] = gz
    out[..., 3, 1] = gz / SQRT2
    out[..., 3, 2] = gy / SQRT2
    out[..., 4, 0] = gz / SQRT2
    out[..., 4, 2] = gx / SQRT2
    out[..., 5, 0] = gy / SQRT2
    out[..., 5, 1] = gx / SQRT2
    return out


def b_matrix(grads: np.ndarray) -> np.ndarray:
    """Strain-displacement matrix (6, 3*n) from n scalar gradients (n, 3)."""
    cols = sym_grad_cols(grads)  # (n, 6, 3)
    n = cols.shape[0]
    return cols.transpose(1, 0, 2).reshape(6, 3 * n)


def modified_abs(levels: np.ndarray, verts: np.ndarray, x: np.ndarray):
    """Modified abs enrichment at x: value and the gradient on x's side.

    rho(x) = sum_i N_i |L_i| - |sum_i N_i L_i|; piecewise linear over the
    two sides of the linearized interface and identically zero when all
    nodal values share one sign.
    """
    levels = np.asarray(levels, dtype=float)
    lam = barycentric(verts, x)
    lh = lam @ levels
    side = 1.0 if lh >= 0.0 else -1.0
    value = lam @ np.abs(levels) - abs(lh)
    grads = p1_grads(verts)
    grad = grads.T @ (np.abs(levels) - side * levels)
    return value, grad


# ---------------------------------------------------------------------------
# cut-tetrahedron subdivision (single linearized interface)
# ---------------------------------------------------------------------------


def _prism_tets(a, b):
    """Split the wedge with triangular faces a=(a0,a1,a2), b=(b0,b1,b2)."""
    return [(a[0], a[1], a[2], b[0]), (a[1], a[2], b[0], b[1]), (a[2], b[0], b[1], b[2])]


def _build_cut_templates():
    """Subtet templates per sign pattern (bit i set <=> L_i > 0).

    Vertex specs are either a node index or an edge pair (i, j) meaning the
    zero crossing at t = L_i / (L_i - L_j) from node i towards node j.
    """
    table = {}
    for code in range(16):
        pos = [i for i in range(4) if code >> i & 1]
        neg = [i for i in range(4) if not code >> i & 1]
        if not pos or not neg:
            table[code] = [((0, 1, 2, 3), 1 if pos else -1)]
        elif len(neg) == 1 or len(pos) == 1:
            apex, others, apex_side = (
                (neg[0], pos, -1) if len(neg) == 1 else (pos[0], neg, 1)
            )
            cuts = [(apex, o) for o in others]
            subs = [((apex, cuts[0], cuts[1], cuts[2]), apex_side)]
            subs += [(t, -apex_side) for t in _prism_tets(tuple(others), tuple(cuts))]
            table[code] = subs
        else:
            a, b = neg
            c, d = pos
            eac, ead, ebc, ebd = (a, c), (a, d), (b, c), (b, d)
            subs = [(t, -1) for t in _prism_tets((a, eac, ead), (b, ebc, ebd))]
            subs += [(t, 1) for t in _prism_tets((c, eac, ebc), (d, ead, ebd))]
            table[code] = subs
    return table


CUT_TEMPLATES = _build_cut_templates()


def _sign_code(levels):
    return int(sum(1 << i for i in range(4) if levels[i] > 0.0))


def _template_bary(template, levels):
    """Barycentric vertex matrices (n_sub, 4, 4) of a template instance."""
    levels = np.asarray(levels, dtype=float)
    bary = np.zeros((len(template), 4, 4))
    for si, (spec, _) in enumerate(template):
        for vi, vs in enumerate(spec):
            if isinstance(vs, tuple):
                i, j = vs
                t = levels[i] / (levels[i] - levels[j])
                bary[si, vi, i] = 1.0 - t
                bary[si, vi, j] = t
            else:
                bary[si, vi, vs] = 1.0
    return bary


@dataclass(frozen=True)
class SubTet:
    """One single-phase piece of a cut tetrahedron."""

    vertices: np.ndarray
    side: int  # sign of the interpolated level set on this piece
    volume: float


def cut_tet(verts: np.ndarray, levels: np.ndarray) -> list:
    """Subdivide a tet along the linearized zero level set.

    Uncut input returns the tet itself; one minority sign gives 4 subtets,
    the two-two pattern 6.  Degenerate slivers are dropped and the kept
    volumes renormalized so they sum to the parent volume.
    """
    verts = np.asarray(verts, dtype=float)
    levels = np.asarray(levels, dtype=float)
    if np.any(levels == 0.0):
        raise ValueError("nodal level values must be snapped away from zero")
    template = CUT_TEMPLATES[_sign_code(levels)]
    parent_vol = abs(np.linalg.det(verts[1:] - verts[0])) / 6.0
    bary = _template_bary(template, levels)
    sub_verts = bary @ verts
    vols = np.abs(np.linalg.det(sub_verts[:, 1:] - sub_verts[:, :1])) / 6.0
    keep = vols >= DEGENERATE_REL_VOLUME * parent_vol
    factor = parent_vol / vols[keep].sum()
    return [
        SubTet(vertices=sub_verts[i], side=template[i][1], volume=vols[i] * factor)
        for i in np.nonzero(keep)[0]
    ]


# ---------------------------------------------------------------------------
# single-element assembly (reference implementation; the cache builder below
# is the vectorized production path and is tested against this one)
# ---------------------------------------------------------------------------


@dataclass
class ElementMatrices:
    """Cached element matrices: stiffness, load factor and stress map."""

    a: np.ndarray  # (nd, nd) symmetric PSD
    bfac: np.ndarray  # (nd, 6), load vector is bfac @ eps_bar
    cv: np.ndarray  # (6, 6) volume-integrated stiffness

    @property
    def stress_map(self):
        """(6, nd) map from element dofs to volume-integrated stress."""
        return self.bfac.T


def assemble_plain(verts, stiffness) -> ElementMatrices:
    """Uncut single-phase P1 element (12 dofs, constant strain)."""
    verts = np.asarray(verts, dtype=float)
    c = np.asarray(stiffness, dtype=float)
    vol = abs(np.linalg.det(verts[1:] - verts[0])) / 6.0
    b = b_matrix(p1_grads(verts))
    return ElementMatrices(a=vol * b.T @ c @ b, bfac=vol * b.T @ c, cv=vol * c)


def enrichment_quadrature(verts, levels):
    """Quadrature data of a cut element.

    Yields (points, weights, lam, gx, side) per subtet, where lam (4, 4)
    holds the parent barycentric coordinates of the 4 quadrature points and
    gx (4, 4, 3) the gradient of the unscaled enriched function of each
    node at each point.
    """
    verts = np.asarray(verts, dtype=float)
    levels = np.asarray(levels, dtype=float)
    grads = p1_grads(verts)
    out = []
    for sub in cut_tet(verts, levels):
        points = SH_BARY @ sub.vertices
        weights = np.full(4, sub.volume / 4.0)
        lam = barycentric(verts, points)
        coef = np.abs(levels) - sub.side * levels
        rho = lam @ coef
        grho = grads.T @ coef
        gx = rho[:, None, None] * grads[None] + lam[..., None] * grho[None, None]
        out.append((points, weights, lam, gx, sub.side))
    return out


def d0_element(verts, levels) -> np.ndarray:
    """Per-node, per-component scaling integrals of one cut element.

    Entry (j, a) is the element's contribution to the squared L2 norm of
    the symmetrized gradient of the unscaled enriched function N_X^j e_a,
    using the identity |sym(e_a (x) g)|^2 = |g|^2 / 2 + g_a^2 / 2.
    """
    d = np.zeros((4, 3))
    for _, weights, _, gx, _ in enrichment_quadrature(verts, levels):
        gsq = (gx**2).sum(axis=-1)  # (4 qp, 4 nodes)
        d += 0.5 * np.einsum("q,qj->j", weights, gsq)[:, None]
        d += 0.5 * np.einsum("q,qja->ja", weights, gx**2)
    return d


def assemble_enriched(verts, levels, stiff_plus, stiff_minus, scale) -> ElementMatrices:
    """Cut P1 element with modified-abs enrichment (24 dofs).

    `scale` (4, 3) holds the per-dof internal scaling applied to the
    enriched columns (1/sqrt(D0); zero removes a dropped dof).
    """
    bfe = b_matrix(p1_grads(verts))
    scale = np.asarray(scale, dtype=float)
    a = np.zeros((24, 24))
    bfac = np.zeros((24, 6))
    cv = np.zeros((6, 6))
    for _, weights, _, gx, side in enrichment_quadrature(verts, levels):
        c = np.asarray(stiff_plus if side > 0 else stiff_minus, dtype=float)
        cols = sym_grad_cols(gx) * scale[None, :, None, :]  # (4qp, 4n, 6, 3)
        bx = cols.transpose(0, 2, 1, 3).reshape(4, 6, 12)
        b = np.concatenate([np.broadcast_to(bfe, (4, 6, 12)), bx], axis=2)
        wc = weights[:, None, None] * c
        a += np.einsum("qci,qcd,qdj->ij", b, wc, b)
        bfac += np.einsum("qci,qcd->id", b, wc)
        cv += weights.sum() * c
    return ElementMatrices(a=a, bfac=bfac, cv=cv)


# ---------------------------------------------------------------------------
# vectorized cache construction for the whole cell
# ---------------------------------------------------------------------------


@dataclass
class ElementCaches:
    """Per-element data of one discretized cell.

    Uncut single-phase elements share one reference matrix per (tet type,
    phase); cut elements carry individual 24x24 matrices, multi-interface
    fallback elements individual 12x12 ones.  The residual pass applies the
    reference matrices to every element and corrects the special ones, so
    reference matrices are also recorded for the special elements' base
    phase assignment (`ptype`).
    """

    grid: Grid
    topo: ElementTopology
    mode: str
    stiffness: np.ndarray  # (n_phase, 6, 6)
    grads: np.ndarray  # (6, 4, 3) per tet type
    b_mats: np.ndarray  # (6, 6, 12)
    tet_volume: float
    ref_a: np.ndarray  # (6, n_phase, 12, 12)
    ref_bfac: np.ndarray  # (6, n_phase, 12, 6)
    ptype: np.ndarray  # (6, N1, N2, N3) int8
    total_cv: np.ndarray  # (6, 6): sum of V_e <C>_e over all elements
    # enriched (single-interface cut) elements
    cut_ttype: np.ndarray
    cut_voxel: np.ndarray  # (n_cut, 3) lattice coords
    cut_nodes: np.ndarray  # (n_cut, 4) flat node ids
    cut_enr: np.ndarray  # (n_cut, 4) enriched slots
    cut_pbase: np.ndarray
    cut_region: np.ndarray
    cut_levels: np.ndarray  # (n_cut, 4) nodal values of the cutting interface
    cut_scale: np.ndarray  # (n_cut, 4, 3) applied internal scaling
    cut_a: np.ndarray  # (n_cut, 24, 24)
    cut_bfac: np.ndarray  # (n_cut, 24, 6)
    cut_cv: np.ndarray  # (n_cut, 6, 6)
    # multi-interface fallback elements (assembled without enrichment)
    mi_ttype: np.ndarray
    mi_voxel: np.ndarray
    mi_nodes: np.ndarray
    mi_pbase: np.ndarray
    mi_a: np.ndarray
    mi_bfac: np.ndarray
    mi_cv: np.ndarray
    # internal scaling diagnostics
    d0: np.ndarray  # (n_x, 3)
    scale: np.ndarray  # (n_x, 3); zero marks a dropped enriched dof
    n_dropped_dofs: int
    n_conflict_nodes: int
    # optional quadrature record (zero-padded weights)
    cut_qp: np.ndarray | None = None
    cut_qw: np.ndarray | None = None
    mi_qp: np.ndarray | None = None
    mi_qw: np.ndarray | None = None
    _slot_maps: dict = field(default_factory=dict, repr=False)

    @property
    def n_cut(self):
        return len(self.cut_ttype)

    @property
    def n_mi(self):
        return len(self.mi_ttype)

    def slot_map(self, kind):
        """(6, N1, N2, N3) element -> index into cut_*/mi_* arrays (-1 none)."""
        if kind not in self._slot_maps:
            shape = (6,) + tuple(self.grid.n)
            m = np.full(shape, -1, dtype=np.int64)
            tt, vox = (
                (self.cut_ttype, self.cut_voxel)
                if kind == "cut"
                else (self.mi_ttype, self.mi_voxel)
            )
            if len(tt):
                m[tt, vox[:, 0], vox[:, 1], vox[:, 2]] = np.arange(len(tt))
            self._slot_maps[kind] = m
        return self._slot_maps[kind]


def _node_ids(voxels, offsets, n):
    """Flat node ids (m, 4) of the 4 corners of tets at `voxels` (m, 3)."""
    idx = (voxels[:, None, :] + offsets[None, :, :]) % np.asarray(n)
    return np.ravel_multi_index(
        (idx[..., 0], idx[..., 1], idx[..., 2]), n
    )


def _resolve_side_phases(assembly, sign_matrix, cut_index):
    """Phase on the +/- side of the cutting interface of each element.

    sign_matrix (m, n_regions) holds the (node-constant) sign of every
    non-cutting region; column `cut_index[e]` is overridden by the side.
    """
    m = sign_matrix.shape[0]
    phases = np.empty((m, 2), dtype=np.int8)
    for col, side in enumerate((1, -1)):
        out = np.full(m, assembly.regions[-1].outside_phase, dtype=np.int8)
        undecided = np.ones(m, dtype=bool)
        for r, reg in enumerate(assembly.regions):
            s = np.where(cut_index == r, side, sign_matrix[:, r])
            take = undecided & (s > 0)
            out[take] = reg.inside_phase
            undecided &= ~take
        phases[:, col] = out
    return phases[:, 0], phases[:, 1]


def _group_geometry(levels, grads, template):
    """Vectorized quadrature data for all elements of one (type, pattern) group.

    Returns weights (m, S, 4), parent barycentric coordinates of the
    quadrature points (m, S, 4, 4), unscaled enriched gradients
    (m, S, 4, 4, 3) and the subtet sides (S,).
    """
    m = levels.shape[0]
    n_sub = len(template)
    sides = np.array([s for _, s in template])
    bary = np.zeros((m, n_sub, 4, 4))
    for si, (spec, _) in enumerate(template):
        for vi, vs in enumerate(spec):
            if isinstance(vs, tuple):
                i, j = vs
                t = levels[:, i] / (levels[:, i] - levels[:, j])
                bary[:, si, vi, i] = 1.0 - t
                bary[:, si, vi, j] = t
            else:
                bary[:, si, vi, vs] = 1.0
    ratio = np.abs(np.linalg.det(bary))
    ratio[ratio < DEGENERATE_REL_VOLUME] = 0.0
    ratio /= ratio.sum(axis=1, keepdims=True)
    lam_q = np.einsum("qv,msvb->msqb", SH_BARY, bary)
    coef = np.abs(levels)[:, None, :] - sides[None, :, None] * levels[:, None, :]
    rho = np.einsum("msqb,msb->msq", lam_q, coef)
    grho = np.einsum("bd,msb->msd", grads, coef)
    gx = (
        rho[..., None, None] * grads[None, None, None]
        + lam_q[..., None] * grho[:, :, None, None, :]
    )
    return ratio, lam_q, gx, sides


_CHUNK = 2048


def build_caches(
    assembly,
    grid: Grid,
    topo: ElementTopology,
    layout: DofLayout,
    nodal: np.ndarray,
    stiffness,
    mode: str = "xfem",
    store_quadrature: bool = True,
) -> ElementCaches:
    """Assemble all per-element matrices of the cell.

    `mode` "p1" disables enrichment entirely: every element is assembled as
    an uncut single-phase element with the phase sampled at its centroid.
    """
    stiffness = np.asarray(stiffness, dtype=float)
    n_phase = len(stiffness)
    nshape = tuple(grid.n)
    vol_tet = float(np.prod(grid.h)) / 6.0

    grads = np.empty((6, 4, 3))
    b_mats = np.empty((6, 6, 12))
    verts_t = np.empty((6, 4, 3))
    for t in range(6):
        verts_t[t] = tet_vertices(topo, grid, t)
        grads[t] = p1_grads(verts_t[t])
        b_mats[t] = b_matrix(grads[t])

    ref_a = np.empty((6, n_phase, 12, 12))
    ref_bfac = np.empty((6, n_phase, 12, 6))
    for t in range(6):
        for p in range(n_phase):
            ref_a[t, p] = vol_tet * b_mats[t].T @ stiffness[p] @ b_mats[t]
            ref_bfac[t, p] = vol_tet * b_mats[t].T @ stiffness[p]

    nodal = np.asarray(nodal)
    if nodal.ndim == 3:
        nodal = nodal[None]

    # base phase per element from the nodal level-set signs (corner (0,0,0)
    # is shared by all six tets): the discrete geometry is then consistently
    # the interpolated one, for cut and uncut elements alike
    ptype = np.empty((6,) + nshape, dtype=np.int8)
    if assembly.regions:
        signs0 = nodal[:, :, :, :]  # (n_regions, N1, N2, N3), corner 0 values
        base = np.full(nshape, assembly.regions[-1].outside_phase, dtype=np.int8)
        undecided = np.ones(nshape, dtype=bool)
        for r, reg in enumerate(assembly.regions):
            take = undecided & (signs0[r] > 0)
            base[take] = reg.inside_phase
            undecided &= ~take
        ptype[:] = base
    else:
        ptype[:] = assembly.background

    counts = np.zeros(n_phase, dtype=np.int64)
    for p in range(n_phase):
        counts[p] = int((ptype == p).sum())
    total_cv = vol_tet * np.einsum("p,pcd->cd", counts.astype(float), stiffness)

    empty = dict(
        cut_ttype=np.empty(0, dtype=np.int8),
        cut_voxel=np.empty((0, 3), dtype=np.int64),
        cut_nodes=np.empty((0, 4), dtype=np.int64),
        cut_enr=np.empty((0, 4), dtype=np.int64),
        cut_pbase=np.empty(0, dtype=np.int8),
        cut_region=np.empty(0, dtype=np.int8),
        cut_levels=np.empty((0, 4)),
        cut_scale=np.empty((0, 4, 3)),
        cut_a=np.empty((0, 24, 24)),
        cut_bfac=np.empty((0, 24, 6)),
        cut_cv=np.empty((0, 6, 6)),
        mi_ttype=np.empty(0, dtype=np.int8),
        mi_voxel=np.empty((0, 3), dtype=np.int64),
        mi_nodes=np.empty((0, 4), dtype=np.int64),
        mi_pbase=np.empty(0, dtype=np.int8),
        mi_a=np.empty((0, 12, 12)),
        mi_bfac=np.empty((0, 12, 6)),
        mi_cv=np.empty((0, 6, 6)),
    )

    if mode == "p1":
        return ElementCaches(
            grid=grid,
            topo=topo,
            mode=mode,
            stiffness=stiffness,
            grads=grads,
            b_mats=b_mats,
            tet_volume=vol_tet,
            ref_a=ref_a,
            ref_bfac=ref_bfac,
            ptype=ptype,
            total_cv=total_cv,
            d0=np.empty((0, 3)),
            scale=np.empty((0, 3)),
            n_dropped_dofs=0,
            n_conflict_nodes=0,
            **empty,
        )

    # ---- collect cut and fallback elements in canonical (t, voxel) order
    cut_t, cut_vox, cut_reg = [], [], []
    mi_t, mi_vox = [], []
    for t in range(6):
        region = layout.cut_region[t]
        vi, vj, vk = np.nonzero(region >= 0)
        cut_t.append(np.full(len(vi), t, dtype=np.int8))
        cut_vox.append(np.stack([vi, vj, vk], axis=1))
        cut_reg.append(region[vi, vj, vk])
        mi_i, mi_j, mi_k = np.nonzero(region == -2)
        mi_t.append(np.full(len(mi_i), t, dtype=np.int8))
        mi_vox.append(np.stack([mi_i, mi_j, mi_k], axis=1))
    cut_ttype = np.concatenate(cut_t)
    cut_voxel = np.concatenate(cut_vox).astype(np.int64)
    cut_region = np.concatenate(cut_reg).astype(np.int8)
    mi_ttype = np.concatenate(mi_t)
    mi_voxel = np.concatenate(mi_vox).astype(np.int64)
    n_cut = len(cut_ttype)
    n_mi = len(mi_ttype)

    caches = dict(empty)
    caches.update(
        cut_ttype=cut_ttype,
        cut_voxel=cut_voxel,
        cut_region=cut_region,
        mi_ttype=mi_ttype,
        mi_voxel=mi_voxel,
    )

    d0 = np.zeros((layout.n_x, 3))
    scale = np.zeros((layout.n_x, 3))
    n_conflict = 0
    n_dropped = 0

    if n_cut:
        cut_nodes = np.empty((n_cut, 4), dtype=np.int64)
        for t in range(6):
            sel = cut_ttype == t
            if sel.any():
                cut_nodes[sel] = _node_ids(cut_voxel[sel], topo.offsets[t], nshape)
        enr_flat = layout.enr_index.ravel()
        cut_enr = enr_flat[cut_nodes]
        cut_pbase = ptype[cut_ttype, cut_voxel[:, 0], cut_voxel[:, 1], cut_voxel[:, 2]]
        flat_nodal = nodal.reshape(nodal.shape[0], -1)
        cut_levels = flat_nodal[cut_region[:, None], cut_nodes]

        # bind each enriched node to the single interface cutting its support;
        # nodes claimed by two interfaces are dropped (scale stays zero)
        node_region = np.full(layout.n_x, -1, dtype=np.int16)
        conflict = np.zeros(layout.n_x, dtype=bool)
        for r in np.unique(cut_region):
            slots = np.unique(cut_enr[cut_region == r])
            taken = node_region[slots]
            conflict[slots[(taken >= 0) & (taken != r)]] = True
            node_region[slots] = r
        n_conflict = int(conflict.sum())

        sign_matrix = np.sign(flat_nodal[:, cut_nodes[:, 0]]).T  # (n_cut, n_regions)
        phase_plus, phase_minus = _resolve_side_phases(
            assembly, sign_matrix, cut_region
        )

        pattern = ((cut_levels > 0) << np.arange(4)).sum(axis=1)
        cut_a = np.zeros((n_cut, 24, 24))
        cut_bfac = np.zeros((n_cut, 24, 6))
        cut_cv = np.zeros((n_cut, 6, 6))
        qp_store = np.zeros((n_cut, 24, 3)) if store_quadrature else None
        qw_store = np.zeros((n_cut, 24)) if store_quadrature else None

        groups = []
        for t in range(6):
            for code in range(1, 15):
                sel = np.nonzero((cut_ttype == t) & (pattern == code))[0]
                if len(sel):
                    groups.append((t, code, sel))

        # pass 1: accumulate the internal scaling integrals
        for t, code, sel in groups:
            template = CUT_TEMPLATES[code]
            ratio, lam_q, gx, _ = _group_geometry(cut_levels[sel], grads[t], template)
            w = vol_tet * ratio[..., None] / 4.0 * np.ones(4)
            gsq = (gx**2).sum(axis=-1)
            contrib = 0.5 * np.einsum("msq,msqj->mj", w, gsq)[..., None] + 0.5 * (
                np.einsum("msq,msqja->mja", w, gx**2)
            )
            np.add.at(d0, cut_enr[sel], contrib)

        alive = d0 >= SCALE_DROP_THRESHOLD
        scale[alive] = 1.0 / np.sqrt(d0[alive])
        scale[conflict] = 0.0
        n_dropped = int((~alive).sum() + (alive & conflict[:, None]).sum())

        # pass 2: assemble the enriched element matrices
        for t, code, sel in groups:
            template = CUT_TEMPLATES[code]
            for lo in range(0, len(sel), _CHUNK):
                ch = sel[lo : lo + _CHUNK]
                m = len(ch)
                ratio, lam_q, gx, sides = _group_geometry(
                    cut_levels[ch], grads[t], template
                )
                n_sub = len(template)
                w = vol_tet * ratio[..., None] / 4.0 * np.ones(4)
                pidx = np.where(
                    sides[None, :] > 0, phase_plus[ch, None], phase_minus[ch, None]
                )
                cq = stiffness[pidx]  # (m, S, 6, 6)
                sc = scale[cut_enr[ch]]  # (m, 4, 3)
                cols = sym_grad_cols(gx) * sc[:, None, None, :, None, :]
                bx = cols.transpose(0, 1, 2, 4, 3, 5).reshape(m, n_sub, 4, 6, 12)
                b = np.empty((m, n_sub, 4, 6, 24))
                b[..., :12] = b_mats[t]
                b[..., 12:] = bx
                wc = w[..., None, None] * cq[:, :, None]
                cut_a[ch] = np.einsum(
                    "msqci,msqcd,msqdj->mij", b, wc, b, optimize=True
                )
                cut_bfac[ch] = np.einsum("msqci,msqcd->mid", b, wc, optimize=True)
                cut_cv[ch] = np.einsum("msq,mscd->mcd", w, cq, optimize=True)
                if store_quadrature:
                    pos = np.einsum("msqb,bv->msqv", lam_q, verts_t[t])
                    pos = pos + (cut_voxel[ch, None, None, :] * np.asarray(grid.h))
                    qp_store[ch, : 4 * n_sub] = pos.reshape(m, -1, 3)
                    qw_store[ch, : 4 * n_sub] = w.reshape(m, -1)

        caches.update(
            cut_nodes=cut_nodes,
            cut_enr=cut_enr,
            cut_pbase=cut_pbase,
            cut_levels=cut_levels,
            cut_scale=scale[cut_enr],
            cut_a=cut_a,
            cut_bfac=cut_bfac,
            cut_cv=cut_cv,
        )
        ref_cv = vol_tet * stiffness
        total_cv += cut_cv.sum(axis=0) - ref_cv[cut_pbase].sum(axis=0)
    else:
        qp_store = qw_store = None

    mi_qp = mi_qw = None
    if n_mi:
        mi_nodes = np.empty((n_mi, 4), dtype=np.int64)
        for t in range(6):
            sel = mi_ttype == t
            if sel.any():
                mi_nodes[sel] = _node_ids(mi_voxel[sel], topo.offsets[t], nshape)
        mi_pbase = ptype[mi_ttype, mi_voxel[:, 0], mi_voxel[:, 1], mi_voxel[:, 2]]
        mi_a = np.empty((n_mi, 12, 12))
        mi_bfac = np.empty((n_mi, 12, 6))
        mi_cv = np.empty((n_mi, 6, 6))
        for t in range(6):
            sel = np.nonzero(mi_ttype == t)[0]
            if not len(sel):
                continue
            qpos = SH_BARY @ verts_t[t] + (
                mi_voxel[sel, None, :] * np.asarray(grid.h)
            )
            ph = assembly.phase_at(qpos.reshape(-1, 3), grid.lengths).reshape(-1, 4)
            cbar = stiffness[ph].mean(axis=1)
            mi_a[sel] = vol_tet * np.einsum(
                "ci,mcd,dj->mij", b_mats[t], cbar, b_mats[t]
            )
            mi_bfac[sel] = vol_tet * np.einsum("ci,mcd->mid", b_mats[t], cbar)
            mi_cv[sel] = vol_tet * cbar
            if store_quadrature:
                if mi_qp is None:
                    mi_qp = np.zeros((n_mi, 4, 3))
                    mi_qw = np.zeros((n_mi, 4))
                mi_qp[sel] = qpos
                mi_qw[sel] = vol_tet / 4.0
        caches.update(
            mi_nodes=mi_nodes, mi_pbase=mi_pbase, mi_a=mi_a, mi_bfac=mi_bfac, mi_cv=mi_cv
        )
        ref_cv = vol_tet * stiffness
        total_cv += mi_cv.sum(axis=0) - ref_cv[mi_pbase].sum(axis=0)

    return ElementCaches(
        grid=grid,
        topo=topo,
        mode=mode,
        stiffness=stiffness,
        grads=grads,
        b_mats=b_mats,
        tet_volume=vol_tet,
        ref_a=ref_a,
        ref_bfac=ref_bfac,
        ptype=ptype,
        total_cv=total_cv,
        d0=d0,
        scale=scale,
        n_dropped_dofs=n_dropped,
        n_conflict_nodes=n_conflict,
        cut_qp=qp_store,
        cut_qw=qw_store,
        mi_qp=mi_qp,
        mi_qw=mi_qw,
        **caches,
    )


# ---------------------------------------------------------------------------
# point evaluation of the discrete strain field
# ---------------------------------------------------------------------------


def _tet_lookup(topo: ElementTopology) -> np.ndarray:
    """(3, 3) map from the two largest local coordinates to the tet index.

    Tet t covers the region xi_{p0} >= xi_{p1} >= xi_{p2} of the unit voxel
    for perm p = topo.perms[t], so the descending argsort of the local
    coordinates identifies the containing tet.
    """
    lut = np.full((3, 3), -1, dtype=np.int8)
    for t, p in enumerate(topo.perms):
        lut[p[0], p[1]] = t
    return lut


def evaluate_strain(
    caches: ElementCaches, u_grid, u_enr, eps_bar, points
) -> np.ndarray:
    """Mandel strain (n, 6) of the discrete solution at arbitrary points.

    Points are wrapped periodically, located in their voxel and tet, and
    evaluated with the element's shape functions; inside cut elements the
    enriched contribution uses the side selected by the sign of the
    interpolated level set (exact point-in-subtet evaluation).
    """
    grid, topo = caches.grid, caches.topo
    h = np.asarray(grid.h)
    nshape = tuple(grid.n)
    x = np.asarray(points, dtype=float) % np.asarray(grid.lengths)
    vox = np.minimum((x / h).astype(np.int64), np.asarray(nshape) - 1)
    xi = x / h - vox
    order = np.argsort(-xi, axis=1, kind="stable")
    ttype = _tet_lookup(topo)[order[:, 0], order[:, 1]]

    cut_slot = caches.slot_map("cut")[ttype, vox[:, 0], vox[:, 1], vox[:, 2]]
    u_flat = np.asarray(u_grid).reshape(-1, 3)
    eps = np.empty((len(x), 6))
    eps[:] = np.asarray(eps_bar, dtype=float)

    for t in range(6):
        verts = tet_vertices(topo, grid, t)
        inv_d = np.linalg.inv((verts[1:] - verts[0]).T)
        for enriched in (False, True):
            sel = np.nonzero((ttype == t) & ((cut_slot >= 0) == enriched))[0]
            if not len(sel):
                continue
            nodes = _node_ids(vox[sel], topo.offsets[t], nshape)
            ue = u_flat[nodes].reshape(-1, 12)
            eps[sel] += ue @ caches.b_mats[t].T
            if not enriched:
                continue
            s = cut_slot[sel]
            xloc = (xi[sel] * h) - verts[0]
            lam = np.empty((len(sel), 4))
            lam[:, 1:] = xloc @ inv_d.T
            lam[:, 0] = 1.0 - lam[:, 1:].sum(axis=1)
            levels = caches.cut_levels[s]
            side = np.where(np.einsum("mb,mb->m", lam, levels) >= 0.0, 1.0, -1.0)
            coef = np.abs(levels) - side[:, None] * levels
            rho = np.einsum("mb,mb->m", lam, coef)
            grho = coef @ caches.grads[t]
            gx = rho[:, None, None] * caches.grads[t][None] + (
                lam[..., None] * grho[:, None, :]
            )
            cols = sym_grad_cols(gx) * caches.cut_scale[s][:, :, None, :]
            bx = cols.transpose(0, 2, 1, 3).reshape(-1, 6, 12)
            ux = np.asarray(u_enr)[caches.cut_enr[s]].reshape(-1, 12)
            eps[sel] += np.einsum("mci,mi->mc", bx, ux)
    return eps
