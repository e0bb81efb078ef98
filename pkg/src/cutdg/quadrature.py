"""Quadrature on axis-aligned boxes cut by a level-set field.

Scheme: a box whose sign classification is mixed is either recognized as
having a linear level-set restriction (then clipped exactly into convex
polytopes) or subdivided into 2^d children.  At maximum depth the field is
linearized from its corner values and the box is clipped against that
plane, so the only remaining error is the geometric linearization error,
which shrinks with subdivision depth.  All weights are non-negative.

Volume rules are produced for both sign regions ("species"), and, on
request, a surface rule on the zero set with the node positions taken on
the (locally linearized) section polygon.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateLevelSetError

NEG = 0
POS = 1
SPECIES = (NEG, POS)

ZERO_BAND = 1e-12  # |phi| below this counts as "on the interface"
LINEAR_REL_TOL = 1e-12
SLIVER_REL_TOL = 1e-13


@dataclass
class QuadRule:
    """Nodes in physical coordinates with positive weights.

    Volume rules: weights sum to the represented measure.  Surface rules
    carry per-node unit normals.
    """

    nodes: np.ndarray
    weights: np.ndarray
    normals: Optional[np.ndarray] = None

    @property
    def measure(self) -> float:
        return float(self.weights.sum()) if len(self.weights) else 0.0


def empty_rule(dim: int, with_normals: bool = False) -> QuadRule:
    return QuadRule(
        nodes=np.zeros((0, dim)),
        weights=np.zeros(0),
        normals=np.zeros((0, dim)) if with_normals else None,
    )


@lru_cache(maxsize=None)
def gauss_1d(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights on [-1, 1]."""
    x, w = np.polynomial.legendre.leggauss(order)
    return x, w


@lru_cache(maxsize=None)
def _tensor_reference(dim: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss rule on [-1, 1]^dim."""
    x, w = gauss_1d(order)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.ones(len(nodes))
    for wg in wgrids:
        weights = weights * wg.ravel()
    nodes.flags.writeable = False
    weights.flags.writeable = False
    return nodes, weights


def tensor_rule(lo: np.ndarray, hi: np.ndarray, order: int) -> QuadRule:
    """Tensor Gauss rule on the box [lo, hi]."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    dim = len(lo)
    ref_nodes, ref_weights = _tensor_reference(dim, order)
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    nodes = mid + ref_nodes * half
    weights = ref_weights * np.prod(half)
    return QuadRule(nodes=nodes, weights=weights.copy())


@lru_cache(maxsize=None)
def duffy_triangle(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Rule on the unit triangle {x,y >= 0, x+y <= 1}; weights sum to 1/2."""
    x, w = gauss_1d(order)
    u = 0.5 * (x + 1)
    wu = 0.5 * w
    U, V = np.meshgrid(u, u, indexing="ij")
    WU, WV = np.meshgrid(wu, wu, indexing="ij")
    nodes = np.stack([U.ravel(), (V * (1 - U)).ravel()], axis=1)
    weights = (WU * WV * (1 - U)).ravel()
    return nodes, weights


@lru_cache(maxsize=None)
def duffy_tet(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Rule on the unit tetrahedron; weights sum to 1/6."""
    x, w = gauss_1d(order)
    u = 0.5 * (x + 1)
    wu = 0.5 * w
    U, V, W = np.meshgrid(u, u, u, indexing="ij")
    WU, WV, WW = np.meshgrid(wu, wu, wu, indexing="ij")
    X = U
    Y = V * (1 - U)
    Z = W * (1 - U) * (1 - V)
    jac = (1 - U) ** 2 * (1 - V)
    nodes = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    weights = (WU * WV * WW * jac).ravel()
    return nodes, weights


def map_triangle(p0, p1, p2, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Map the unit-triangle rule onto a (possibly embedded) triangle.

    Works for triangles in 2D (weights scale with |det|) and for 3D
    embedded triangles (weights scale with the parallelogram area).
    """
    ref_nodes, ref_weights = duffy_triangle(order)
    p0 = np.asarray(p0, float)
    e1 = np.asarray(p1, float) - p0
    e2 = np.asarray(p2, float) - p0
    nodes = p0 + np.outer(ref_nodes[:, 0], e1) + np.outer(ref_nodes[:, 1], e2)
    if len(p0) == 2:
        scale = abs(e1[0] * e2[1] - e1[1] * e2[0])
    else:
        scale = float(np.linalg.norm(np.cross(e1, e2)))
    return nodes, ref_weights * scale


def map_tet(p0, p1, p2, p3, order: int) -> tuple[np.ndarray, np.ndarray]:
    ref_nodes, ref_weights = duffy_tet(order)
    p0 = np.asarray(p0, float)
    B = np.stack(
        [np.asarray(p, float) - p0 for p in (p1, p2, p3)], axis=1
    )
    nodes = p0 + ref_nodes @ B.T
    det = abs(np.linalg.det(B))
    return nodes, ref_weights * det


def box_corners(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    dim = len(lo)
    corners = np.array(list(np.ndindex(*([2] * dim))), dtype=float)
    return lo + corners * (hi - lo)


def clip_polygon(
    verts: np.ndarray, c0: float, c: np.ndarray, keep_negative: bool
) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon against a half-space.

    Keeps the region where c0 + c.x <= 0 (or >= 0).  ``verts`` are ordered
    polygon vertices, in 2D or embedded in 3D.
    """
    sign = 1.0 if keep_negative else -1.0
    vals = sign * (c0 + verts @ c)
    out = []
    m = len(verts)
    for i in range(m):
        va, vb = vals[i], vals[(i + 1) % m]
        a, b = verts[i], verts[(i + 1) % m]
        if va <= 0:
            out.append(a)
        if (va < 0 < vb) or (vb < 0 < va):
            t = va / (va - vb)
            out.append(a + t * (b - a))
    if not out:
        return np.zeros((0, verts.shape[1]))
    return np.array(out)


def _dedupe_ring(verts: np.ndarray, scale: float) -> np.ndarray:
    """Drop consecutive (cyclically) near-duplicate vertices."""
    if len(verts) == 0:
        return verts
    keep = []
    for v in verts:
        if not keep or np.linalg.norm(v - keep[-1]) > 1e-12 * scale:
            keep.append(v)
    if len(keep) > 1 and np.linalg.norm(keep[0] - keep[-1]) <= 1e-12 * scale:
        keep.pop()
    return np.array(keep)


def _box_face_polygons(lo: np.ndarray, hi: np.ndarray) -> list[np.ndarray]:
    """The 6 faces of a 3D box as vertex rings."""
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    return [
        np.array([[x0, y0, z0], [x0, y1, z0], [x0, y1, z1], [x0, y0, z1]]),
        np.array([[x1, y0, z0], [x1, y1, z0], [x1, y1, z1], [x1, y0, z1]]),
        np.array([[x0, y0, z0], [x1, y0, z0], [x1, y0, z1], [x0, y0, z1]]),
        np.array([[x0, y1, z0], [x1, y1, z0], [x1, y1, z1], [x0, y1, z1]]),
        np.array([[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0]]),
        np.array([[x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]]),
    ]


def _section_polygon(
    lo: np.ndarray, hi: np.ndarray, c0: float, c: np.ndarray
) -> np.ndarray:
    """Ordered vertices of {c0 + c.x = 0} clipped to a 3D box."""
    corners = box_corners(lo, hi)
    vals = c0 + corners @ c
    points = []
    for i in range(8):
        for j in range(i + 1, 8):
            # box edges differ in exactly one coordinate bit
            diff = corners[i] != corners[j]
            if diff.sum() != 1:
                continue
            va, vb = vals[i], vals[j]
            if (va < 0 < vb) or (vb < 0 < va):
                t = va / (va - vb)
                points.append(corners[i] + t * (corners[j] - corners[i]))
    if len(points) < 3:
        return np.zeros((0, 3))
    pts = np.array(points)
    center = pts.mean(axis=0)
    n = c / np.linalg.norm(c)
    # in-plane orthonormal frame
    ref = np.eye(3)[np.argmin(np.abs(n))]
    u = np.cross(n, ref)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    ang = np.arctan2((pts - center) @ v, (pts - center) @ u)
    pts = pts[np.argsort(ang)]
    return _dedupe_ring(pts, float(np.linalg.norm(hi - lo)))


def _polygon_rule_2d(poly: np.ndarray, order: int, scale: float) -> list:
    """Fan-triangulated rule pieces for an ordered convex 2D polygon."""
    pieces = []
    if len(poly) < 3:
        return pieces
    for i in range(1, len(poly) - 1):
        nodes, weights = map_triangle(poly[0], poly[i], poly[i + 1], order)
        if weights.sum() > SLIVER_REL_TOL * scale:
            pieces.append((nodes, weights))
    return pieces


def _polyhedron_rule(
    face_polys: list[np.ndarray], order: int, vol_scale: float
) -> list:
    """Volume rule for a convex polyhedron given by its face rings."""
    all_verts = [p for poly in face_polys if len(poly) >= 3 for p in poly]
    if not all_verts:
        return []
    apex = np.mean(all_verts, axis=0)
    pieces = []
    for poly in face_polys:
        if len(poly) < 3:
            continue
        for i in range(1, len(poly) - 1):
            nodes, weights = map_tet(apex, poly[0], poly[i], poly[i + 1], order)
            if weights.sum() > SLIVER_REL_TOL * vol_scale:
                pieces.append((nodes, weights))
    return pieces


def _linear_fit(corners: np.ndarray, vals: np.ndarray):
    """Least-squares plane c0 + c.x through corner values."""
    A = np.column_stack([np.ones(len(corners)), corners])
    coef, *_ = np.linalg.lstsq(A, vals, rcond=None)
    return coef[0], coef[1:]


class _Accumulator:
    def __init__(self, dim: int, want_interface: bool):
        self.dim = dim
        self.want_interface = want_interface
        self.vol_nodes = {NEG: [], POS: []}
        self.vol_weights = {NEG: [], POS: []}
        self.iface_nodes: list = []
        self.iface_weights: list = []

    def add_volume(self, species: int, nodes: np.ndarray, weights: np.ndarray):
        if len(weights):
            self.vol_nodes[species].append(nodes)
            self.vol_weights[species].append(weights)

    def add_interface(self, nodes: np.ndarray, weights: np.ndarray):
        if self.want_interface and len(weights):
            self.iface_nodes.append(nodes)
            self.iface_weights.append(weights)

    def volume_rule(self, species: int) -> QuadRule:
        if not self.vol_weights[species]:
            return empty_rule(self.dim)
        return QuadRule(
            nodes=np.concatenate(self.vol_nodes[species]),
            weights=np.concatenate(self.vol_weights[species]),
        )

    def interface_rule(self) -> QuadRule:
        if not self.iface_weights:
            return empty_rule(self.dim)
        return QuadRule(
            nodes=np.concatenate(self.iface_nodes),
            weights=np.concatenate(self.iface_weights),
        )


def _classification_probes(lo, hi, order) -> np.ndarray:
    dim = len(lo)
    ref, _ = _tensor_reference(dim, order + 2)
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    return np.vstack([mid + ref * half, box_corners(lo, hi)])


def _classify(vals: np.ndarray) -> str:
    if np.all(np.abs(vals) < ZERO_BAND):
        return "zero"
    has_neg = bool(np.any(vals < 0))
    has_pos = bool(np.any(vals > 0))
    if has_neg and has_pos:
        return "cut"
    return "neg" if has_neg else "pos"


_LINEARITY_OFFSETS_EXTRA = {
    1: np.array([[0.37], [0.71]]),
    2: np.array([[0.5, 0.5], [0.37, 0.29], [0.71, 0.61]]),
    3: np.array([[0.5, 0.5, 0.5], [0.37, 0.29, 0.43], [0.71, 0.61, 0.83]]),
}


def _try_linear(phi, lo, hi, corners, corner_vals):
    """Fit a plane to corner values; accept if phi matches it at the
    corners and at interior probes (center plus asymmetric points)."""
    c0, c = _linear_fit(corners, corner_vals)
    w = hi - lo
    extra = lo + _LINEARITY_OFFSETS_EXTRA[len(lo)] * w
    extra_vals = phi(extra)
    fit_corners = c0 + corners @ c
    fit_extra = c0 + extra @ c
    scale = max(
        float(np.max(np.abs(corner_vals))),
        float(np.max(np.abs(extra_vals))),
        float(np.abs(c) @ np.abs(w)),
        1e-300,
    )
    err = max(
        float(np.max(np.abs(fit_corners - corner_vals))),
        float(np.max(np.abs(fit_extra - extra_vals))),
    )
    if err <= LINEAR_REL_TOL * scale:
        return c0, c
    return None


def _clip_box_rules(lo, hi, c0, c, order, acc: _Accumulator):
    """Exact rules for a box cut by the plane c0 + c.x = 0."""
    dim = len(lo)
    if float(np.linalg.norm(c)) < 1e-300:
        # constant fit: assign whole box by its sign
        species = NEG if c0 < 0 else POS
        acc.add_volume(species, *_unpack(tensor_rule(lo, hi, order)))
        return
    if dim == 1:
        root = -c0 / c[0]
        root = min(max(root, lo[0]), hi[0])
        lo_species = NEG if c[0] > 0 else POS
        for species, (a, b) in (
            (lo_species, (lo[0], root)),
            (1 - lo_species, (root, hi[0])),
        ):
            if b - a > SLIVER_REL_TOL * (hi[0] - lo[0]):
                acc.add_volume(
                    species, *_unpack(tensor_rule([a], [b], order))
                )
        return
    if dim == 2:
        box_poly = np.array(
            [[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]]
        )
        area_scale = float(np.prod(hi - lo))
        for species, keep_neg in ((NEG, True), (POS, False)):
            poly = _dedupe_ring(
                clip_polygon(box_poly, c0, c, keep_neg),
                float(np.linalg.norm(hi - lo)),
            )
            for nodes, weights in _polygon_rule_2d(poly, order, area_scale):
                acc.add_volume(species, nodes, weights)
        if acc.want_interface:
            # segment where the line crosses the box edges
            pts = []
            vals = c0 + box_poly @ c
            for i in range(4):
                va, vb = vals[i], vals[(i + 1) % 4]
                a, b = box_poly[i], box_poly[(i + 1) % 4]
                if (va < 0 < vb) or (vb < 0 < va):
                    t = va / (va - vb)
                    pts.append(a + t * (b - a))
            if len(pts) >= 2:
                pts = np.array(pts)
                direction = np.array([-c[1], c[0]])
                proj = pts @ direction
                p0, p1 = pts[np.argmin(proj)], pts[np.argmax(proj)]
                length = float(np.linalg.norm(p1 - p0))
                if length > SLIVER_REL_TOL * float(np.linalg.norm(hi - lo)):
                    x1, w1 = gauss_1d(order)
                    t = 0.5 * (x1 + 1)
                    nodes = p0 + np.outer(t, p1 - p0)
                    acc.add_interface(nodes, 0.5 * w1 * length)
        return
    # dim == 3
    vol_scale = float(np.prod(hi - lo))
    diam = float(np.linalg.norm(hi - lo))
    section = _section_polygon(lo, hi, c0, c)
    for species, keep_neg in ((NEG, True), (POS, False)):
        polys = [
            _dedupe_ring(clip_polygon(f, c0, c, keep_neg), diam)
            for f in _box_face_polygons(lo, hi)
        ]
        if len(section) >= 3:
            polys.append(section)
        for nodes, weights in _polyhedron_rule(polys, order, vol_scale):
            acc.add_volume(species, nodes, weights)
    if acc.want_interface and len(section) >= 3:
        area_scale = diam**2
        for nodes, weights in _polygon_rule_2d(section, order, area_scale):
            acc.add_interface(nodes, weights)


def _unpack(rule: QuadRule):
    return rule.nodes, rule.weights


def _build_recursive(phi, lo, hi, depth, order, leaf_order, acc: _Accumulator):
    probes = _classification_probes(lo, hi, order)
    vals = phi(probes)
    cls = _classify(vals)
    if cls == "zero":
        # level-set vanishes on the whole sub-box: no measure on either side
        return
    if cls == "neg":
        acc.add_volume(NEG, *_unpack(tensor_rule(lo, hi, order)))
        return
    if cls == "pos":
        acc.add_volume(POS, *_unpack(tensor_rule(lo, hi, order)))
        return
    corners = box_corners(lo, hi)
    corner_vals = phi(corners)
    linear = _try_linear(phi, lo, hi, corners, corner_vals)
    if linear is not None:
        _clip_box_rules(lo, hi, linear[0], linear[1], order, acc)
        return
    if depth > 0:
        mid = 0.5 * (lo + hi)
        for corner_bits in np.ndindex(*([2] * len(lo))):
            bits = np.array(corner_bits)
            child_lo = np.where(bits == 0, lo, mid)
            child_hi = np.where(bits == 0, mid, hi)
            _build_recursive(
                phi, child_lo, child_hi, depth - 1, order, leaf_order, acc
            )
        return
    # max depth: linearize from corner values, accept the geometric error
    c0, c = _linear_fit(corners, corner_vals)
    _clip_box_rules(lo, hi, c0, c, leaf_order, acc)


def cut_box_rules(
    phi: Callable[[np.ndarray], np.ndarray],
    lo,
    hi,
    depth: int,
    order: int,
    want_interface: bool = False,
    leaf_order: int = 2,
    on_degenerate: str = "raise",
) -> dict:
    """Build volume rules for both species of a cut box, and optionally a
    surface rule on the zero set.

    Returns a dict with keys NEG, POS (QuadRule) and "interface"
    (QuadRule without normals; callers attach normals from the level-set
    gradient).  ``on_degenerate`` controls the response to a level set
    that vanishes at every probe point of the whole box: "raise" or
    "empty".
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    probes = _classification_probes(lo, hi, order)
    vals = phi(probes)
    if _classify(vals) == "zero":
        if on_degenerate == "raise":
            raise DegenerateLevelSetError(
                f"level set vanishes on the whole box {lo} .. {hi}"
            )
        return {
            NEG: empty_rule(len(lo)),
            POS: empty_rule(len(lo)),
            "interface": empty_rule(len(lo)),
        }
    acc = _Accumulator(len(lo), want_interface)
    _build_recursive(phi, lo, hi, depth, order, leaf_order, acc)
    return {
        NEG: acc.volume_rule(NEG),
        POS: acc.volume_rule(POS),
        "interface": acc.interface_rule(),
    }
