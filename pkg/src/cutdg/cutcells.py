"""Cut-cell meshes: species decomposition of background cells with volume,
interface, and face quadrature rules.

Species NEG occupies {phi < 0}, species POS occupies {phi > 0}.  A cell is
cut when both species have positive volume in it.  Faces whose adjacent
cells are pure carry plain tensor rules; faces touching cut cells carry
subdivision rules restricted to each species' portion.  A face on which
the level set vanishes identically (interface coinciding with the face)
carries zero-measure portions for both species.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DegenerateLevelSetError,
    MissingInterfaceError,
    MissingSpeciesError,
)
from .levelset import LevelSet
from .mesh import BackgroundMesh, Face, enumerate_faces
from .quadrature import (
    NEG,
    POS,
    SPECIES,
    QuadRule,
    cut_box_rules,
    empty_rule,
    tensor_rule,
)

PURE_NEG = 0
PURE_POS = 1
CUT = 2


@dataclass
class CutCellMesh:
    mesh: BackgroundMesh
    level_set: LevelSet
    quad_depth: int
    gauss_order: int
    species_volume: np.ndarray  # (num_cells, 2)
    faces: list[Face]
    face_species_measure: np.ndarray  # (num_faces, 2)
    cut_volume_rules: dict  # (cell, species) -> QuadRule
    interface_rules: dict  # cell -> QuadRule with normals
    cut_face_rules: dict  # (face_id, species) -> QuadRule

    @property
    def num_cells(self) -> int:
        return self.mesh.num_cells

    def present(self, j: int, species: int) -> bool:
        return self.species_volume[j, species] > 0.0

    def species_present(self, j: int) -> tuple[int, ...]:
        return tuple(s for s in SPECIES if self.present(j, s))

    def is_cut(self, j: int) -> bool:
        return self.present(j, NEG) and self.present(j, POS)

    def fraction(self, j: int, species: int) -> float:
        return float(self.species_volume[j, species] / self.mesh.cell_volume)

    def cut_cells(self) -> list[int]:
        return [j for j in range(self.num_cells) if self.is_cut(j)]

    def interface_measure(self, j: int) -> float:
        rule = self.interface_rules.get(j)
        return rule.measure if rule is not None else 0.0


def _face_box(face: Face):
    """The face as a (D-1)-box plus its embedding data."""
    axis = face.axis
    lo = [c for a, c in enumerate(face.lo) if a != axis]
    hi = [c for a, c in enumerate(face.hi) if a != axis]
    return np.array(lo), np.array(hi), axis, face.coordinate


def embed_face_points(points: np.ndarray, axis: int, coordinate: float):
    """Insert the fixed coordinate to lift (D-1)-dim face points into D."""
    n, dm1 = points.shape
    out = np.empty((n, dm1 + 1))
    out[:, :axis] = points[:, :axis]
    out[:, axis] = coordinate
    out[:, axis + 1 :] = points[:, axis:]
    return out


def classify_and_build(
    mesh: BackgroundMesh,
    level_set: LevelSet,
    quad_depth: int = 2,
    gauss_order: int = 4,
) -> CutCellMesh:
    """Classify every cell against the level set and build all cut-cell
    quadrature rules (volumes, interface patches, face portions)."""
    if gauss_order < 1 or quad_depth < 0:
        raise ValueError("gauss_order >= 1 and quad_depth >= 0 required")
    J = mesh.num_cells
    species_volume = np.zeros((J, 2))
    cut_volume_rules: dict = {}
    interface_rules: dict = {}

    for j in range(J):
        lo, hi = mesh.cell_bounds(j)
        try:
            rules = cut_box_rules(
                level_set,
                lo,
                hi,
                depth=quad_depth,
                order=gauss_order,
                want_interface=True,
                on_degenerate="raise",
            )
        except DegenerateLevelSetError as exc:
            raise DegenerateLevelSetError(
                f"cell {j}: {exc}"
            ) from exc
        for s in SPECIES:
            species_volume[j, s] = rules[s].measure
        both = all(species_volume[j, s] > 0 for s in SPECIES)
        for s in SPECIES:
            # pure cells (and cut cells whose rule degenerated to the whole
            # box) use plain tensor rules on demand instead
            if species_volume[j, s] > 0 and _is_nontrivial(rules[s], lo, hi):
                cut_volume_rules[(j, s)] = rules[s]
        iface = rules["interface"]
        if both and len(iface.weights) > 0:
            normals = level_set.unit_normal(iface.nodes)
            interface_rules[j] = QuadRule(
                nodes=iface.nodes, weights=iface.weights, normals=normals
            )

    faces = enumerate_faces(mesh)
    F = len(faces)
    face_species_measure = np.zeros((F, 2))
    cut_face_rules: dict = {}
    for fid, face in enumerate(faces):
        cells = face.cells()
        classes = []
        for c in cells:
            if species_volume[c, NEG] > 0 and species_volume[c, POS] > 0:
                classes.append(CUT)
            elif species_volume[c, NEG] > 0:
                classes.append(PURE_NEG)
            else:
                classes.append(PURE_POS)
        if all(cl == PURE_NEG for cl in classes):
            face_species_measure[fid, NEG] = _face_area(face)
            continue
        if all(cl == PURE_POS for cl in classes):
            face_species_measure[fid, POS] = _face_area(face)
            continue
        # at least one cut (or mixed pure) neighbor: cut the face
        flo, fhi, axis, coord = _face_box(face)

        def phi_face(pts):
            return level_set(embed_face_points(pts, axis, coord))

        rules = cut_box_rules(
            phi_face,
            flo,
            fhi,
            depth=quad_depth,
            order=gauss_order,
            want_interface=False,
            on_degenerate="empty",
        )
        for s in SPECIES:
            rule = rules[s]
            face_species_measure[fid, s] = rule.measure
            if len(rule.weights) > 0:
                cut_face_rules[(fid, s)] = QuadRule(
                    nodes=embed_face_points(rule.nodes, axis, coord),
                    weights=rule.weights,
                )

    return CutCellMesh(
        mesh=mesh,
        level_set=level_set,
        quad_depth=quad_depth,
        gauss_order=gauss_order,
        species_volume=species_volume,
        faces=faces,
        face_species_measure=face_species_measure,
        cut_volume_rules=cut_volume_rules,
        interface_rules=interface_rules,
        cut_face_rules=cut_face_rules,
    )


def _is_nontrivial(rule: QuadRule, lo, hi) -> bool:
    """True when the rule covers a proper sub-region of the box."""
    box_volume = float(np.prod(hi - lo))
    return abs(rule.measure - box_volume) > 1e-10 * box_volume


def _face_area(face: Face) -> float:
    area = 1.0
    for a, (lo, hi) in enumerate(zip(face.lo, face.hi)):
        if a != face.axis:
            area *= hi - lo
    return area


def quad_volume(cutmesh: CutCellMesh, j: int, species: int) -> QuadRule:
    """Volume rule for one species of one cell; tensor rule on pure cells."""
    if not cutmesh.present(j, species):
        raise MissingSpeciesError(f"species {species} absent in cell {j}")
    stored = cutmesh.cut_volume_rules.get((j, species))
    if stored is not None:
        return stored
    lo, hi = cutmesh.mesh.cell_bounds(j)
    return tensor_rule(lo, hi, cutmesh.gauss_order)


def quad_interface(cutmesh: CutCellMesh, j: int) -> QuadRule:
    """Interface rule (with unit normals pointing NEG -> POS) of a cut cell."""
    rule = cutmesh.interface_rules.get(j)
    if rule is None:
        raise MissingInterfaceError(f"cell {j} is not cut")
    return rule


def quad_cut_face(cutmesh: CutCellMesh, face_id: int, species: int) -> QuadRule:
    """Rule over the portion of a mesh face inside one species."""
    face = cutmesh.faces[face_id]
    if not any(cutmesh.present(c, species) for c in face.cells()):
        raise MissingSpeciesError(
            f"species {species} absent on both sides of face {face_id}"
        )
    stored = cutmesh.cut_face_rules.get((face_id, species))
    if stored is not None:
        return stored
    if cutmesh.face_species_measure[face_id, species] == 0.0:
        return empty_rule(cutmesh.mesh.dim)
    # full face in this species
    flo, fhi, axis, coord = _face_box(face)
    rule = tensor_rule(flo, fhi, cutmesh.gauss_order)
    return QuadRule(
        nodes=embed_face_points(rule.nodes, axis, coord), weights=rule.weights
    )
