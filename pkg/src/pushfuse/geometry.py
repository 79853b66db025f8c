"""Planar rigid bodies built from uniform-density polygons plus an optional point weight.

All lengths are metres, masses kilograms, densities kg/m^2 (thickness folded in).
Body frames put the origin at the bounding-box centre of the part union; the
"vertical" axis referred to throughout is the body +y axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, InvalidGeometry

MIN_POLYGON_AREA = 1e-12  # m^2, below this a polygon is degenerate


def _as_vertex_array(vertices) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
        raise InvalidGeometry(f"need an (n>=3, 2) vertex array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidGeometry("vertices must be finite")
    return v


def signed_area(vertices: np.ndarray) -> float:
    """Shoelace area; positive for counterclockwise winding."""
    x, y = vertices[:, 0], vertices[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return 0.5 * float(np.sum(x * yn - xn * y))


def _orient(p, q, r) -> float:
    return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])


def _on_segment(p, q, r) -> bool:
    # r collinear with pq: is it within the bounding box of pq?
    return (
        min(p[0], q[0]) <= r[0] <= max(p[0], q[0])
        and min(p[1], q[1]) <= r[1] <= max(p[1], q[1])
    )


def _segments_intersect(a, b, c, d) -> bool:
    o1, o2 = _orient(a, b, c), _orient(a, b, d)
    o3, o4 = _orient(c, d, a), _orient(c, d, b)
    if ((o1 > 0) != (o2 > 0)) and ((o3 > 0) != (o4 > 0)) and o1 != 0 and o2 != 0 and o3 != 0 and o4 != 0:
        return True
    if o1 == 0 and _on_segment(a, b, c):
        return True
    if o2 == 0 and _on_segment(a, b, d):
        return True
    if o3 == 0 and _on_segment(c, d, a):
        return True
    if o4 == 0 and _on_segment(c, d, b):
        return True
    return False


def _is_simple(vertices: np.ndarray) -> bool:
    """No repeated vertices, no zero-length edges, no crossing between non-adjacent edges."""
    n = vertices.shape[0]
    edges = [(vertices[i], vertices[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        if np.allclose(edges[i][0], edges[i][1]):
            return False
    for i in range(n):
        for j in range(i + 1, n):
            if j == i or j == (i + 1) % n or (j + 1) % n == i:
                continue  # adjacent edges share a vertex by construction
            if _segments_intersect(edges[i][0], edges[i][1], edges[j][0], edges[j][1]):
                return False
    return True


@dataclass(frozen=True)
class PolygonPart:
    """Simple counterclockwise polygon with uniform area density."""

    vertices: np.ndarray
    area_density: float

    def __post_init__(self):
        v = _as_vertex_array(self.vertices)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "area_density", float(self.area_density))
        if not np.isfinite(self.area_density) or self.area_density <= 0.0:
            raise InvalidGeometry("area_density must be a positive finite number")
        if signed_area(v) <= 0.0:
            raise InvalidGeometry("vertices must wind counterclockwise with positive area")
        if not _is_simple(v):
            raise InvalidGeometry("polygon must be simple (no self-intersection)")


@dataclass(frozen=True)
class PointWeight:
    """Point mass rigidly attached to the body (mass 0 means no weight)."""

    mass: float
    position: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mass", float(self.mass))
        p = np.asarray(self.position, dtype=np.float64)
        if p.shape != (2,) or not np.all(np.isfinite(p)):
            raise InvalidGeometry("weight position must be a finite 2-vector")
        object.__setattr__(self, "position", p)
        if not np.isfinite(self.mass) or self.mass < 0.0:
            raise InvalidGeometry("weight mass must be finite and >= 0")


@dataclass(frozen=True)
class RigidObjectSpec:
    """Union of polygon parts plus an optional point weight, all in one body frame."""

    name: str
    parts: tuple[PolygonPart, ...]
    weight: PointWeight = field(default_factory=lambda: PointWeight(0.0, (0.0, 0.0)))

    def __post_init__(self):
        parts = tuple(self.parts)
        if len(parts) == 0:
            raise InvalidGeometry("object needs at least one polygon part")
        object.__setattr__(self, "parts", parts)


@dataclass(frozen=True)
class MassProperties:
    """Total mass, centre of mass, and polar inertia about that centre."""

    mass: float
    com: np.ndarray
    inertia: float

    def __post_init__(self):
        object.__setattr__(self, "mass", float(self.mass))
        object.__setattr__(self, "inertia", float(self.inertia))
        c = np.asarray(self.com, dtype=np.float64)
        if c.shape != (2,):
            raise InvalidGeometry("com must be a 2-vector")
        object.__setattr__(self, "com", c)
        if self.mass <= 0.0 or not np.isfinite(self.mass):
            raise InvalidGeometry("mass must be positive and finite")
        if self.inertia <= 0.0 or not np.isfinite(self.inertia):
            raise InvalidGeometry("inertia must be positive and finite")


def polygon_mass_properties(part: PolygonPart) -> MassProperties:
    """Mass, centroid, and polar second moment of a uniform polygon.

    Shoelace forms: with cross_i = x_i*y_{i+1} - x_{i+1}*y_i,
      A  = sum(cross_i) / 2
      C  = sum((v_i + v_{i+1}) * cross_i) / (6 A)
      Jo = sum(cross_i * (x_i^2 + x_i x_{i+1} + x_{i+1}^2
                          + y_i^2 + y_i y_{i+1} + y_{i+1}^2)) / 12
    Jo is the polar moment about the body origin per unit density; the moment
    about the centroid follows from the parallel-axis theorem.
    """
    v = part.vertices
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * float(np.sum(cross))
    if area <= MIN_POLYGON_AREA:
        raise DegenerateGeometry(f"polygon area {area:g} m^2 is degenerate")
    cx = float(np.sum((x + xn) * cross)) / (6.0 * area)
    cy = float(np.sum((y + yn) * cross)) / (6.0 * area)
    j_origin = float(np.sum(cross * (x * x + x * xn + xn * xn + y * y + y * yn + yn * yn))) / 12.0
    mass = part.area_density * area
    inertia = part.area_density * (j_origin - area * (cx * cx + cy * cy))
    return MassProperties(mass=mass, com=np.array([cx, cy]), inertia=inertia)


def composite_mass_properties(spec: RigidObjectSpec) -> MassProperties:
    """Combine part and weight masses; inertia via parallel axis about the joint CoM."""
    props = [polygon_mass_properties(p) for p in spec.parts]
    masses = np.array([p.mass for p in props])
    coms = np.array([p.com for p in props])
    total = float(np.sum(masses)) + spec.weight.mass
    com = (masses[:, None] * coms).sum(axis=0) + spec.weight.mass * spec.weight.position
    com = com / total
    inertia = 0.0
    for p in props:
        d2 = float(np.sum((p.com - com) ** 2))
        inertia += p.inertia + p.mass * d2
    # a point mass has no moment about itself, only the m*d^2 transfer term
    inertia += spec.weight.mass * float(np.sum((spec.weight.position - com) ** 2))
    return MassProperties(mass=total, com=com, inertia=inertia)


def body_mass_properties(spec: RigidObjectSpec) -> MassProperties:
    """Mass properties of the polygon parts alone, ignoring the point weight."""
    bare = RigidObjectSpec(name=spec.name, parts=spec.parts)
    return composite_mass_properties(bare)


def _rect(cx: float, cy: float, w: float, h: float) -> np.ndarray:
    hw, hh = 0.5 * w, 0.5 * h
    return np.array(
        [[cx - hw, cy - hh], [cx + hw, cy - hh], [cx + hw, cy + hh], [cx - hw, cy + hh]]
    )


# T-block calibration. Stem 20 x 4 cm with a crossbar 5 cm tall on top; the bar
# length and the shared density are solved so the bare body's centroid sits at
# +3.4 cm on the vertical axis and the bare mass equals the value implied by a
# 143 g weight at +9.5 cm shifting the composite CoM to +6.1 cm.
TBLOCK_STEM_LEN = 0.20
TBLOCK_STEM_W = 0.04
TBLOCK_BAR_H = 0.05
TBLOCK_BARE_COM = 0.034
TBLOCK_WEIGHT_MASS = 0.143
TBLOCK_WEIGHT_TOP = 0.095
TBLOCK_COM_TOP = 0.061
# bar centroid sits at +stem_len/2, stem centroid at -bar_h/2 (origin = bbox centre)
_A_STEM = TBLOCK_STEM_LEN * TBLOCK_STEM_W
_A_BAR = _A_STEM * (TBLOCK_BARE_COM + 0.5 * TBLOCK_BAR_H) / (0.5 * TBLOCK_STEM_LEN - TBLOCK_BARE_COM)
TBLOCK_BAR_LEN = _A_BAR / TBLOCK_BAR_H
TBLOCK_BODY_MASS = TBLOCK_WEIGHT_MASS * (TBLOCK_WEIGHT_TOP - TBLOCK_COM_TOP) / (TBLOCK_COM_TOP - TBLOCK_BARE_COM)
TBLOCK_DENSITY = TBLOCK_BODY_MASS / (_A_STEM + _A_BAR)


def make_tblock(
    stem_len: float = TBLOCK_STEM_LEN,
    stem_w: float = TBLOCK_STEM_W,
    bar_len: float = TBLOCK_BAR_LEN,
    bar_h: float = TBLOCK_BAR_H,
    density: float = TBLOCK_DENSITY,
    weight: PointWeight | None = None,
    name: str = "tblock",
) -> RigidObjectSpec:
    """T-shaped block: vertical stem with a crossbar on top, origin at bbox centre."""
    if min(stem_len, stem_w, bar_len, bar_h, density) <= 0.0:
        raise InvalidGeometry("t-block dimensions and density must be positive")
    if bar_len < stem_w:
        raise InvalidGeometry("crossbar must be at least as wide as the stem")
    h = stem_len + bar_h
    stem = PolygonPart(_rect(0.0, -0.5 * bar_h, stem_w, stem_len), density)
    bar = PolygonPart(_rect(0.0, 0.5 * (h - bar_h), bar_len, bar_h), density)
    if weight is None:
        weight = PointWeight(0.0, (0.0, 0.0))
    return RigidObjectSpec(name=name, parts=(stem, bar), weight=weight)


def tblock_with_weight(weight_height: float = TBLOCK_WEIGHT_TOP) -> RigidObjectSpec:
    """Calibrated T-block carrying the 143 g weight at the given height on the axis."""
    return make_tblock(weight=PointWeight(TBLOCK_WEIGHT_MASS, (0.0, weight_height)))


# Hammer calibration: a slender handle with a denser head on top. The head
# density is solved so the composite CoM sits at +8.9 cm on the handle axis.
HAMMER_HANDLE_LEN = 0.24
HAMMER_HANDLE_W = 0.025
HAMMER_HEAD_LEN = 0.10
HAMMER_HEAD_H = 0.04
HAMMER_HANDLE_DENSITY = 30.0
HAMMER_COM = 0.089
_A_HANDLE = HAMMER_HANDLE_LEN * HAMMER_HANDLE_W
_A_HEAD = HAMMER_HEAD_LEN * HAMMER_HEAD_H
_Y_HEAD = 0.5 * HAMMER_HANDLE_LEN          # head centroid, origin at bbox centre
_Y_HANDLE = -0.5 * HAMMER_HEAD_H           # handle centroid
HAMMER_HEAD_DENSITY = (
    HAMMER_HANDLE_DENSITY * _A_HANDLE * (HAMMER_COM - _Y_HANDLE) / (_A_HEAD * (_Y_HEAD - HAMMER_COM))
)


def make_hammer(
    head_len: float = HAMMER_HEAD_LEN,
    head_h: float = HAMMER_HEAD_H,
    handle_len: float = HAMMER_HANDLE_LEN,
    handle_w: float = HAMMER_HANDLE_W,
    densities: tuple[float, float] = (HAMMER_HEAD_DENSITY, HAMMER_HANDLE_DENSITY),
    weightless: bool = True,
    name: str = "hammer",
) -> RigidObjectSpec:
    """Hammer: vertical handle with a horizontal head on top, origin at bbox centre."""
    head_density, handle_density = densities
    if min(head_len, head_h, handle_len, handle_w, head_density, handle_density) <= 0.0:
        raise InvalidGeometry("hammer dimensions and densities must be positive")
    if head_len < handle_w:
        raise InvalidGeometry("head must be at least as wide as the handle")
    h = handle_len + head_h
    handle = PolygonPart(_rect(0.0, -0.5 * head_h, handle_w, handle_len), handle_density)
    head = PolygonPart(_rect(0.0, 0.5 * (h - head_h), head_len, head_h), head_density)
    weight = PointWeight(0.0, (0.0, 0.0))
    if not weightless:
        weight = PointWeight(TBLOCK_WEIGHT_MASS, (0.0, 0.0))
    return RigidObjectSpec(name=name, parts=(handle, head), weight=weight)


def realize_com(spec: RigidObjectSpec, target_y: float) -> tuple[RigidObjectSpec, MassProperties]:
    """Return a spec/properties pair whose composite CoM sits at target_y on the axis.

    Weight-bearing objects get their point weight slid along the vertical axis,
    which adjusts the inertia consistently. Weightless objects keep their shape
    and inertia and have the CoM overridden directly (a pure parameter change).
    """
    props = composite_mass_properties(spec)
    w = spec.weight
    if w.mass > 0.0:
        body = body_mass_properties(spec)
        pos_y = (target_y * props.mass - body.mass * body.com[1]) / w.mass
        moved = RigidObjectSpec(
            name=spec.name, parts=spec.parts, weight=PointWeight(w.mass, (w.position[0], pos_y))
        )
        return moved, composite_mass_properties(moved)
    forced = MassProperties(mass=props.mass, com=np.array([props.com[0], target_y]), inertia=props.inertia)
    return spec, forced


def spec_to_dict(spec: RigidObjectSpec) -> dict:
    return {
        "name": spec.name,
        "parts": [
            {"vertices": p.vertices.tolist(), "density": p.area_density} for p in spec.parts
        ],
        "weight": {"mass": spec.weight.mass, "position": spec.weight.position.tolist()},
    }


def spec_from_dict(doc: dict) -> RigidObjectSpec:
    try:
        parts = tuple(
            PolygonPart(np.asarray(p["vertices"], dtype=np.float64), float(p["density"]))
            for p in doc["parts"]
        )
        weight = PointWeight(float(doc["weight"]["mass"]), np.asarray(doc["weight"]["position"]))
        return RigidObjectSpec(name=str(doc["name"]), parts=parts, weight=weight)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidGeometry(f"malformed object spec document: {exc}") from exc


def save_spec(path, spec: RigidObjectSpec) -> None:
    with open(path, "w") as f:
        json.dump(spec_to_dict(spec), f, indent=2, sort_keys=True)
        f.write("\n")


def load_spec(path) -> RigidObjectSpec:
    with open(path) as f:
        return spec_from_dict(json.load(f))
