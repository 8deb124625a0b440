"""Contour extraction and evolution.

Binary masks are traced into closed contours, resampled to a fixed vertex
count, and evolved by a damped second-order recursion whose stiffness and
damping are sampled from spatial parameter fields at the current vertex
positions. Converged contours are emitted as GeoJSON polygons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import ops
from .tensor import Tensor, as_tensor, concat, roll

__all__ = [
    "Contour",
    "VibrationField",
    "EvolutionError",
    "init_contour",
    "sample_field",
    "evolve_step",
    "evolve",
    "evolve_contours",
    "PolygonSet",
    "emit_polygons",
    "attraction_field_from_mask",
    "polygon_area",
]


class EvolutionError(RuntimeError):
    """A contour left the finite domain during evolution."""


@dataclass
class Contour:
    """Closed vertex chain with one step of history for the dynamics."""

    current: Tensor   # (x, 2) rows, cols in continuous pixel coordinates
    previous: Tensor  # (x, 2)

    def __post_init__(self):
        self.current = as_tensor(self.current)
        self.previous = as_tensor(self.previous)
        if self.current.shape != self.previous.shape:
            raise ValueError(
                f"contour history shapes differ: {self.current.shape} "
                f"vs {self.previous.shape}"
            )
        if self.current.shape[0] < 4:
            raise ValueError(f"a contour needs at least 4 vertices, got {self.current.shape[0]}")
        if not np.isfinite(self.current.data).all() or not np.isfinite(self.previous.data).all():
            raise ValueError("contour vertices must be finite")

    @property
    def n_vertices(self) -> int:
        return self.current.shape[0]


@dataclass
class VibrationField:
    """Per-pixel stiffness and damping maps driving the recursion."""

    beta: Tensor   # (H, W), in [0, beta_max]
    mu: Tensor     # (H, W), nonnegative
    delta_t: float = 0.1

    def __post_init__(self):
        self.beta = as_tensor(self.beta)
        self.mu = as_tensor(self.mu)
        if self.delta_t <= 0:
            raise ValueError(f"time step must be positive, got {self.delta_t}")
        if float(self.beta.data.max(initial=0.0)) * self.delta_t ** 2 > 1.0 + 1e-9:
            raise ValueError(
                "stiffness violates the explicit-scheme stability bound "
                f"(max beta {self.beta.data.max():.3f}, dt {self.delta_t})"
            )
        if float(self.beta.data.min(initial=0.0)) < 0 or float(self.mu.data.min(initial=0.0)) < 0:
            raise ValueError("field values must be nonnegative")


def polygon_area(vertices: np.ndarray) -> float:
    """Signed shoelace area in the (x=col, y=row) plane; positive = CCW."""
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 1], v[:, 0]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


_MOORE = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]


def trace_boundary(component: np.ndarray) -> np.ndarray:
    """Ordered boundary pixels of a connected component (Moore tracing)."""
    padded = np.pad(component.astype(bool), 1)
    coords = np.argwhere(padded)
    start = tuple(coords[0])
    boundary = [start]
    # scan order guarantees the western neighbor of the start is background
    backtrack_dir = 0  # index into _MOORE pointing at the backtrack neighbor
    current = start
    first_move = None
    while True:
        found = None
        for step in range(1, 9):
            d = (backtrack_dir + step) % 8
            nxt = (current[0] + _MOORE[d][0], current[1] + _MOORE[d][1])
            if padded[nxt]:
                found = (nxt, d)
                break
        if found is None:
            break  # isolated pixel
        nxt, d = found
        move = (current, d)
        if first_move is None:
            first_move = move
        elif move == first_move:
            break
        if nxt != boundary[-1]:
            boundary.append(nxt)
        current = nxt
        # new backtrack points at the previous pixel as seen from the new one
        backtrack_dir = (d + 4) % 8
        if len(boundary) > 4 * padded.size:
            raise RuntimeError("boundary tracing failed to terminate")
    pts = np.array(boundary, dtype=float) - 1.0  # undo padding
    if len(pts) > 1 and np.array_equal(pts[0], pts[-1]):
        pts = pts[:-1]
    return pts


def resample_closed(points: np.ndarray, n: int) -> np.ndarray:
    """Resample a closed polyline to n vertices equally spaced by arc length."""
    pts = np.asarray(points, dtype=float)
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(pts, axis=0), axis=1) > 0
    pts = pts[keep]
    if len(pts) > 1 and np.array_equal(pts[0], pts[-1]):
        pts = pts[:-1]
    if len(pts) == 1:
        return np.tile(pts[0], (n, 1))
    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    targets = np.arange(n) * total / n
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(seg) - 1)
    frac = (targets - cum[idx]) / seg[idx]
    return closed[idx] + frac[:, None] * (closed[idx + 1] - closed[idx])


def init_contour(mask: np.ndarray, n_vertices: int = 64,
                 min_area: int = 16) -> list[Contour]:
    """One contour per connected foreground component of sufficient area.

    Boundaries are traced with 8-connectivity, resampled to exactly
    ``n_vertices`` arc-length-uniform vertices, and oriented
    counter-clockwise. Components below ``min_area`` are skipped.
    Returns an empty list for an empty mask.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    binary = mask > 0
    if not binary.any():
        return []
    labeled, count = ndimage.label(binary, structure=np.ones((3, 3), dtype=int))
    contours = []
    for idx in range(1, count + 1):
        component = labeled == idx
        if int(component.sum()) < min_area:
            continue
        boundary = trace_boundary(component)
        verts = resample_closed(boundary, n_vertices)
        if polygon_area(verts) < 0:
            verts = verts[::-1].copy()
        start = Tensor(verts)
        contours.append(Contour(current=start, previous=Tensor(verts.copy())))
    return contours


def sample_field(fld: VibrationField, points: Tensor) -> tuple[Tensor, Tensor]:
    """Bilinear stiffness and damping samples at (N, 2) vertex positions."""
    points = as_tensor(points)
    beta_o = ops.bilinear_sample(fld.beta, points)
    mu_o = ops.bilinear_sample(fld.mu, points)
    return beta_o, mu_o


def _second_difference(weighted: Tensor) -> Tensor:
    """Circular second difference along the vertex axis (supports (x, 2) or (n, x, 2))."""
    axis = weighted.ndim - 2
    return roll(weighted, -1, axis) + roll(weighted, 1, axis) - 2.0 * weighted


def evolve_step(contour: Contour, beta_o: Tensor, mu_o: Tensor,
                delta_t: float) -> Contour:
    """One explicit update of the damped second-order recursion.

    new = 2 k - k_prev + (d2 of beta*k) dt^2 - mu * (k - k_prev) dt, applied
    per coordinate with circular vertex indexing.
    """
    k = contour.current
    k_prev = contour.previous
    beta_col = beta_o.reshape(-1, 1)
    mu_col = mu_o.reshape(-1, 1)
    restoring = _second_difference(beta_col * k)
    velocity = k - k_prev
    new = 2.0 * k - k_prev + restoring * (delta_t ** 2) - mu_col * velocity * delta_t
    if not np.isfinite(new.data).all():
        raise EvolutionError(
            f"contour diverged: {np.isfinite(new.data).sum()} of {new.data.size} "
            "coordinates finite after update"
        )
    return Contour(current=new, previous=k)


def evolve(contour: Contour, fld: VibrationField, steps: int = 100,
           stop_displacement: float = 1e-3, stop_patience: int = 5) -> Contour:
    """Iterate sampling and stepping; stops early once the contour settles.

    Early stop fires after ``stop_patience`` consecutive steps whose largest
    vertex displacement is below ``stop_displacement`` pixels.
    """
    if steps < 0:
        raise ValueError(f"step count must be nonnegative, got {steps}")
    quiet = 0
    for _ in range(steps):
        beta_o, mu_o = sample_field(fld, contour.current)
        nxt = evolve_step(contour, beta_o, mu_o, fld.delta_t)
        disp = float(np.abs(nxt.current.data - contour.current.data).max())
        contour = nxt
        quiet = quiet + 1 if disp < stop_displacement else 0
        if quiet >= stop_patience:
            break
    return contour


def evolve_contours(contours: list[Contour], fld: VibrationField,
                    steps: int = 100, stop_displacement: float = 1e-3,
                    stop_patience: int = 5) -> list[Contour]:
    """Evolve several same-length contours together (stacked update)."""
    if not contours:
        return []
    n = len(contours)
    x = contours[0].n_vertices
    cur = concat([c.current.reshape(1, x, 2) for c in contours], axis=0)
    prev = concat([c.previous.reshape(1, x, 2) for c in contours], axis=0)
    quiet = 0
    for _ in range(steps):
        flat = cur.reshape(n * x, 2)
        beta_o = ops.bilinear_sample(fld.beta, flat).reshape(n, x, 1)
        mu_o = ops.bilinear_sample(fld.mu, flat).reshape(n, x, 1)
        restoring = _second_difference(beta_o * cur)
        velocity = cur - prev
        new = (2.0 * cur - prev + restoring * (fld.delta_t ** 2)
               - mu_o * velocity * fld.delta_t)
        if not np.isfinite(new.data).all():
            raise EvolutionError("stacked contour evolution diverged")
        disp = float(np.abs(new.data - cur.data).max())
        prev, cur = cur, new
        quiet = quiet + 1 if disp < stop_displacement else 0
        if quiet >= stop_patience:
            break
    return [Contour(current=cur[i], previous=prev[i]) for i in range(n)]


# -- polygon output ------------------------------------------------------------


@dataclass
class PolygonSet:
    """Vertex rings in pixel coordinates plus per-ring validity flags."""

    rings: list[np.ndarray] = field(default_factory=list)   # (n, 2) row, col
    valid: list[bool] = field(default_factory=list)

    def to_geojson(self, transform: tuple | None = None) -> dict:
        """RFC-7946-style FeatureCollection; exterior rings counter-clockwise.

        ``transform`` is an optional affine (a, b, c, d, e, f) mapping pixel
        (col, row) to (x, y) as x = a*col + b*row + c, y = d*col + e*row + f.
        """
        features = []
        for ring, ok in zip(self.rings, self.valid):
            coords = np.stack([ring[:, 1], ring[:, 0]], axis=1)  # (x, y)
            if transform is not None:
                a, b, c, d, e, f = transform
                coords = np.stack(
                    [a * coords[:, 0] + b * coords[:, 1] + c,
                     d * coords[:, 0] + e * coords[:, 1] + f], axis=1)
            area = 0.5 * float(
                np.dot(coords[:, 0], np.roll(coords[:, 1], -1))
                - np.dot(coords[:, 1], np.roll(coords[:, 0], -1))
            )
            if area < 0:
                coords = coords[::-1]
            closed = np.vstack([coords, coords[:1]])
            features.append({
                "type": "Feature",
                "properties": {"valid": bool(ok)},
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[[float(x), float(y)] for x, y in closed]],
                },
            })
        return {"type": "FeatureCollection", "features": features}


def _cross2(u, v):
    """z-component of the cross product for 2-D vectors (broadcasts)."""
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def _perpendicular_distance(points, a, b):
    ab = b - a
    norm = np.linalg.norm(ab)
    if norm == 0:
        return np.linalg.norm(points - a, axis=1)
    return np.abs(_cross2(np.broadcast_to(ab, points.shape), a - points)) / norm


def _douglas_peucker(points: np.ndarray, tol: float) -> np.ndarray:
    if len(points) <= 2:
        return points
    d = _perpendicular_distance(points[1:-1], points[0], points[-1])
    idx = int(np.argmax(d))
    if d[idx] <= tol:
        return np.vstack([points[0], points[-1]])
    split = idx + 1
    left = _douglas_peucker(points[: split + 1], tol)
    right = _douglas_peucker(points[split:], tol)
    return np.vstack([left[:-1], right])


def simplify_ring(ring: np.ndarray, tol: float) -> np.ndarray:
    """Douglas-Peucker on a closed ring, anchored at the two farthest vertices."""
    if tol <= 0 or len(ring) <= 4:
        return ring
    anchor = int(np.argmax(np.linalg.norm(ring - ring[0], axis=1)))
    first = np.vstack([ring[: anchor + 1]])
    second = np.vstack([ring[anchor:], ring[:1]])
    out = np.vstack([
        _douglas_peucker(first, tol)[:-1],
        _douglas_peucker(second, tol)[:-1],
    ])
    return out


def _segments_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return np.sign(_cross2(b - a, c - a))

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    return o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4)


def ring_self_intersects(ring: np.ndarray) -> bool:
    n = len(ring)
    if n < 4:
        return False
    segs = [(ring[i], ring[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue  # adjacent around the wrap
            if _segments_intersect(*segs[i], *segs[j]):
                return True
    return False


def emit_polygons(contours: list[Contour], simplify_tol: float = 0.0) -> PolygonSet:
    """Serialize contours as polygon rings.

    Optional simplification at ``simplify_tol`` pixels (0 disables). Rings
    that self-intersect after simplification are kept but flagged invalid.
    """
    out = PolygonSet()
    for c in contours:
        ring = np.asarray(c.current.data, dtype=float)
        ring = simplify_ring(ring, simplify_tol)
        out.rings.append(ring)
        out.valid.append(not ring_self_intersects(ring))
    return out


def attraction_field_from_mask(mask: np.ndarray, delta_t: float = 0.5,
                               reach: float = 8.0) -> VibrationField:
    """Hand-designed field pulling contours onto a mask boundary.

    Stiffness grows with the distance transform outside the target (so an
    enclosing contour contracts) and vanishes inside it; heavy damping
    makes the approach quasi-static, parking vertices where the stiffness
    dies out at the boundary.
    """
    binary = np.asarray(mask) > 0
    outside = ndimage.distance_transform_edt(~binary)
    beta_max = min(1.0, 1.0 / delta_t ** 2)
    beta = beta_max * np.clip(outside / reach, 0.0, 1.0)
    mu = np.full(binary.shape, 1.0 / delta_t)  # velocity fully damped each step
    return VibrationField(beta=Tensor(beta), mu=Tensor(mu), delta_t=delta_t)


def contour_cases():
    """Gradient-check builders for this module."""

    def c_sample_field(seed):
        rng = np.random.default_rng(seed)
        beta = Tensor(rng.random((8, 8)), requires_grad=True)
        mu = Tensor(rng.random((8, 8)), requires_grad=True)
        pts_raw = rng.uniform(0.6, 6.4, size=(6, 2))
        pts_raw += np.where(np.abs(pts_raw - np.round(pts_raw)) < 0.05, 0.1, 0.0)
        pts = Tensor(pts_raw, requires_grad=True)
        w1 = Tensor(rng.standard_normal(6))
        w2 = Tensor(rng.standard_normal(6))

        def fn(beta, mu, pts):
            fld = VibrationField(beta=beta, mu=mu, delta_t=0.5)
            b, m = sample_field(fld, pts)
            return (b * w1).sum() + (m * w2).sum()

        return fn, [beta, mu, pts]

    def c_evolution_through_field(seed):
        rng = np.random.default_rng(seed)
        beta = Tensor(rng.random((10, 10)) * 0.8, requires_grad=True)
        mu = Tensor(rng.random((10, 10)), requires_grad=True)
        angle = np.linspace(0, 2 * np.pi, 6, endpoint=False)
        ring = np.stack([4.5 + 2.3 * np.sin(angle), 4.5 + 2.3 * np.cos(angle)], axis=1)
        w = Tensor(rng.standard_normal((6, 2)))

        def fn(beta, mu):
            fld = VibrationField(beta=beta, mu=mu, delta_t=0.5)
            c = Contour(current=Tensor(ring), previous=Tensor(ring.copy()))
            for _ in range(3):
                b, m = sample_field(fld, c.current)
                c = evolve_step(c, b, m, fld.delta_t)
            return (c.current * w).sum()

        return fn, [beta, mu]

    return {
        "contours.sample_field": c_sample_field,
        "contours.evolution_field_gradient": c_evolution_through_field,
    }
