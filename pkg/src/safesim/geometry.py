"""Planar geometry primitives shared by maps, routes, costs, and collision checks.

All functions are pure and operate on plain floats / numpy arrays so they can be
used both on single states and on batched trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(theta):
    """Wrap angle(s) to (-pi, pi]."""
    w = np.mod(np.asarray(theta, dtype=float) + np.pi, TWO_PI) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    if np.ndim(theta) == 0:
        return float(w)
    return w


@dataclass(frozen=True)
class PolylineProjection:
    arc_length: float
    normal_offset: float
    tangent_heading: float


class Polyline:
    """An ordered sequence of 2D points with precomputed segment geometry.

    Consecutive points must be distinct. Arc length is measured along the
    chain from the first point.
    """

    __slots__ = ("points", "seg_vec", "seg_len", "cum_len", "tangents")

    def __init__(self, points) -> None:
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError("polyline needs at least 2 points of shape (n, 2)")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0.0):
            raise ValueError("polyline has repeated consecutive points")
        self.points = pts
        self.seg_vec = seg
        self.seg_len = seg_len
        self.cum_len = np.concatenate(([0.0], np.cumsum(seg_len)))
        self.tangents = np.arctan2(seg[:, 1], seg[:, 0])

    @property
    def length(self) -> float:
        return float(self.cum_len[-1])

    def point_at(self, arc):
        """Interpolate point(s) at the given arc length(s), clamped to the ends."""
        s = np.clip(np.asarray(arc, dtype=float), 0.0, self.length)
        idx = np.clip(np.searchsorted(self.cum_len, s, side="right") - 1, 0, len(self.seg_len) - 1)
        frac = (s - self.cum_len[idx]) / self.seg_len[idx]
        out = self.points[idx] + self.seg_vec[idx] * frac[..., None]
        return out

    def tangent_at(self, arc):
        """Tangent heading of the segment containing the given arc length(s)."""
        s = np.clip(np.asarray(arc, dtype=float), 0.0, self.length)
        idx = np.clip(np.searchsorted(self.cum_len, s, side="right") - 1, 0, len(self.seg_len) - 1)
        t = self.tangents[idx]
        if np.ndim(arc) == 0:
            return float(t)
        return t

    def project(self, point) -> PolylineProjection:
        """Project one point onto the polyline.

        Returns the closest point's arc length, the signed normal offset
        (positive left of the travel direction, magnitude equal to the
        distance to the projected point), and the containing segment's
        tangent heading.
        """
        arc, off, head = self.project_many(np.asarray(point, dtype=float)[None, :])
        return PolylineProjection(float(arc[0]), float(off[0]), float(head[0]))

    def project_many(self, points):
        """Vectorized projection of (n, 2) points.

        Returns (arc_lengths, normal_offsets, tangent_headings), each (n,).
        """
        p = np.asarray(points, dtype=float)
        a = self.points[:-1]  # (S, 2)
        d = self.seg_vec  # (S, 2)
        len2 = self.seg_len**2
        rel = p[:, None, :] - a[None, :, :]  # (n, S, 2)
        t = np.clip((rel * d[None, :, :]).sum(-1) / len2[None, :], 0.0, 1.0)
        foot = a[None, :, :] + t[..., None] * d[None, :, :]
        diff = p[:, None, :] - foot
        dist2 = (diff**2).sum(-1)
        best = np.argmin(dist2, axis=1)
        rows = np.arange(len(p))
        tb = t[rows, best]
        arc = self.cum_len[best] + tb * self.seg_len[best]
        db = diff[rows, best]
        dist = np.sqrt(dist2[rows, best])
        # sign: cross(tangent, point - foot) > 0 means left of travel
        cross = d[best, 0] * db[:, 1] - d[best, 1] * db[:, 0]
        offset = np.where(cross >= 0.0, dist, -dist)
        return arc, offset, self.tangents[best]


def _segment_intersection(p, r, q, s):
    """Intersection of segments p->p+r and q->q+s.

    Transverse hits return ("point", u, v); collinear overlaps return
    ("overlap", u_lo, u_hi) as the overlap interval in p's parameter, leaving
    the caller to pick a point subject to its arc bounds. Disjoint -> None.
    """
    rxs = r[0] * s[1] - r[1] * s[0]
    qp = q - p
    qpxr = qp[0] * r[1] - qp[1] * r[0]
    r2 = r[0] * r[0] + r[1] * r[1]
    eps = 1e-12
    if abs(rxs) < eps * max(1.0, np.sqrt(r2)):
        if abs(qpxr) > 1e-9 * max(1.0, np.sqrt(r2)):
            return None  # parallel, not collinear
        t0 = (qp[0] * r[0] + qp[1] * r[1]) / r2
        t1 = t0 + (s[0] * r[0] + s[1] * r[1]) / r2
        lo, hi = min(t0, t1), max(t0, t1)
        if hi < 0.0 or lo > 1.0:
            return None
        return ("overlap", max(lo, 0.0), min(hi, 1.0))
    u = (qp[0] * s[1] - qp[1] * s[0]) / rxs
    v = qpxr / rxs
    if -1e-12 <= u <= 1.0 + 1e-12 and -1e-12 <= v <= 1.0 + 1e-12:
        return ("point", min(max(u, 0.0), 1.0), min(max(v, 0.0), 1.0))
    return None


@dataclass(frozen=True)
class PolylineIntersection:
    arc_a: float
    arc_b: float
    point: np.ndarray


def polyline_intersection(a: Polyline, b: Polyline, min_arc_a: float = -np.inf,
                          min_arc_b: float = -np.inf):
    """First intersection of two polylines ordered by arc length along `a`.

    Optional lower bounds restrict the search to arcs strictly beyond the
    given values on each polyline; in collinear overlap regions the earliest
    point satisfying both bounds is reported. Returns None when disjoint.
    """
    best = None
    for i in range(len(a.seg_len)):
        p = a.points[i]
        r = a.seg_vec[i]
        for j in range(len(b.seg_len)):
            q = b.points[j]
            s = b.seg_vec[j]
            hit = _segment_intersection(p, r, q, s)
            if hit is None:
                continue
            if hit[0] == "point":
                _, u, v = hit
                arc_a = a.cum_len[i] + u * a.seg_len[i]
                arc_b = b.cum_len[j] + v * b.seg_len[j]
                if arc_a <= min_arc_a or arc_b <= min_arc_b:
                    continue
            else:
                _, u_lo, u_hi = hit
                # v is linear in u: v(u) = v0 + dv * u (dv sign flips for
                # anti-parallel overlaps)
                s2 = s[0] * s[0] + s[1] * s[1]
                v0 = ((p - q)[0] * s[0] + (p - q)[1] * s[1]) / s2
                dv = (r[0] * s[0] + r[1] * s[1]) / s2
                u = u_lo
                if a.cum_len[i] + u * a.seg_len[i] <= min_arc_a:
                    u = (min_arc_a - a.cum_len[i]) / a.seg_len[i] + 1e-12
                arc_b_of = lambda uu: b.cum_len[j] + (v0 + dv * uu) * b.seg_len[j]
                if arc_b_of(u) <= min_arc_b:
                    if dv <= 0:
                        continue  # receding along b: no later point helps
                    u = max(u, (((min_arc_b - b.cum_len[j]) / b.seg_len[j]) - v0) / dv
                            + 1e-12)
                if u > u_hi:
                    continue
                v = min(max(v0 + dv * u, 0.0), 1.0)
                arc_a = a.cum_len[i] + u * a.seg_len[i]
                arc_b = b.cum_len[j] + v * b.seg_len[j]
                if arc_a <= min_arc_a or arc_b <= min_arc_b:
                    continue
            point = p + u * r
            if best is None or arc_a < best.arc_a:
                best = PolylineIntersection(float(arc_a), float(arc_b), point.copy())
        if best is not None and best.arc_a <= a.cum_len[i + 1]:
            # nothing on a later segment can come earlier along a
            break
    return best


def rectangle_corners(x: float, y: float, theta: float, length: float, width: float):
    """Corners of an oriented rectangle centered at (x, y), long axis along theta."""
    c, s = np.cos(theta), np.sin(theta)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def obb_overlap(center_a, theta_a, shape_a, center_b, theta_b, shape_b) -> bool:
    """Separating-axis test for two oriented rectangles (length, width) pairs."""
    ca = rectangle_corners(center_a[0], center_a[1], theta_a, shape_a[0], shape_a[1])
    cb = rectangle_corners(center_b[0], center_b[1], theta_b, shape_b[0], shape_b[1])
    for theta in (theta_a, theta_b):
        c, s = np.cos(theta), np.sin(theta)
        for axis in ((c, s), (-s, c)):
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True
