"""Built-in structured mesh generators.

``disk_in_annulus`` builds concentric node rings stitched into triangles so
every circle radius in the breakpoint list is an exact polygonal interface.
``rect_in_rect`` builds a tensor-product grid whose lines contain every
rectangle edge, so rectangular windings are resolved exactly by element
centroids.
"""

from __future__ import annotations

import math

import numpy as np

from .mesh import AIR, EVAL, IRON, Mesh, MeshError

_GOLDEN = 0.6180339887498949


def _subdivide(breaks, h, odd=()):
    """Uniformly split each interval of ``breaks`` into ceil(length/h) pieces.

    Intervals whose index is in ``odd`` get an odd number of pieces, which
    keeps their midpoint off the grid lines.
    """
    pts = [breaks[0]]
    for k, (a, b) in enumerate(zip(breaks[:-1], breaks[1:])):
        n = max(1, math.ceil((b - a) / h - 1e-9))
        if k in odd and n % 2 == 0:
            n += 1
        pts.extend(np.linspace(a, b, n + 1)[1:].tolist())
    return np.array(pts)


def _merge_close(values, tol):
    out = []
    for v in sorted(values):
        if not out or v - out[-1] > tol:
            out.append(v)
    return out


def disk_in_annulus(r_inner, r_outer, h, eval_radius=None, center=(0.0, 0.0),
                    inner_role=AIR, outer_role=IRON) -> Mesh:
    """Air disk of radius ``r_inner`` inside an iron ring reaching ``r_outer``.

    Parameters
    ----------
    r_inner, r_outer : float
        Interface and outer-boundary radii in m.
    h : float
        Target radial and tangential spacing in m.
    eval_radius : float, optional
        If given, triangles inside this radius are tagged ``eval``.
    """
    if not 0 < r_inner < r_outer:
        raise MeshError(f"need 0 < r_inner < r_outer, got {r_inner}, {r_outer}")
    if h <= 0:
        raise MeshError("mesh size h must be positive")
    breaks = [0.0]
    if eval_radius is not None:
        if not 0 < eval_radius < r_inner:
            raise MeshError("eval radius must lie inside the interface radius")
        breaks.append(eval_radius)
    breaks += [r_inner, r_outer]
    radii = _subdivide(breaks, h)

    cx, cy = center
    counts = [1] + [max(6, math.ceil(2 * math.pi * r / h - 1e-9)) for r in radii[1:]]
    offsets = [0.0] + [((k * _GOLDEN) % 1.0) for k in range(1, len(radii))]
    first = np.concatenate([[0], np.cumsum(counts)])
    xy = [np.array([[cx, cy]])]
    for k in range(1, len(radii)):
        theta = 2 * np.pi * (np.arange(counts[k]) + offsets[k]) / counts[k]
        xy.append(np.column_stack([cx + radii[k] * np.cos(theta), cy + radii[k] * np.sin(theta)]))
    nodes = np.vstack(xy)

    tris, regions = [], []

    def role(r_out_ring):
        if eval_radius is not None and r_out_ring <= eval_radius * (1 + 1e-12):
            return EVAL
        return inner_role if r_out_ring <= r_inner * (1 + 1e-12) else outer_role

    n1 = counts[1]
    ring1 = first[1] + np.arange(n1)
    tris.append(np.column_stack([np.zeros(n1, dtype=np.int64), ring1, np.roll(ring1, -1)]))
    regions.append(np.full(n1, role(radii[1])))
    for k in range(1, len(radii) - 1):
        t = _stitch(first[k], counts[k], offsets[k], first[k + 1], counts[k + 1], offsets[k + 1])
        tris.append(t)
        regions.append(np.full(len(t), role(radii[k + 1])))

    nb = counts[-1]
    outer = first[-2] + np.arange(nb)
    bnd = np.column_stack([outer, np.roll(outer, -1)])
    return Mesh.from_arrays(nodes, np.vstack(tris), np.concatenate(regions), bnd, validate=False)


def _stitch(fa, na, oa, fb, nb, ob):
    """Triangulate the band between two concentric node rings."""
    ang_a = (np.arange(1, na + 1) + oa) / na
    # start ring b at the node closest (from below) to the first node of ring a
    j0 = math.floor(oa * nb / na - ob)
    ang_b = (np.arange(j0 + 1, j0 + nb + 1) + ob) / nb
    kind = np.concatenate([np.zeros(na, dtype=np.int8), np.ones(nb, dtype=np.int8)])
    order = np.lexsort((kind, np.concatenate([ang_a, ang_b])))
    kind = kind[order]
    ia = np.concatenate([[0], np.cumsum(kind == 0)])[:-1]
    jb = j0 + np.concatenate([[0], np.cumsum(kind == 1)])[:-1]
    a0 = fa + ia % na
    a1 = fa + (ia + 1) % na
    b0 = fb + jb % nb
    b1 = fb + (jb + 1) % nb
    adv_a = kind == 0
    return np.where(
        adv_a[:, None],
        np.column_stack([a0, a1, b0]),
        np.column_stack([a0, b1, b0]),
    )


def rect_in_rect(outer, inner, h, windings=(), eval_disk=None) -> Mesh:
    """Air rectangle inside an iron frame, both centred at the origin.

    Parameters
    ----------
    outer, inner : (width, height)
        Full side lengths in m.
    h : float
        Target grid spacing in m.
    windings : iterable of (xmin, xmax, ymin, ymax)
        Rectangles whose edges become grid lines; each is split into an odd
        number of cells per direction so its centre is never a mesh node.
    eval_disk : (cx, cy, radius), optional
        Air triangles whose centroid lies in the disk are tagged ``eval``.
    """
    W, H = outer
    w, hh = inner
    if not (0 < w < W and 0 < hh < H):
        raise MeshError("inner rectangle must fit strictly inside the outer one")
    xs = {-W / 2, W / 2, -w / 2, w / 2}
    ys = {-H / 2, H / 2, -hh / 2, hh / 2}
    wins = [tuple(map(float, r)) for r in windings]
    for x0, x1, y0, y1 in wins:
        if not (-w / 2 < x0 < x1 < w / 2 and -hh / 2 < y0 < y1 < hh / 2):
            raise MeshError(f"winding {(x0, x1, y0, y1)} is not inside the air rectangle")
        xs |= {x0, x1}
        ys |= {y0, y1}
    xb = _merge_close(xs, 1e-9 * W)
    yb = _merge_close(ys, 1e-9 * H)

    def odd_intervals(breaks, spans):
        tol = 1e-9 * (breaks[-1] - breaks[0])
        out = set()
        for k, (a, b) in enumerate(zip(breaks[:-1], breaks[1:])):
            if any(s0 - tol <= a and b <= s1 + tol for s0, s1 in spans):
                out.add(k)
        return out

    gx = _subdivide(xb, h, odd_intervals(xb, [(r[0], r[1]) for r in wins]))
    gy = _subdivide(yb, h, odd_intervals(yb, [(r[2], r[3]) for r in wins]))
    nx, ny = len(gx), len(gy)
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange(nx * ny).reshape(nx, ny)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    tris = np.vstack([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    cen = nodes[tris].mean(axis=1)
    inside = (np.abs(cen[:, 0]) < w / 2) & (np.abs(cen[:, 1]) < hh / 2)
    regions = np.where(inside, AIR, IRON)
    if eval_disk is not None:
        ex, ey, er = eval_disk
        in_disk = (cen[:, 0] - ex) ** 2 + (cen[:, 1] - ey) ** 2 < er ** 2
        regions = np.where(inside & in_disk, EVAL, regions)
    border = np.concatenate([idx[:, 0], idx[-1, 1:], idx[-2::-1, -1], idx[0, -2:0:-1]])
    bnd = np.column_stack([border, np.roll(border, -1)])
    return Mesh.from_arrays(nodes, tris, regions, bnd, validate=False)


def quadrupole_yoke(r_aperture, r_yoke, h, eval_radius=None) -> Mesh:
    """Circular air aperture inside a circular yoke (same topology as the tube)."""
    return disk_in_annulus(r_aperture, r_yoke, h, eval_radius=eval_radius)


GEOMETRIES = {
    "disk-in-annulus": disk_in_annulus,
    "rect-in-rect": rect_in_rect,
    "quadrupole-yoke": quadrupole_yoke,
}
