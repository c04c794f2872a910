"""Rectangular surfel extraction on Atlanta-frame-aligned planes.

Per keyframe: backprojected points whose normals agree with an AF direction v
feed a 1-point plane RANSAC (the plane normal is fixed to v, so one point
fixes the offset).  Each plane's inliers are projected to the plane's two
in-plane AF axes; random 2-point axis-aligned rectangles are scored by how
densely their 5 cm occupancy grid is filled, and dominant rectangles are kept
greedily by area while removing the points they cover.  The surfels rendered
back into the depth image give the per-pixel surfel mask that later drives
sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .atlanta import LocalAF, AtlantaFrame
from .geom import CameraIntrinsics, NormalMap, Pose, backproject, unit

NORMAL_CONE_DEG = 20.0  # normal-to-direction agreement threshold


@dataclass
class Surfel:
    """Oriented rectangle: center, unit normal, in-plane axes and side lengths."""

    center: np.ndarray
    normal: np.ndarray
    axis1: np.ndarray
    axis2: np.ndarray
    len1: float
    len2: float
    direction_id: int
    keyframe_id: int

    @property
    def area(self) -> float:
        return self.len1 * self.len2

    def corners(self) -> np.ndarray:
        c, s1, s2 = self.center, self.axis1, self.axis2
        out = []
        for a in (-0.5, 0.5):
            for b in (-0.5, 0.5):
                out.append(c + a * self.len1 * s1 + b * self.len2 * s2)
        return np.stack(out)

    def validate(self, frame: AtlantaFrame | None = None) -> None:
        for v in (self.normal, self.axis1, self.axis2):
            if abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise ValueError("surfel frame vectors must be unit")
        if (
            abs(np.dot(self.normal, self.axis1)) > 1e-9
            or abs(np.dot(self.normal, self.axis2)) > 1e-9
            or abs(np.dot(self.axis1, self.axis2)) > 1e-9
        ):
            raise ValueError("surfel frame must be orthogonal")
        if self.len1 <= 0 or self.len2 <= 0:
            raise ValueError("surfel side lengths must be positive")
        if frame is not None:
            dots = np.abs(frame.all_directions() @ self.normal)
            if dots.max() < 1.0 - 1e-6:
                raise ValueError("surfel normal is not an AF direction")


@dataclass
class AtlantaPlane:
    """Plane v . x = offset with the indices of its supporting points."""

    direction: np.ndarray
    offset: float
    inlier_idx: np.ndarray


def atlanta_plane_ransac(
    points: np.ndarray,
    normals: np.ndarray,
    v: np.ndarray,
    tau: float = 0.03,
    iters: int = 64,
    min_inliers: int = 500,
    max_planes: int = 4,
    rng: np.random.Generator | None = None,
) -> list[AtlantaPlane]:
    """Sequential 1-point RANSAC for planes orthogonal to the oriented v.

    Candidate set X_v: points whose normal is within NORMAL_CONE_DEG of v.
    Each round samples offsets from X_v points, keeps the offset with the most
    |v . x - offset| <= tau inliers, accepts it if it has >= min_inliers, and
    removes its inliers.  Stops after max_planes or when nothing qualifies.
    """
    rng = rng or np.random.default_rng(0)
    v = unit(v)
    cone = normals @ v >= np.cos(np.radians(NORMAL_CONE_DEG))
    idx_v = np.nonzero(cone)[0]
    if len(idx_v) < min_inliers:
        return []
    proj = points[idx_v] @ v
    remaining = np.ones(len(idx_v), dtype=bool)
    planes = []
    while len(planes) < max_planes:
        rem_idx = np.nonzero(remaining)[0]
        if len(rem_idx) < min_inliers:
            break
        samples = proj[rng.choice(rem_idx, size=min(iters, len(rem_idx)), replace=False)]
        counts = (np.abs(proj[rem_idx][None, :] - samples[:, None]) <= tau).sum(axis=1)
        best = int(np.argmax(counts))
        if counts[best] < min_inliers:
            break
        offset = float(samples[best])
        sel = rem_idx[np.abs(proj[rem_idx] - offset) <= tau]
        planes.append(AtlantaPlane(v, offset, idx_v[sel]))
        remaining[sel] = False
    return planes


def surfel_axes(v: np.ndarray, frame: AtlantaFrame, tol: float = 1e-6):
    """In-plane axes for a surfel with normal v (v must be ± an AF direction).

    For v = ±v_v: (v_h1, v_v x v_h1).  For a horizontal v: (v_v, v x v_v).
    """
    v = unit(v)
    if abs(np.dot(v, frame.v_v)) >= 1.0 - tol:
        return frame.v_h1.copy(), np.cross(frame.v_v, frame.v_h1)
    for m in range(1, frame.n_horizontal + 1):
        if abs(np.dot(v, frame.horizontal_direction(m))) >= 1.0 - tol:
            return frame.v_v.copy(), np.cross(v, frame.v_v)
    raise ValueError("v is not aligned with any AF direction")


def _occupancy_fill(
    ca: np.ndarray, remaining: np.ndarray, clo: np.ndarray, chi: np.ndarray
):
    """Grid-fill fraction of candidate cell ranges [clo, chi] (inclusive).

    ca: (N, 2) integer cell coordinates of all inliers (grid extents come
    from these so every candidate indexes in range); only points flagged in
    `remaining` mark cells occupied.  fill = occupied / spanned cells.
    """
    cmin = ca.min(axis=0)
    ca = ca - cmin
    nx, ny = ca.max(axis=0) + 1
    occ = np.zeros((nx + 1, ny + 1), dtype=np.int64)
    ra = ca[remaining]
    occ[ra[:, 0] + 1, ra[:, 1] + 1] = 1
    I = occ.cumsum(axis=0).cumsum(axis=1)

    clo = clo - cmin
    chi = chi - cmin
    n_cells = (chi[:, 0] - clo[:, 0] + 1) * (chi[:, 1] - clo[:, 1] + 1)
    occ_cnt = (
        I[chi[:, 0] + 1, chi[:, 1] + 1]
        - I[clo[:, 0], chi[:, 1] + 1]
        - I[chi[:, 0] + 1, clo[:, 1]]
        + I[clo[:, 0], clo[:, 1]]
    )
    return occ_cnt / np.maximum(n_cells, 1)


def extract_rectangles(
    plane: AtlantaPlane,
    axes: tuple[np.ndarray, np.ndarray],
    points: np.ndarray,
    candidates: int = 2000,
    cell: float = 0.05,
    fill_min: float = 0.6,
    max_surfels: int = 4,
    camera_center: np.ndarray | None = None,
    direction_id: int = 0,
    keyframe_id: int = 0,
    rng: np.random.Generator | None = None,
) -> list[Surfel]:
    """Dominant axis-aligned rectangles on one plane.

    Random 2-point candidates; each candidate is widened to the 5 cm cells
    its corner pair spans, so the emitted rectangle is exactly the cell range
    that fill is scored on.  A candidate stays alive while the occupancy grid
    of the not-yet-covered inliers fills >= fill_min of that range; the
    largest-area live candidate wins each round and claims the inliers inside
    its bounds.  Pairs with a degenerate (zero-area) box are rejected before
    widening.
    """
    rng = rng or np.random.default_rng(0)
    s1, s2 = axes
    v = plane.direction
    X = points[plane.inlier_idx]
    if len(X) < 2:
        return []
    a = np.stack([X @ s1, X @ s2], axis=1)
    ca = np.floor(a / cell).astype(np.int64)

    i = rng.integers(len(a), size=candidates)
    j = rng.integers(len(a), size=candidates)
    raw_lo = np.minimum(a[i], a[j])
    raw_hi = np.maximum(a[i], a[j])
    alive = np.all(raw_hi > raw_lo, axis=1)
    clo = np.floor(raw_lo / cell).astype(np.int64)
    chi = np.floor(raw_hi / cell).astype(np.int64)
    lo = clo * cell
    hi = (chi + 1) * cell
    area = (hi[:, 0] - lo[:, 0]) * (hi[:, 1] - lo[:, 1])

    remaining = np.ones(len(a), dtype=bool)
    out: list[Surfel] = []
    while len(out) < max_surfels and alive.any() and remaining.any():
        fill = np.zeros(candidates)
        fill[alive] = _occupancy_fill(ca, remaining, clo[alive], chi[alive])
        qual = alive & (fill >= fill_min)
        if not qual.any():
            break
        k = int(np.argmax(np.where(qual, area, -np.inf)))
        inside = (
            (a[:, 0] >= lo[k, 0]) & (a[:, 0] <= hi[k, 0])
            & (a[:, 1] >= lo[k, 1]) & (a[:, 1] <= hi[k, 1])
        )
        claimed = inside & remaining
        if not claimed.any():
            alive[k] = False
            continue
        remaining &= ~inside
        mid = 0.5 * (lo[k] + hi[k])
        c = mid[0] * s1 + mid[1] * s2 + plane.offset * v
        n = v.copy()
        if camera_center is not None and np.dot(camera_center - c, v) < 0:
            n = -v
        out.append(
            Surfel(
                center=c,
                normal=n,
                axis1=s1.copy(),
                axis2=s2.copy(),
                len1=float(hi[k, 0] - lo[k, 0]),
                len2=float(hi[k, 1] - lo[k, 1]),
                direction_id=direction_id,
                keyframe_id=keyframe_id,
            )
        )
        alive[k] = False
    return out


def points_in_rectangle(surfel: Surfel, points: np.ndarray, tau: float) -> np.ndarray:
    """Mask of points within tau of the surfel plane and inside its bounds."""
    rel = points - surfel.center
    return (
        (np.abs(rel @ surfel.normal) <= tau)
        & (np.abs(rel @ surfel.axis1) <= surfel.len1 / 2)
        & (np.abs(rel @ surfel.axis2) <= surfel.len2 / 2)
    )


def render_surfel_mask(
    surfels: list[Surfel],
    depth: np.ndarray,
    K: CameraIntrinsics,
    pose: Pose,
    tau: float = 0.03,
) -> np.ndarray:
    """Boolean image: pixels whose world point lies on one of the surfels."""
    mask = np.zeros(depth.shape, dtype=bool)
    if not surfels:
        return mask
    pts_cam, valid = backproject(depth, K)
    P = pose.transform_point(pts_cam[valid])
    hit = np.zeros(len(P), dtype=bool)
    for s in surfels:
        hit |= points_in_rectangle(s, P, tau)
    mask[valid] = hit
    return mask


def extract_keyframe_surfels(
    depth: np.ndarray,
    K: CameraIntrinsics,
    pose: Pose,
    normal_map: NormalMap,
    local_af: LocalAF,
    keyframe_id: int,
    rng: np.random.Generator,
    stride: int = 4,
    tau: float = 0.03,
    ransac_iters: int = 64,
    min_inliers: int = 500,
    max_planes: int = 4,
    candidates: int = 2000,
    cell: float = 0.05,
    fill_min: float = 0.6,
    max_surfels_per_plane: int = 4,
    min_side: float = 0.1,
) -> tuple[list[Surfel], np.ndarray]:
    """Full per-keyframe extraction: planes for every observed AF direction
    (both orientations), rectangles per plane, then the rendered mask.

    Surfels with a side shorter than min_side are dropped as scraps.
    """
    pts_cam, dvalid = backproject(depth, K)
    sel = np.zeros_like(dvalid)
    sel[::stride, ::stride] = True
    sel &= dvalid & normal_map.valid
    P = pose.transform_point(pts_cam[sel])
    N = normal_map.normals[sel] @ pose.rotation.T

    surfels: list[Surfel] = []
    for did, d in local_af.observed_directions():
        for sign in (1.0, -1.0):
            vo = sign * d
            planes = atlanta_plane_ransac(
                P, N, vo, tau=tau, iters=ransac_iters,
                min_inliers=min_inliers, max_planes=max_planes, rng=rng,
            )
            axes = surfel_axes(vo, local_af.frame)
            for plane in planes:
                rects = extract_rectangles(
                    plane, axes, P, candidates=candidates, cell=cell,
                    fill_min=fill_min, max_surfels=max_surfels_per_plane,
                    camera_center=pose.camera_center, direction_id=did,
                    keyframe_id=keyframe_id, rng=rng,
                )
                surfels.extend(r for r in rects if min(r.len1, r.len2) >= min_side)
    mask = render_surfel_mask(surfels, depth, K, pose, tau=tau)
    return surfels, mask
