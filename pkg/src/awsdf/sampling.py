"""Structure-aware sample generation with distance-bound supervision.

Non-surfel samples live on camera rays through randomly chosen unmasked
pixels: stratified depths over [d_min, D + delta], a Gaussian cluster around
the sensor depth, and the exact surface point.  Surfel samples are drawn
uniformly on surfel rectangles.  Every sample carries a signed distance
bound b (zero on surfels, nearest-neighbor distance against the step's
surface-point set otherwise) and an approximate gradient direction (the
surfel's Atlanta normal, or the normalized offset from the nearest surface
point).

Depths along a ray are Euclidean distances along the unit ray; the sensor
z-depth is converted per pixel.  That makes |x - p| = |D - d| exact for the
same-ray surface point, so |b| <= |D - d| holds with equality cases intact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import CameraIntrinsics, Pose
from .losses import LossBatch
from .surfel import Surfel

NN_DEGENERATE_DIST = 1e-9  # below this the offset direction is meaningless


@dataclass
class NonSurfelSamples:
    """Ray samples of one keyframe: flattened points with per-point ray
    distance d and per-point surface distance D (both along unit rays)."""

    points: np.ndarray
    d: np.ndarray
    D: np.ndarray
    surface_points: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class SurfelSamples:
    """Points drawn on surfel rectangles with their oriented normals."""

    points: np.ndarray
    directions: np.ndarray
    surfel_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class SampleBatch:
    """Assembled training batch: sample arrays plus the surface set P."""

    points: np.ndarray
    is_surfel: np.ndarray
    bound: np.ndarray
    grad_target: np.ndarray
    grad_valid: np.ndarray
    surface_points: np.ndarray

    @property
    def n_surfel(self) -> int:
        return int(self.is_surfel.sum())

    @property
    def n_nonsurfel(self) -> int:
        return int((~self.is_surfel).sum())

    def to_loss_batch(self) -> LossBatch:
        return LossBatch(
            points=self.points,
            is_surfel=self.is_surfel,
            bound=self.bound,
            grad_target=self.grad_target,
            grad_valid=self.grad_valid,
        )


def sample_nonsurfel(
    depth: np.ndarray,
    K: CameraIntrinsics,
    pose: Pose,
    mask: np.ndarray | None,
    n_pixels: int,
    rng: np.random.Generator,
    n_strat: int = 19,
    n_surf: int = 8,
    d_min: float = 0.07,
    delta: float = 0.1,
    sigma_s: float = 0.1,
) -> NonSurfelSamples:
    """Ray samples through pixels drawn uniformly from valid & not masked.

    Per pixel with surface distance D: n_strat stratified depths covering
    [d_min, D + delta], n_surf draws from Normal(D, sigma_s) clipped to the
    same interval, and the surface point itself.  Pixels whose surface lies
    closer than d_min are skipped.  Fewer eligible pixels than n_pixels is
    legal; all of them are used.
    """
    ok = depth > 0
    if mask is not None:
        ok &= ~mask
    dirs = K.ray_dirs_cam()
    norms = np.linalg.norm(dirs, axis=-1)
    ok &= depth * norms > d_min
    idx = np.nonzero(ok.ravel())[0]
    empty = NonSurfelSamples(
        np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros((0, 3))
    )
    if len(idx) == 0:
        return empty
    if len(idx) > n_pixels:
        idx = rng.choice(idx, size=n_pixels, replace=False)

    dir_w = dirs.reshape(-1, 3)[idx] @ pose.rotation.T
    nrm = norms.ravel()[idx]
    rhat = dir_w / nrm[:, None]
    D = depth.ravel()[idx] * nrm  # sensor depth as distance along unit ray

    npix = len(idx)
    hi = D + delta
    u = rng.random((npix, n_strat))
    strat = d_min + (np.arange(n_strat) + u) / n_strat * (hi - d_min)[:, None]
    gauss = rng.normal(D[:, None], sigma_s, size=(npix, n_surf))
    gauss = np.clip(gauss, d_min, hi[:, None])
    d = np.concatenate([strat, gauss, D[:, None]], axis=1)

    cam = pose.camera_center
    pts = cam + d[:, :, None] * rhat[:, None, :]
    surface = cam + D[:, None] * rhat
    Dall = np.broadcast_to(D[:, None], d.shape)
    return NonSurfelSamples(
        pts.reshape(-1, 3), d.ravel(), Dall.ravel().copy(), surface
    )


def sample_surfel(surfel: Surfel, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points on the surfel rectangle."""
    a = rng.uniform(-0.5, 0.5, size=count) * surfel.len1
    b = rng.uniform(-0.5, 0.5, size=count) * surfel.len2
    return surfel.center + a[:, None] * surfel.axis1 + b[:, None] * surfel.axis2


def sample_surfels(
    surfels: list[Surfel],
    total: int,
    count_per_surfel: int,
    rng: np.random.Generator,
) -> SurfelSamples:
    """Round-robin over surfels, count_per_surfel points each, until total
    points are collected (the tail draw is trimmed)."""
    empty = SurfelSamples(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=int))
    if not surfels or total <= 0:
        return empty
    pts, dirs, ids = [], [], []
    n = 0
    while n < total:
        for k, s in enumerate(surfels):
            p = sample_surfel(s, count_per_surfel, rng)
            pts.append(p)
            dirs.append(np.tile(s.normal, (len(p), 1)))
            ids.append(np.full(len(p), k))
            n += len(p)
            if n >= total:
                break
    pts = np.concatenate(pts)[:total]
    dirs = np.concatenate(dirs)[:total]
    ids = np.concatenate(ids)[:total]
    return SurfelSamples(pts, dirs, ids)


def nearest_surface_point(
    x: np.ndarray, P: np.ndarray, chunk: int = 1024
) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest neighbor of each row of x in P: (distance, index)."""
    n = len(x)
    dist = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        d2 = ((x[s:e, None, :] - P[None, :, :]) ** 2).sum(-1)
        ii = np.argmin(d2, axis=1)
        idx[s:e] = ii
        dist[s:e] = np.linalg.norm(x[s:e] - P[ii], axis=1)
    return dist, idx


def compute_bound(
    points: np.ndarray,
    d: np.ndarray,
    D: np.ndarray,
    P: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Signed distance bound for non-surfel points against the surface set.

    b = sgn(D - d) * min_p |x - p|.  Returns (bound, nn_dist, nn_idx) so the
    gradient pass reuses the search.
    """
    if len(points) == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64)
    if len(P) == 0:
        raise ValueError("surface point set is empty")
    dist, idx = nearest_surface_point(points, P)
    return np.sign(D - d) * dist, dist, idx


def compute_grad_approx(
    points: np.ndarray,
    d: np.ndarray,
    D: np.ndarray,
    P: np.ndarray,
    nn_dist: np.ndarray | None = None,
    nn_idx: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Approximate gradient for non-surfel points: the normalized offset
    from the nearest surface point, with the bound's sign.

    Points sitting on their nearest neighbor get grad_valid False and a zero
    vector; they carry no usable direction.
    """
    if len(points) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    if nn_dist is None or nn_idx is None:
        nn_dist, nn_idx = nearest_surface_point(points, P)
    diff = points - P[nn_idx]
    valid = nn_dist >= NN_DEGENERATE_DIST
    g = np.zeros_like(diff)
    g[valid] = (
        np.sign(D - d)[valid, None] * diff[valid] / nn_dist[valid, None]
    )
    # sign 0 (exactly at sensor depth but off the nearest point) gives a
    # zero vector; treat it as unusable as well
    valid &= np.abs(np.sign(D - d)) > 0
    return g, valid


def assemble_batch(
    ray_samples: list[NonSurfelSamples],
    surfel_samples: SurfelSamples,
) -> SampleBatch:
    """Glue one optimization step's samples into a batch.

    P = all surface points + all surfel points of the step.  Surfel points
    get bound 0 and their Atlanta normal as gradient target.
    """
    ray_samples = [r for r in ray_samples if len(r) > 0]
    pn = [r.points for r in ray_samples]
    dn = [r.d for r in ray_samples]
    Dn = [r.D for r in ray_samples]
    surf = [r.surface_points for r in ray_samples]

    pts_n = np.concatenate(pn) if pn else np.zeros((0, 3))
    d_n = np.concatenate(dn) if dn else np.zeros(0)
    D_n = np.concatenate(Dn) if Dn else np.zeros(0)
    P_parts = surf + [surfel_samples.points]
    P = np.concatenate([p for p in P_parts if len(p) > 0]) if any(
        len(p) > 0 for p in P_parts
    ) else np.zeros((0, 3))

    bound_n, nn_dist, nn_idx = compute_bound(pts_n, d_n, D_n, P)
    grad_n, valid_n = compute_grad_approx(pts_n, d_n, D_n, P, nn_dist, nn_idx)

    ns = len(surfel_samples)
    points = np.concatenate([surfel_samples.points, pts_n])
    is_surfel = np.zeros(len(points), dtype=bool)
    is_surfel[:ns] = True
    bound = np.concatenate([np.zeros(ns), bound_n])
    grad_target = np.concatenate([surfel_samples.directions, grad_n])
    grad_valid = np.concatenate([np.ones(ns, dtype=bool), valid_n])
    return SampleBatch(points, is_surfel, bound, grad_target, grad_valid, P)
