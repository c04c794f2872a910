"""Field evaluation metrics, explicit-map fusion, meshing, and exporters.

Metrics compare a reconstructed field against an analytic oracle over points
drawn along camera rays (the training sample distribution).  The explicit
planar map can be fused into the evaluation by taking, per point, the smaller
of the implicit value and the signed distance to the nearest surfel.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from skimage import measure as _skmeasure

from . import sampling
from .atlanta import AtlantaFrame
from .surfel import Surfel

COLLISION_EPS = 0.10
PLANAR_MAP_MAGIC = "awsdf planar map v1"
EVAL_REPORT_MAGIC = "awsdf eval report v1"


class MeshResidualError(Exception):
    """Extracted mesh vertices disagree with the field beyond the grid bound."""


# ------------------------------------------------------------------- types


@dataclass
class EvalReport:
    """Field-vs-oracle metrics over ray-sampled points.

    sdf_error is in cm; collision_error and gradient_cos_distance are
    dimensionless.  mode is "implicit" or "combined".
    """

    sdf_error: float
    collision_error: float
    gradient_cos_distance: float
    n_points: int
    mode: str

    def validate(self) -> None:
        vals = (self.sdf_error, self.collision_error, self.gradient_cos_distance)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("metrics must be finite and >= 0")
        if self.mode not in ("implicit", "combined"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def to_text(self) -> str:
        return (
            f"{EVAL_REPORT_MAGIC}\n"
            f"mode {self.mode}\n"
            f"n_points {self.n_points}\n"
            f"sdf_error_cm {self.sdf_error:.17g}\n"
            f"collision_error {self.collision_error:.17g}\n"
            f"gradient_cos_distance {self.gradient_cos_distance:.17g}\n"
        )

    def write(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())


@dataclass
class PlanarMap:
    """Global direction frame plus every extracted surfel."""

    frame: AtlantaFrame
    surfels: list[Surfel] = field(default_factory=list)

    def validate(self) -> None:
        self.frame.validate()
        for s in self.surfels:
            if not 0 <= s.direction_id <= self.frame.n_horizontal:
                raise ValueError(f"direction id {s.direction_id} not in frame")
            s.validate(self.frame)


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float
    faces: np.ndarray  # (F, 3) int, indices into vertices

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0


# ------------------------------------------------------- model/oracle adapters


def _values_and_grads(model, X: np.ndarray):
    """(f, grad) from an SdfModel or a callable returning (f, grad)."""
    if hasattr(model, "forward_with_gradient"):
        f, G = model.forward_with_gradient(X)
    else:
        out = model(X)
        if not (isinstance(out, tuple) and len(out) == 2):
            raise TypeError("model callable must return (values, gradients)")
        f, G = out
    return np.asarray(f, dtype=np.float64), np.asarray(G, dtype=np.float64)


def _values(model, X: np.ndarray) -> np.ndarray:
    if hasattr(model, "forward"):
        return np.asarray(model.forward(X), dtype=np.float64)
    out = model(X)
    if isinstance(out, tuple):
        out = out[0]
    return np.asarray(out, dtype=np.float64)


# ------------------------------------------------------------------ distances


def point_rect_distance(x: np.ndarray, surfel: Surfel):
    """Distance from x (3,) or (N, 3) to a surfel rectangle.

    Projects onto the rectangle plane, clamps the in-plane coordinates to the
    half-lengths, and measures to the lifted clamped point.  Returns
    (distance, closest point) with shapes matching the input.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rel = X - surfel.center
    a = np.clip(rel @ surfel.axis1, -surfel.len1 / 2, surfel.len1 / 2)
    b = np.clip(rel @ surfel.axis2, -surfel.len2 / 2, surfel.len2 / 2)
    closest = surfel.center + a[:, None] * surfel.axis1 + b[:, None] * surfel.axis2
    dist = np.linalg.norm(X - closest, axis=1)
    if np.ndim(x) == 1:
        return float(dist[0]), closest[0]
    return dist, closest


def _nearest_surfel(X: np.ndarray, surfels: list[Surfel]):
    """Per point: signed distance to the nearest surfel, its closest point,
    and the surfel index.  Sign is the side of the oriented normal plane."""
    n = len(X)
    best = np.full(n, np.inf)
    sgn = np.ones(n)
    closest = np.zeros_like(X)
    idx = np.zeros(n, dtype=int)
    for k, s in enumerate(surfels):
        dist, cp = point_rect_distance(X, s)
        side = np.where((X - s.center) @ s.normal >= 0.0, 1.0, -1.0)
        take = dist < best
        best = np.where(take, dist, best)
        sgn = np.where(take, side, sgn)
        closest = np.where(take[:, None], cp, closest)
        idx = np.where(take, k, idx)
    return sgn * best, closest, idx


def combine_explicit(x: np.ndarray, model, planar_map: PlanarMap):
    """Per-point min-|s| fusion of the implicit field with the planar map.

    Where the nearest surfel is closer than |f|, the value becomes the signed
    rectangle distance and the gradient the (sign-adjusted) unit offset from
    the closest rectangle point; elsewhere the implicit pair passes through.
    """
    if not planar_map.surfels:
        raise ValueError("combined mode requires a nonempty planar map")
    single = np.ndim(x) == 1
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    f, G = _values_and_grads(model, X)
    s_exp, closest, idx = _nearest_surfel(X, planar_map.surfels)
    off = X - closest
    dist = np.linalg.norm(off, axis=1)
    g_exp = np.zeros_like(X)
    ok = dist > 1e-12
    g_exp[ok] = np.sign(s_exp[ok])[:, None] * off[ok] / dist[ok, None]
    on_rect = ~ok
    if np.any(on_rect):
        normals = np.stack([planar_map.surfels[k].normal for k in idx[on_rect]])
        g_exp[on_rect] = normals
    take = np.abs(s_exp) < np.abs(f)
    s = np.where(take, s_exp, f)
    g = np.where(take[:, None], g_exp, G)
    if single:
        return float(s[0]), g[0]
    return s, g


# ------------------------------------------------------------------ evaluate


def sample_eval_points(frames, K, n_points: int, rng: np.random.Generator,
                       n_pixels: int = 32, **sample_kw) -> np.ndarray:
    """n_points ray-distributed points from randomly chosen (depth, pose) frames."""
    chunks = []
    total = 0
    stalls = 0
    while total < n_points:
        depth, pose = frames[int(rng.integers(len(frames)))]
        ns = sampling.sample_nonsurfel(depth, K, pose, None, n_pixels, rng, **sample_kw)
        if len(ns.points) == 0:
            stalls += 1
            if stalls > 10 * len(frames):
                raise ValueError("frames contain no valid depth pixels")
            continue
        chunks.append(ns.points)
        total += len(ns.points)
    return np.concatenate(chunks)[:n_points]


def evaluate(model, oracle, frames, K, n_points: int = 20_000,
             mode: str = "implicit", planar_map: PlanarMap | None = None,
             seed: int = 0, collision_eps: float = COLLISION_EPS,
             n_pixels: int = 32, **sample_kw) -> EvalReport:
    """Compare a field against an analytic oracle over ray-sampled points.

    oracle maps points (N, 3) to (signed distance, gradient).  Points follow
    the training distribution: stratified plus near-surface samples along rays
    of randomly chosen frames, seeded.  In combined mode values and gradients
    pass through combine_explicit with the given planar map.
    """
    if oracle is None:
        raise ValueError("evaluation requires an oracle")
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    X = sample_eval_points(frames, K, n_points, rng, n_pixels, **sample_kw)
    if mode == "implicit":
        f, G = _values_and_grads(model, X)
    elif mode == "combined":
        if planar_map is None:
            raise ValueError("combined mode requires a planar map")
        f, G = combine_explicit(X, model, planar_map)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    gt, gt_grad = oracle(X)
    gt = np.asarray(gt, dtype=np.float64)
    gt_grad = np.asarray(gt_grad, dtype=np.float64)

    sdf_error = float(np.mean(np.abs(f - gt)) * 100.0)

    norm_p = np.linalg.norm(G, axis=1)
    norm_t = np.linalg.norm(gt_grad, axis=1)
    ok = (norm_p > 1e-12) & (norm_t > 1e-12)
    if np.any(ok):
        cosv = np.sum(G[ok] / norm_p[ok, None] * gt_grad[ok] / norm_t[ok, None], axis=1)
        grad_dist = float(np.mean(1.0 - cosv))
    else:
        grad_dist = 0.0

    def cost(s):
        return np.maximum(0.0, collision_eps - s) / collision_eps

    collision = float(np.mean(np.abs(cost(f) - cost(gt))))
    report = EvalReport(sdf_error, collision, max(grad_dist, 0.0), n_points, mode)
    report.validate()
    return report


# -------------------------------------------------------------------- meshing


def _grid_axes(bounds, resolution):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if lo.shape != (3,) or hi.shape != (3,):
        raise ValueError("bounds must be (lo, hi) with 3 components each")
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,)).copy()
    if np.any(hi <= lo) or np.any(res < 2):
        raise ValueError("degenerate bounds or resolution")
    return lo, hi, res


def marching_cubes(model, bounds, resolution=64, iso: float = 0.0,
                   chunk: int = 65536) -> Mesh:
    """Triangle mesh of the iso level set over a regular grid.

    bounds is (lo, hi); resolution an int or per-axis triple.  Every emitted
    vertex is checked against the field: residual above one cell diagonal
    raises MeshResidualError.  An iso value outside the sampled range yields
    an empty mesh.
    """
    lo, hi, res = _grid_axes(bounds, resolution)
    axes = [np.linspace(lo[i], hi[i], res[i]) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    vals = np.concatenate([_values(model, pts[i:i + chunk])
                           for i in range(0, len(pts), chunk)])
    vol = vals.reshape(tuple(res))
    if not (vol.min() < iso < vol.max()):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    spacing = (hi - lo) / (res - 1)
    verts, faces, _, _ = _skmeasure.marching_cubes(vol, level=iso,
                                                   spacing=tuple(spacing))
    verts = verts + lo
    diag = float(np.linalg.norm(spacing))
    resid = np.abs(_values(model, verts) - iso)
    worst = float(resid.max()) if len(resid) else 0.0
    if worst > diag:
        raise MeshResidualError(
            f"vertex residual {worst:.4g} exceeds cell diagonal {diag:.4g}")
    return Mesh(verts, faces.astype(int))


# --------------------------------------------------------------------- slices


def sdf_slice(model, z: float, bounds, resolution=256) -> np.ndarray:
    """Field values on a horizontal plane; values[i, j] = f(x_i, y_j, z)."""
    lo, hi, res = _grid_axes(bounds, resolution)
    if not lo[2] <= z <= hi[2]:
        raise ValueError(f"slice height {z} outside bounds")
    xs = np.linspace(lo[0], hi[0], res[0])
    ys = np.linspace(lo[1], hi[1], res[1])
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, float(z))], axis=1)
    return _values(model, pts).reshape(res[0], res[1])


def slice_to_rgb(values: np.ndarray) -> np.ndarray:
    """Diverging color map: blue below zero, white at zero, red above.

    Linear in value, normalized by the max magnitude of the slice."""
    vmax = float(np.max(np.abs(values))) or 1.0
    t = np.clip(values / vmax, -1.0, 1.0)
    r = np.where(t >= 0, 1.0, 1.0 + t)
    g = 1.0 - np.abs(t)
    b = np.where(t <= 0, 1.0, 1.0 - t)
    return np.round(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


def export_slice(values: np.ndarray, png_path: str, raw_path: str | None = None) -> None:
    """PNG (x right, y up) plus optional raw .npy grid of the slice values."""
    rgb = slice_to_rgb(values)
    img = np.transpose(rgb, (1, 0, 2))[::-1]  # rows = descending y
    Image.fromarray(img, mode="RGB").save(png_path)
    if raw_path is not None:
        np.save(raw_path, values)


# ------------------------------------------------------------------ exporters


def _fmt(*vals) -> str:
    return " ".join(f"{v:.17g}" for v in vals)


def export_planar_map(pmap: PlanarMap, path: str) -> None:
    """Versioned structured text: AF rotation/angles/supports + surfel rows."""
    pmap.validate()
    af = pmap.frame
    lines = [PLANAR_MAP_MAGIC,
             "rotation " + _fmt(*af.rotation.ravel()),
             "angles " + _fmt(*af.angles),
             "supports " + _fmt(*af.supports),
             f"surfels {len(pmap.surfels)}"]
    for s in pmap.surfels:
        lines.append(_fmt(*s.center, *s.normal, *s.axis1, *s.axis2,
                          s.len1, s.len2) + f" {s.direction_id} {s.keyframe_id}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_planar_map(path: str) -> PlanarMap:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != PLANAR_MAP_MAGIC:
        raise ValueError(f"{path}: not a planar map file")

    def fields(i, key):
        parts = lines[i].split()
        if parts[0] != key:
            raise ValueError(f"{path}: expected {key!r} on line {i + 1}")
        return parts[1:]

    rot = np.array([float(v) for v in fields(1, "rotation")]).reshape(3, 3)
    angles = np.array([float(v) for v in fields(2, "angles")])
    supports = np.array([float(v) for v in fields(3, "supports")])
    n = int(fields(4, "surfels")[0])
    surfels = []
    for ln in lines[5:5 + n]:
        v = ln.split()
        nums = [float(x) for x in v[:14]]
        surfels.append(Surfel(
            center=np.array(nums[0:3]), normal=np.array(nums[3:6]),
            axis1=np.array(nums[6:9]), axis2=np.array(nums[9:12]),
            len1=nums[12], len2=nums[13],
            direction_id=int(v[14]), keyframe_id=int(v[15])))
    pmap = PlanarMap(AtlantaFrame(rot, angles, supports), surfels)
    pmap.validate()
    return pmap


def export_mesh(mesh: Mesh, path: str) -> None:
    """ASCII OBJ or PLY by extension."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        with open(path, "w") as fh:
            for v in mesh.vertices:
                fh.write(f"v {_fmt(*v)}\n")
            for f in mesh.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    elif ext == ".ply":
        with open(path, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n"
                     f"element vertex {len(mesh.vertices)}\n"
                     "property float x\nproperty float y\nproperty float z\n"
                     f"element face {len(mesh.faces)}\n"
                     "property list uchar int vertex_indices\nend_header\n")
            for v in mesh.vertices:
                fh.write(f"{_fmt(*v)}\n")
            for f in mesh.faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")
    else:
        raise ValueError(f"unsupported mesh format {ext!r} for {path}")


def load_mesh(path: str) -> Mesh:
    ext = os.path.splitext(path)[1].lower()
    verts, faces = [], []
    if ext == ".obj":
        with open(path) as fh:
            for ln in fh:
                p = ln.split()
                if not p:
                    continue
                if p[0] == "v":
                    verts.append([float(x) for x in p[1:4]])
                elif p[0] == "f":
                    faces.append([int(x.split("/")[0]) - 1 for x in p[1:4]])
    elif ext == ".ply":
        with open(path) as fh:
            lines = fh.read().splitlines()
        nv = nf = 0
        for i, ln in enumerate(lines):
            p = ln.split()
            if p[:2] == ["element", "vertex"]:
                nv = int(p[2])
            elif p[:2] == ["element", "face"]:
                nf = int(p[2])
            elif p == ["end_header"]:
                body = lines[i + 1:]
                break
        else:
            raise ValueError(f"{path}: missing PLY header")
        verts = [[float(x) for x in ln.split()[:3]] for ln in body[:nv]]
        faces = [[int(x) for x in ln.split()[1:4]] for ln in body[nv:nv + nf]]
    else:
        raise ValueError(f"unsupported mesh format {ext!r} for {path}")
    V = np.array(verts, dtype=np.float64).reshape(-1, 3)
    F = np.array(faces, dtype=int).reshape(-1, 3)
    return Mesh(V, F)
