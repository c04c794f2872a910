"""Synthetic Atlanta-world scenes with an analytic SDF oracle, plus sequence I/O.

A scene is a room shell (box with wall thickness) cut by optional extra wall
boxes, solid furniture boxes, and free-standing rectangles.  All primitives
are axis-aligned up to a rotation about the world vertical (+z), so the scene
has an exact ground-truth Atlanta frame.  The same primitives drive both the
depth renderer (ray casting) and the signed-distance oracle, which makes the
two mutually consistent by construction.

Sign convention: free space positive, inside solid matter negative.  The
renderer's depth images store z-depth in meters (ray parameter t equals
z-depth because camera rays are scaled to unit z).

On-disk sequence layout:
    intrinsics.txt   one line: fx fy cx cy width height
    poses.txt        per frame: timestamp tx ty tz qx qy qz qw  (world-from-camera)
    depth/000000.png 16-bit grayscale, millimeters, 0 = invalid
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np
import yaml
from PIL import Image

from .geom import (
    CameraIntrinsics,
    Pose,
    quat_xyzw_from_rotation,
    rotation_from_quat_xyzw,
    unit,
)

RAY_EPS = 1e-9


class SequenceError(Exception):
    """Raised for malformed sequence directories."""


# ------------------------------------------------------------------ primitives


@dataclass(frozen=True)
class BoxSpec:
    """Solid box: AF-aligned axes rotated by azimuth_deg about world +z."""

    center: tuple[float, float, float]
    half: tuple[float, float, float]
    azimuth_deg: float = 0.0

    def rotation_z(self) -> np.ndarray:
        a = np.radians(self.azimuth_deg)
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def corners(self) -> np.ndarray:
        h = np.asarray(self.half)
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float
        )
        return (signs * h) @ self.rotation_z().T + np.asarray(self.center)


@dataclass(frozen=True)
class RectSpec:
    """Free-standing rectangle: center, unit normal, unit in-plane axis1.

    axis2 = normal x axis1.  len1/len2 are full side lengths along axis1/axis2.
    """

    center: tuple[float, float, float]
    normal: tuple[float, float, float]
    axis1: tuple[float, float, float]
    len1: float
    len2: float

    def frame(self):
        n = unit(np.asarray(self.normal))
        s1 = unit(np.asarray(self.axis1))
        if abs(np.dot(n, s1)) > 1e-9:
            raise ValueError("rectangle axis1 must be orthogonal to normal")
        return np.asarray(self.center, float), n, s1, np.cross(n, s1)


@dataclass
class SceneSpec:
    """Scene description plus its ground-truth Atlanta frame.

    room is the inner air volume; walls/floor/ceiling are the shell of
    wall_thickness around it.  gt_horizontal_angles_deg are the scene's
    horizontal directions as azimuths mod 180 relative to world +x.
    """

    name: str
    room: BoxSpec | None = None
    wall_thickness: float = 0.3
    solids: list[BoxSpec] = field(default_factory=list)
    rects: list[RectSpec] = field(default_factory=list)
    gt_vertical: tuple[float, float, float] = (0.0, 0.0, 1.0)
    gt_horizontal_angles_deg: list[float] = field(default_factory=list)

    def bounds(self, margin: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        pts = []
        if self.room is not None:
            outer = BoxSpec(
                self.room.center,
                tuple(np.asarray(self.room.half) + self.wall_thickness),
                self.room.azimuth_deg,
            )
            pts.append(outer.corners())
        for b in self.solids:
            pts.append(b.corners())
        for r in self.rects:
            c, n, s1, s2 = r.frame()
            for a in (-0.5, 0.5):
                for b2 in (-0.5, 0.5):
                    pts.append((c + a * r.len1 * s1 + b2 * r.len2 * s2)[None])
        if not pts:
            raise ValueError("empty scene")
        allp = np.concatenate(pts, axis=0)
        return allp.min(axis=0) - margin, allp.max(axis=0) + margin

    def inner_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounds of the room air volume (falls back to bounds())."""
        if self.room is None:
            return self.bounds()
        c, h = np.asarray(self.room.center), np.asarray(self.room.half)
        return c - h, c + h


# ---------------------------------------------------------------- box geometry


def _to_box_frame(box: BoxSpec, p: np.ndarray) -> np.ndarray:
    Rz = box.rotation_z()
    return (p - np.asarray(box.center)) @ Rz


def _box_sdf_grad(box: BoxSpec, X: np.ndarray):
    """Exact box SDF and a subgradient choice, vectorized over points."""
    Rz = box.rotation_z()
    p = _to_box_frame(box, X)
    h = np.asarray(box.half)
    q = np.abs(p) - h
    qp = np.maximum(q, 0.0)
    outside = np.linalg.norm(qp, axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    sdf = outside + inside

    g_local = np.zeros_like(p)
    out_mask = outside > 0
    np.divide(qp * np.sign(p), outside[:, None], out=g_local, where=out_mask[:, None])
    if np.any(~out_mask):
        k = np.argmax(q[~out_mask], axis=1)
        g_in = np.zeros((int((~out_mask).sum()), 3))
        g_in[np.arange(len(k)), k] = np.sign(p[~out_mask, :][np.arange(len(k)), k])
        g_local[~out_mask] = g_in
    return sdf, g_local @ Rz.T


def _ray_box(box: BoxSpec, o: np.ndarray, d: np.ndarray):
    """Slab test.  o (3,), d (N, 3) unnormalized.  Returns (t_enter, t_exit)."""
    Rz = box.rotation_z()
    ol = (o - np.asarray(box.center)) @ Rz
    dl = d @ Rz
    h = np.asarray(box.half)
    dl = np.where(np.abs(dl) < 1e-12, 1e-12, dl)
    t1 = (-h - ol) / dl
    t2 = (h - ol) / dl
    t_enter = np.minimum(t1, t2).max(axis=1)
    t_exit = np.maximum(t1, t2).min(axis=1)
    return t_enter, t_exit


def point_rect_distance_batch(X: np.ndarray, center, n, s1, s2, l1, l2):
    """Distance from points to a finite rectangle, plus closest points."""
    rel = X - center
    a = np.clip(rel @ s1, -l1 / 2, l1 / 2)
    b = np.clip(rel @ s2, -l2 / 2, l2 / 2)
    closest = center + a[:, None] * s1 + b[:, None] * s2
    return np.linalg.norm(X - closest, axis=1), closest


# ----------------------------------------------------------------- scene oracle


def scene_sdf(scene: SceneSpec, X: np.ndarray):
    """Analytic signed distance and gradient of the scene at points (N, 3).

    Solids compose by min; the room shell is max(outer, -inner).  Exact in
    free space for disjoint solids; inside matter the magnitude can shrink
    near solid-solid seams (documented oracle behavior).  Free-standing
    rectangles contribute unsigned distance.  Gradients pick the active
    branch; at equidistant seams an arbitrary active branch wins.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    vals = []
    grads = []
    if scene.room is not None:
        outer = BoxSpec(
            scene.room.center,
            tuple(np.asarray(scene.room.half) + scene.wall_thickness),
            scene.room.azimuth_deg,
        )
        so, go = _box_sdf_grad(outer, X)
        si, gi = _box_sdf_grad(scene.room, X)
        shell = np.maximum(so, -si)
        gsh = np.where((so >= -si)[:, None], go, -gi)
        vals.append(shell)
        grads.append(gsh)
    for b in scene.solids:
        s, g = _box_sdf_grad(b, X)
        vals.append(s)
        grads.append(g)
    for r in scene.rects:
        c, n, s1, s2 = r.frame()
        dist, closest = point_rect_distance_batch(X, c, n, s1, s2, r.len1, r.len2)
        g = np.zeros_like(X)
        np.divide(X - closest, dist[:, None], out=g, where=(dist > 1e-12)[:, None])
        vals.append(dist)
        grads.append(g)
    V = np.stack(vals, axis=0)
    k = np.argmin(V, axis=0)
    idx = np.arange(X.shape[0])
    G = np.stack(grads, axis=0)
    return V[k, idx], G[k, idx]


# --------------------------------------------------------------------- renderer


def render_depth(
    scene: SceneSpec,
    pose: Pose,
    K: CameraIntrinsics,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Ray-cast a depth image (meters, z-depth, 0 where no hit)."""
    dirs = K.ray_dirs_cam().reshape(-1, 3) @ pose.rotation.T
    o = pose.translation
    t_best = np.full(dirs.shape[0], np.inf)

    if scene.room is not None:
        # camera inside the air volume sees the shell where rays exit it
        t_en, t_ex = _ray_box(scene.room, o, dirs)
        hit = (t_ex > RAY_EPS) & (t_en < t_ex)
        t_best = np.where(hit, np.where(t_ex > RAY_EPS, t_ex, np.inf), t_best)
    for b in scene.solids:
        t_en, t_ex = _ray_box(b, o, dirs)
        hit = (t_ex >= t_en) & (t_ex > RAY_EPS)
        t_hit = np.where(t_en > RAY_EPS, t_en, t_ex)  # outside: entry; inside: exit
        t_best = np.minimum(t_best, np.where(hit, t_hit, np.inf))
    for r in scene.rects:
        c, n, s1, s2 = r.frame()
        denom = dirs @ n
        denom = np.where(np.abs(denom) < 1e-15, 1e-15, denom)
        t = ((c - o) @ n) / denom
        p = o + t[:, None] * dirs
        rel = p - c
        ok = (
            (t > RAY_EPS)
            & (np.abs(rel @ s1) <= r.len1 / 2)
            & (np.abs(rel @ s2) <= r.len2 / 2)
        )
        t_best = np.minimum(t_best, np.where(ok, t, np.inf))

    depth = np.where(np.isfinite(t_best), t_best, 0.0).reshape(K.height, K.width)
    if noise_sigma > 0:
        rng = rng or np.random.default_rng(0)
        depth = np.where(
            depth > 0, np.maximum(depth + rng.normal(0, noise_sigma, depth.shape), 1e-3), 0.0
        )
    return depth


# ------------------------------------------------------------------ trajectories


def make_lookat_pose(position, forward, up_hint=(0.0, 0.0, 1.0)) -> Pose:
    """Pose whose camera looks along `forward` with image up toward up_hint."""
    f = unit(np.asarray(forward, float))
    right = np.cross(f, np.asarray(up_hint, float))
    right = unit(right)
    down = np.cross(f, right)
    R = np.stack([right, down, f], axis=1)
    return Pose(R, np.asarray(position, float))


def orbit_trajectory(
    n_frames: int,
    center_xy=(0.0, 0.0),
    radius: float = 1.0,
    height: float = 1.3,
    pitch_deg: float = 18.0,
    pitch_sweep_deg: float = 0.0,
    inward_every: int = 0,
) -> list[Pose]:
    """Circular path looking outward, pitched down; one full turn.

    pitch_sweep_deg oscillates the pitch over the turn (three cycles) so the
    camera also looks up; without it the ceiling of a room is never observed.
    inward_every > 0 turns every n-th frame around to face across the orbit
    center; a purely outward loop leaves the central column of a room without
    any ray coverage.
    """
    poses = []
    for i in range(n_frames):
        th = 2.0 * np.pi * i / n_frames
        p = np.radians(pitch_deg - pitch_sweep_deg * np.sin(3.0 * th))
        az = th + (np.pi if inward_every and (i + 1) % inward_every == 0 else 0.0)
        pos = np.array([center_xy[0] + radius * np.cos(th),
                        center_xy[1] + radius * np.sin(th), height])
        fwd = np.array([np.cos(az) * np.cos(p), np.sin(az) * np.cos(p), -np.sin(p)])
        poses.append(make_lookat_pose(pos, fwd))
    return poses


# ------------------------------------------------------------------ scene zoo


def aw_apartment() -> SceneSpec:
    """Default test scene: 5 x 4 x 2.7 m room, one 45-degree wall cutting the
    NE corner, two furniture boxes, and a 3-step staircase along the west wall.

    Ground-truth horizontal directions: 0, 90, 45 degrees (mod 180)."""
    room = BoxSpec(center=(0.0, 0.0, 1.35), half=(2.5, 2.0, 1.35))
    diag = BoxSpec(center=(1.7, 1.2, 1.35), half=(1.2, 0.08, 1.35), azimuth_deg=-45.0)
    table = BoxSpec(center=(1.5, -1.2, 0.3), half=(0.5, 0.35, 0.3))
    cabinet = BoxSpec(center=(-1.8, 1.2, 0.5), half=(0.3, 0.5, 0.5))
    stairs = [
        BoxSpec(center=(-2.35, -0.8, 0.27), half=(0.15, 0.45, 0.27)),
        BoxSpec(center=(-2.05, -0.8, 0.18), half=(0.15, 0.45, 0.18)),
        BoxSpec(center=(-1.75, -0.8, 0.09), half=(0.15, 0.45, 0.09)),
    ]
    return SceneSpec(
        name="aw-apartment",
        room=room,
        wall_thickness=0.3,
        solids=[diag, table, cabinet] + stairs,
        gt_horizontal_angles_deg=[0.0, 90.0, 45.0],
    )


DEFAULT_INTRINSICS = CameraIntrinsics(
    fx=160.0, fy=160.0, cx=159.5, cy=119.5, width=320, height=240
)


def builtin_scene(name: str) -> SceneSpec:
    if name == "aw-apartment":
        return aw_apartment()
    raise KeyError(f"unknown built-in scene '{name}'")


# ------------------------------------------------------------------ sequences


class SequenceSource:
    """Posed depth stream: constant intrinsics, frames in timestamp order."""

    def __init__(self, K: CameraIntrinsics, timestamps, poses, depth_provider):
        ts = list(timestamps)
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise SequenceError("timestamps must be strictly increasing")
        self.K = K
        self.timestamps = ts
        self.poses = list(poses)
        self._depth = depth_provider  # callable index -> (H, W) float meters
        if len(self.poses) != len(self.timestamps):
            raise SequenceError("pose/timestamp count mismatch")

    def __len__(self) -> int:
        return len(self.timestamps)

    def depth(self, i: int) -> np.ndarray:
        return self._depth(i)

    def frames(self):
        for i in range(len(self)):
            yield self.timestamps[i], self.depth(i), self.poses[i]


def synth_sequence(
    scene: SceneSpec,
    n_frames: int = 300,
    K: CameraIntrinsics = DEFAULT_INTRINSICS,
    noise_sigma: float = 0.0,
    fps: float = 30.0,
    orbit_kw: dict | None = None,
) -> SequenceSource:
    """Render-on-demand orbit sequence through a scene (cached per frame)."""
    kw = dict(center_xy=(-0.5, -0.3), radius=1.0, height=1.3, pitch_deg=18.0,
              pitch_sweep_deg=45.0, inward_every=3)
    kw.update(orbit_kw or {})
    poses = orbit_trajectory(n_frames, **kw)
    cache: dict[int, np.ndarray] = {}  # small FIFO so re-reads are cheap

    def provider(i: int) -> np.ndarray:
        if i not in cache:
            rng = np.random.default_rng(900_000 + i) if noise_sigma > 0 else None
            if len(cache) >= 16:
                cache.pop(next(iter(cache)))
            cache[i] = render_depth(scene, poses[i], K, noise_sigma, rng)
        return cache[i]

    ts = [i / fps for i in range(n_frames)]
    return SequenceSource(K, ts, poses, provider)


def write_sequence(seq: SequenceSource, directory: str) -> None:
    """Write intrinsics.txt, poses.txt and depth/NNNNNN.png (16-bit mm)."""
    os.makedirs(os.path.join(directory, "depth"), exist_ok=True)
    K = seq.K
    with open(os.path.join(directory, "intrinsics.txt"), "w") as f:
        f.write(f"{K.fx} {K.fy} {K.cx} {K.cy} {K.width} {K.height}\n")
    with open(os.path.join(directory, "poses.txt"), "w") as f:
        for i, (t, pose) in enumerate(zip(seq.timestamps, seq.poses)):
            q = quat_xyzw_from_rotation(pose.rotation)
            tx, ty, tz = pose.translation
            f.write(
                f"{t:.6f} {tx:.9f} {ty:.9f} {tz:.9f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n"
            )
    for i in range(len(seq)):
        d = seq.depth(i)
        mm = np.clip(np.round(d * 1000.0), 0, 65535).astype(np.uint16)
        Image.fromarray(mm).save(os.path.join(directory, "depth", f"{i:06d}.png"))


def load_sequence(directory: str) -> SequenceSource:
    """Load a sequence directory (see module docstring for the layout)."""
    intr = os.path.join(directory, "intrinsics.txt")
    posef = os.path.join(directory, "poses.txt")
    for p in (intr, posef):
        if not os.path.isfile(p):
            raise SequenceError(f"missing file: {p}")
    with open(intr) as f:
        vals = f.read().split()
    if len(vals) != 6:
        raise SequenceError(f"intrinsics.txt needs 6 values, got {len(vals)}")
    K = CameraIntrinsics(
        float(vals[0]), float(vals[1]), float(vals[2]), float(vals[3]),
        int(vals[4]), int(vals[5]),
    )
    timestamps, poses = [], []
    with open(posef) as f:
        for ln, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 8:
                raise SequenceError(f"poses.txt line {ln}: expected 8 fields")
            t, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
            q = np.array([qx, qy, qz, qw])
            if abs(np.linalg.norm(q) - 1.0) > 1e-3:
                raise SequenceError(f"poses.txt line {ln}: quaternion not normalized")
            if timestamps and t <= timestamps[-1]:
                raise SequenceError(f"poses.txt line {ln}: timestamps not increasing")
            timestamps.append(t)
            poses.append(Pose(rotation_from_quat_xyzw(q), np.array([tx, ty, tz])))
    ddir = os.path.join(directory, "depth")
    files = sorted(os.listdir(ddir)) if os.path.isdir(ddir) else []
    files = [f for f in files if f.endswith(".png")]
    if len(files) != len(poses):
        raise SequenceError(
            f"{len(poses)} poses but {len(files)} depth images in {ddir}"
        )
    paths = [os.path.join(ddir, f) for f in files]

    def provider(i: int) -> np.ndarray:
        arr = np.asarray(Image.open(paths[i]), dtype=np.float64)
        return arr / 1000.0

    return SequenceSource(K, timestamps, poses, provider)


# ------------------------------------------------------------- scene spec files


def scene_to_yaml(scene: SceneSpec, path: str) -> None:
    doc = {
        "name": scene.name,
        "wall_thickness": scene.wall_thickness,
        "room": dataclasses.asdict(scene.room) if scene.room else None,
        "solids": [dataclasses.asdict(b) for b in scene.solids],
        "rects": [dataclasses.asdict(r) for r in scene.rects],
        "gt_vertical": list(scene.gt_vertical),
        "gt_horizontal_angles_deg": list(scene.gt_horizontal_angles_deg),
    }
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=True)


def scene_from_yaml(path: str) -> SceneSpec:
    with open(path) as f:
        doc = yaml.safe_load(f)

    def box(d):
        return BoxSpec(tuple(d["center"]), tuple(d["half"]), d.get("azimuth_deg", 0.0))

    return SceneSpec(
        name=doc["name"],
        room=box(doc["room"]) if doc.get("room") else None,
        wall_thickness=doc.get("wall_thickness", 0.3),
        solids=[box(b) for b in doc.get("solids") or []],
        rects=[
            RectSpec(
                tuple(r["center"]), tuple(r["normal"]), tuple(r["axis1"]),
                r["len1"], r["len2"],
            )
            for r in doc.get("rects") or []
        ],
        gt_vertical=tuple(doc.get("gt_vertical", (0, 0, 1))),
        gt_horizontal_angles_deg=list(doc.get("gt_horizontal_angles_deg", [])),
    )
