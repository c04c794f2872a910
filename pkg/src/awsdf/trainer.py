"""Continual training loop over a posed depth stream.

The engine owns the model, the optimizer, the global Atlanta frame and the
keyframe set.  Per incoming frame it decides keyframe membership with a
model-surprise test (fraction of ray samples already explained within a
tolerance), runs the per-keyframe structure pipeline (normals, AF update,
surfels, mask) on accepted frames, and always trains for a fixed number of
steps against a window of keyframes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import atlanta
from .atlanta import AtlantaFrame, AtlantaInitError, LocalAF
from .geom import CameraIntrinsics, NormalMap, Pose, compute_normal_map
from .losses import LossWeights, nonsurfel_loss_terms, surfel_loss_terms
from .model import AdamWState, SdfModel, adamw_step, loss_parameter_gradients
from .sampling import SurfelSamples, assemble_batch, sample_nonsurfel, sample_surfels
from .surfel import Surfel, extract_keyframe_surfels


@dataclass
class Keyframe:
    id: int
    depth: np.ndarray
    pose: Pose
    normal_map: NormalMap
    local_af: LocalAF
    surfels: list[Surfel]
    mask: np.ndarray
    camera_center: np.ndarray

    def validate(self) -> None:
        if self.mask.shape != self.depth.shape:
            raise ValueError("mask/depth shape mismatch")
        if self.normal_map.normals.shape[:2] != self.depth.shape:
            raise ValueError("normal map/depth shape mismatch")
        for s in self.surfels:
            s.validate(self.local_af.frame)


def compute_surfel_loss(f, G, v, weights: LossWeights) -> np.ndarray:
    """Per-point structured loss (zero-level pull + alignment + eikonal)."""
    f = np.atleast_1d(np.asarray(f, dtype=np.float64))
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    loss, _, _, _ = surfel_loss_terms(f, G, v, weights)
    return loss


def compute_nonsurfel_loss(f, G, b, g, weights: LossWeights,
                           grad_valid=None) -> np.ndarray:
    """Per-point ray-sample loss (near-surface / free-space split)."""
    f = np.atleast_1d(np.asarray(f, dtype=np.float64))
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    if grad_valid is None:
        grad_valid = np.ones(len(f), dtype=bool)
    loss, _, _, _ = nonsurfel_loss_terms(f, G, b, g, grad_valid, weights)
    return loss


def select_frames_for_step(
    keyframes: list[Keyframe], window: int, rng: np.random.Generator
) -> list[Keyframe]:
    """Newest keyframe plus window-1 uniform draws from the rest."""
    if not keyframes:
        return []
    if len(keyframes) <= window:
        return list(keyframes)
    older = rng.choice(len(keyframes) - 1, size=window - 1, replace=False)
    return [keyframes[i] for i in older] + [keyframes[-1]]


class Engine:
    """Online SDF reconstruction over a posed depth stream."""

    def __init__(
        self,
        K: CameraIntrinsics,
        seed: int = 7,
        # model / optimizer
        hidden: int = 128,
        n_hidden: int = 4,
        lr: float = 1.3e-3,
        weight_decay: float = 1.2e-2,
        # batch composition
        n_pixels: int = 24,
        n_strat: int = 19,
        n_surf: int = 8,
        d_min: float = 0.07,
        delta: float = 0.1,
        sigma_s: float = 0.1,
        surfel_share: float = 0.2,
        use_surfel_mask: bool = True,
        window: int = 5,
        iters_per_frame: int = 10,
        # keyframe criterion
        kf_check_every: int = 5,
        kf_tol: float = 0.05,
        kf_frac: float = 0.7,
        kf_check_pixels: int = 200,
        # structure extraction
        surfel_stride: int = 4,
        surfel_tau: float = 0.03,
        surfel_min_inliers: int = 500,
        surfel_candidates: int = 2000,
        surfel_min_side: float = 0.1,
        # AF estimation
        af_band_deg: float = 20.0,
        af_min_support: float = 300.0,
        af_min_support_frac: float = 0.02,
        weights: LossWeights | None = None,
        model: SdfModel | None = None,
    ):
        self.K = K
        self.rng = np.random.default_rng(seed)
        self.model = model or SdfModel.create(
            hidden=hidden, n_hidden=n_hidden, seed=seed
        )
        self.opt = AdamWState.create_for(self.model, lr=lr, weight_decay=weight_decay)
        self.weights = weights or LossWeights()
        self.af: AtlantaFrame | None = None
        self.keyframes: list[Keyframe] = []
        self.frames_seen = 0
        self.steps_done = 0
        self.step_budget: int | None = None
        self.n_pixels = n_pixels
        self.n_strat = n_strat
        self.n_surf = n_surf
        self.d_min = d_min
        self.delta = delta
        self.sigma_s = sigma_s
        self.surfel_share = surfel_share
        self.use_surfel_mask = use_surfel_mask
        self.window = window
        self.iters_per_frame = iters_per_frame
        self.kf_check_every = kf_check_every
        self.kf_tol = kf_tol
        self.kf_frac = kf_frac
        self.kf_check_pixels = kf_check_pixels
        self.surfel_stride = surfel_stride
        self.surfel_tau = surfel_tau
        self.surfel_min_inliers = surfel_min_inliers
        self.surfel_candidates = surfel_candidates
        self.surfel_min_side = surfel_min_side
        self.af_band_deg = af_band_deg
        self.af_min_support = af_min_support
        self.af_min_support_frac = af_min_support_frac

    # ------------------------------------------------------------ keyframes

    def _world_normals(self, nm: NormalMap, pose: Pose) -> np.ndarray:
        return nm.normals[nm.valid] @ pose.rotation.T

    def _update_af(self, nm: NormalMap, pose: Pose) -> tuple[int, ...]:
        """Init or refine the global frame; returns observed direction ids."""
        nw = self._world_normals(nm, pose)
        if self.af is None:
            self.af = atlanta.initialize_global_af(
                nw, pose.camera_up_world, band_deg=self.af_band_deg,
                min_support_abs=self.af_min_support,
                min_support_frac=self.af_min_support_frac,
            )
            observed_h = tuple(range(1, self.af.n_horizontal + 1))
        else:
            peaks, _ = atlanta.detect_horizontal_peaks(
                nw, self.af.v_v, band_deg=self.af_band_deg,
                min_support_abs=self.af_min_support,
                min_support_frac=self.af_min_support_frac,
            )
            self.af, observed_h = atlanta.associate_and_update(
                self.af, peaks, min_new_support=self.af_min_support
            )
        observed = list(observed_h)
        if atlanta.vertical_support(nw, self.af.v_v, self.af_band_deg) \
                >= self.af_min_support:
            observed = [0] + observed
        return tuple(observed)

    def _make_keyframe(self, depth: np.ndarray, pose: Pose) -> Keyframe:
        nm = compute_normal_map(depth, self.K)
        observed = self._update_af(nm, pose)
        local = LocalAF(self.af.copy(), observed)
        surfels, mask = extract_keyframe_surfels(
            depth, self.K, pose, nm, local, keyframe_id=len(self.keyframes),
            rng=self.rng, stride=self.surfel_stride, tau=self.surfel_tau,
            min_inliers=self.surfel_min_inliers,
            candidates=self.surfel_candidates, min_side=self.surfel_min_side,
        )
        return Keyframe(
            id=len(self.keyframes), depth=depth, pose=pose, normal_map=nm,
            local_af=local, surfels=surfels, mask=mask,
            camera_center=pose.camera_center,
        )

    def should_add_keyframe(self, depth: np.ndarray, pose: Pose) -> bool:
        """True when the model fails to explain this frame's geometry.

        Samples rays, computes bounds against the frame's own surface points
        and measures the fraction of samples with |f - b| < kf_tol.
        """
        if not np.any(depth > 0):
            return False
        s = sample_nonsurfel(
            depth, self.K, pose, None, self.kf_check_pixels, self.rng,
            n_strat=self.n_strat, n_surf=self.n_surf,
            d_min=self.d_min, delta=self.delta, sigma_s=self.sigma_s,
        )
        if len(s) == 0:
            return False
        batch = assemble_batch([s], SurfelSamples(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=int)))
        f = self.model.forward(batch.points)
        frac = float((np.abs(f - batch.bound) < self.kf_tol).mean())
        return frac < self.kf_frac

    def process_frame(self, depth: np.ndarray, pose: Pose,
                      train: bool = True) -> dict:
        """Ingest one posed depth frame; returns a status report."""
        if not (np.all(np.isfinite(pose.rotation))
                and np.all(np.isfinite(pose.translation))):
            raise ValueError("non-finite pose")
        i = self.frames_seen
        self.frames_seen += 1
        status = {"frame": i, "keyframe": False, "n_keyframes": len(self.keyframes)}

        if self.af is None:
            try:
                kf = self._make_keyframe(depth, pose)
            except AtlantaInitError as e:
                status["status"] = "af_pending"
                status["error"] = str(e)
                return status
            self.keyframes.append(kf)
            status["keyframe"] = True
            status["status"] = "init_keyframe"
        elif i % self.kf_check_every == 0 and self.should_add_keyframe(depth, pose):
            self.keyframes.append(self._make_keyframe(depth, pose))
            status["keyframe"] = True
            status["status"] = "keyframe_added"
        else:
            status["status"] = "skipped"

        iters = self.iters_per_frame
        if self.step_budget is not None:
            iters = min(iters, max(0, self.step_budget - self.steps_done))
        if train and self.keyframes and iters > 0:
            report = {}
            for _ in range(iters):
                report = self.train_step()
            status["loss"] = report.get("loss_total")
        status["n_keyframes"] = len(self.keyframes)
        return status

    # ------------------------------------------------------------- training

    def _sample_batch(self, frames: list[Keyframe]):
        rays = [
            sample_nonsurfel(
                kf.depth, self.K, kf.pose,
                kf.mask if self.use_surfel_mask else None,
                self.n_pixels, self.rng,
                n_strat=self.n_strat, n_surf=self.n_surf,
                d_min=self.d_min, delta=self.delta, sigma_s=self.sigma_s,
            )
            for kf in frames
        ]
        n_nonsurfel = sum(len(r) for r in rays)
        share = self.surfel_share
        n_surfel = int(round(n_nonsurfel * share / max(1e-9, 1.0 - share)))
        pool = [s for kf in frames for s in kf.surfels]
        per_surfel = self.n_strat + self.n_surf + 1
        if n_nonsurfel == 0 and pool:
            # frames fully covered by surfels: keep the step alive at the
            # size a normal frame's surfel share would have had
            n_surfel = int(round(len(frames) * self.n_pixels * per_surfel * share))
        surf = sample_surfels(pool, n_surfel, per_surfel, self.rng)
        return assemble_batch(rays, surf)

    def train_step(self) -> dict:
        if not self.keyframes:
            return {"status": "no_keyframes"}
        frames = select_frames_for_step(self.keyframes, self.window, self.rng)
        batch = self._sample_batch(frames)
        if len(batch.points) == 0:
            return {"status": "empty_batch"}
        total, terms, grads = loss_parameter_gradients(
            self.model, batch.to_loss_batch(), self.weights
        )
        adamw_step(self.model, grads, self.opt)
        self.steps_done += 1
        terms["status"] = "ok"
        terms["step"] = self.steps_done
        return terms

    def run_sequence(self, frames, total_steps: int | None = None) -> list[dict]:
        """Process an iterable of (timestamp, depth, pose).

        With total_steps set, the per-frame iteration count is adjusted so the
        whole sequence consumes about that many optimizer steps.
        """
        frames = list(frames)
        if total_steps is not None and frames:
            self.step_budget = self.steps_done + total_steps
            self.iters_per_frame = max(1, round(total_steps / len(frames)))
        reports = []
        for _, depth, pose in frames:
            reports.append(self.process_frame(depth, pose))
        return reports
