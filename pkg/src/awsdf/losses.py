"""SDF training losses and their analytic derivatives.

Two point classes share a batch:
  - structured ("surfel") points: sampled on planar patches, zero-level L1 pull
    plus gradient alignment to the patch's world direction plus eikonal term;
  - unstructured points: sampled along camera rays, supervised against a signed
    nearest-surface bound. Near the surface (|bound| < trunc_near) the bound is
    treated as the SDF value and an approximate gradient direction is enforced;
    in free space the value is only bounded from above, with an exponential
    barrier against negative predictions.

Every function returns per-point loss values together with the per-point
cotangents (d loss_i / d f_i, d loss_i / d grad_i) so a caller can scale them
by its own reduction weights and feed them to the model's backward pass.
Loss math runs in float64 regardless of model dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

GRAD_EPS = 1e-12  # below this gradient norm the cosine term is skipped
FREE_EXP_CLIP = 50.0  # cap on the barrier exponent to keep float32 finite


@dataclass(frozen=True)
class LossWeights:
    """Per-term weights for both point classes plus loss shape parameters."""

    sdf_surfel: float = 1.0
    grad_surfel: float = 0.4
    eik_surfel: float = 0.2
    sdf_ray: float = 1.0
    grad_ray: float = 0.4
    eik_ray: float = 0.2
    beta_free: float = 5.0  # exponent of the free-space barrier
    trunc_near: float = 0.1  # meters; |bound| below this counts as near-surface

    def surfel_only(self) -> "LossWeights":
        return replace(self, sdf_ray=0.0, grad_ray=0.0, eik_ray=0.0)

    def nonsurfel_only(self) -> "LossWeights":
        return replace(self, sdf_surfel=0.0, grad_surfel=0.0, eik_surfel=0.0)


@dataclass
class LossBatch:
    """Inputs the losses need, one row per sample point.

    bound is 0 for surfel points.  grad_target is the Atlanta direction for
    surfel points and the approximate surface-offset direction otherwise;
    grad_valid marks rows where that direction is usable.
    """

    points: np.ndarray  # (N, 3)
    is_surfel: np.ndarray  # (N,) bool
    bound: np.ndarray  # (N,)
    grad_target: np.ndarray  # (N, 3) unit rows where valid
    grad_valid: np.ndarray  # (N,) bool

    def __len__(self) -> int:
        return len(self.points)


def _norm_terms(G: np.ndarray):
    """Shared eikonal/cosine plumbing. Returns (|G|, unit G, nonzero mask)."""
    gn = np.linalg.norm(G, axis=1)
    ok = gn > GRAD_EPS
    Gu = np.zeros_like(G)
    np.divide(G, gn[:, None], out=Gu, where=ok[:, None])
    return gn, Gu, ok


def _eikonal(G, gn, Gu, ok):
    """|  |G| - 1 | and its dG. Zero subgradient at G = 0."""
    val = np.abs(gn - 1.0)
    dG = np.sign(gn - 1.0)[:, None] * Gu
    dG[~ok] = 0.0
    return val, dG


def _cosine_distance(G, gn, Gu, ok, target):
    """1 - cos(G, target) with dG; rows with |G| ~ 0 contribute nothing."""
    cos = np.einsum("ij,ij->i", Gu, target)
    val = np.where(ok, 1.0 - cos, 0.0)
    # d cos/dG = target/|G| - cos * G/|G|^2
    dG = np.zeros_like(G)
    np.divide(target - cos[:, None] * Gu, gn[:, None], out=dG, where=ok[:, None])
    return val, -dG, ok


def surfel_loss_terms(f, G, target, w: LossWeights):
    """Structured-point loss: w_sdf |f| + w_grad (1 - cos) + w_eik eikonal.

    f: (N,) predictions at on-surfel points, G: (N, 3) input gradients,
    target: (N, 3) unit world directions of the owning surfels.
    Returns (loss (N,), dloss/df (N,), dloss/dG (N, 3), info dict).
    """
    f = np.asarray(f, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    gn, Gu, ok = _norm_terms(G)

    l_sdf = np.abs(f)
    d_sdf = np.sign(f)
    l_cos, dG_cos, cos_ok = _cosine_distance(G, gn, Gu, ok, target)
    l_eik, dG_eik = _eikonal(G, gn, Gu, ok)

    loss = w.sdf_surfel * l_sdf + w.grad_surfel * l_cos + w.eik_surfel * l_eik
    fbar = w.sdf_surfel * d_sdf
    Gbar = w.grad_surfel * dG_cos + w.eik_surfel * dG_eik
    info = {
        "surfel_sdf": l_sdf,
        "surfel_grad": l_cos,
        "surfel_eik": l_eik,
        "n_cos_skipped": int(np.count_nonzero(~cos_ok)),
    }
    return loss, fbar, Gbar, info


def nonsurfel_loss_terms(f, G, bound, target, grad_valid, w: LossWeights):
    """Ray-point loss with near-surface / free-space split on |bound|.

    Near surface: L1 to the bound, cosine to the approximate gradient where it
    is valid, eikonal. Free space: max(0, exp(-beta f) - 1, f - bound) plus
    eikonal; no gradient-direction supervision.
    """
    f = np.asarray(f, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    bound = np.asarray(bound, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    near = np.abs(bound) < w.trunc_near

    gn, Gu, ok = _norm_terms(G)
    l_eik, dG_eik = _eikonal(G, gn, Gu, ok)
    l_cos, dG_cos, cos_ok = _cosine_distance(G, gn, Gu, ok, target)
    use_cos = near & grad_valid

    # near: |f - b|
    diff = f - bound
    l_near = np.abs(diff)
    d_near = np.sign(diff)

    # free: hinge above the bound with an exponential barrier below zero
    ez = np.minimum(-w.beta_free * f, FREE_EXP_CLIP)
    barrier = np.exp(ez) - 1.0
    l_free = np.maximum(0.0, np.maximum(barrier, diff))
    d_free = np.where(
        l_free <= 0.0,
        0.0,
        np.where(barrier >= diff, -w.beta_free * np.exp(ez), 1.0),
    )

    l_sdf = np.where(near, l_near, l_free)
    d_sdf = np.where(near, d_near, d_free)

    loss = (
        w.sdf_ray * l_sdf
        + w.grad_ray * np.where(use_cos, l_cos, 0.0)
        + w.eik_ray * l_eik
    )
    fbar = w.sdf_ray * d_sdf
    Gbar = w.grad_ray * np.where(use_cos[:, None], dG_cos, 0.0) + w.eik_ray * dG_eik
    info = {
        "nonsurfel_sdf": l_sdf,
        "nonsurfel_grad": np.where(use_cos, l_cos, 0.0),
        "nonsurfel_eik": l_eik,
        "n_near": int(np.count_nonzero(near)),
        "n_free": int(np.count_nonzero(~near)),
        "n_cos_skipped": int(np.count_nonzero(use_cos & ~cos_ok)),
    }
    return loss, fbar, Gbar, info


def batch_loss_terms(f, G, batch: LossBatch, w: LossWeights):
    """Evaluate both classes over a mixed batch.

    Returns (total, terms, fbar, Gbar) where total is the sum of per-class
    means, fbar/Gbar already carry the 1/N_class factors, and terms holds the
    per-term means and bookkeeping counts for reporting.
    """
    n = len(batch)
    f = np.asarray(f, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    s = np.asarray(batch.is_surfel, dtype=bool)
    ns = ~s
    fbar = np.zeros(n)
    Gbar = np.zeros((n, 3))
    terms: dict[str, float] = {}
    total = 0.0

    n_ns = int(np.count_nonzero(ns))
    if n_ns:
        loss, fb, Gb, info = nonsurfel_loss_terms(
            f[ns], G[ns], batch.bound[ns], batch.grad_target[ns],
            batch.grad_valid[ns], w,
        )
        total += float(loss.mean())
        fbar[ns] = fb / n_ns
        Gbar[ns] = Gb / n_ns
        terms["loss_nonsurfel"] = float(loss.mean())
        for k in ("nonsurfel_sdf", "nonsurfel_grad", "nonsurfel_eik"):
            terms[k] = float(info[k].mean())
        terms["n_near"] = info["n_near"]
        terms["n_free"] = info["n_free"]
        terms["n_cos_skipped"] = info["n_cos_skipped"]

    n_s = int(np.count_nonzero(s))
    if n_s:
        loss, fb, Gb, info = surfel_loss_terms(
            f[s], G[s], batch.grad_target[s], w
        )
        total += float(loss.mean())
        fbar[s] = fb / n_s
        Gbar[s] = Gb / n_s
        terms["loss_surfel"] = float(loss.mean())
        for k in ("surfel_sdf", "surfel_grad", "surfel_eik"):
            terms[k] = float(info[k].mean())
        terms["n_cos_skipped"] = terms.get("n_cos_skipped", 0) + info["n_cos_skipped"]

    terms["loss_total"] = total
    terms["n_surfel"] = n_s
    terms["n_nonsurfel"] = n_ns
    return total, terms, fbar, Gbar
