"""Atlanta-frame estimation from surface normals.

An Atlanta frame is one vertical direction v_v plus M horizontal directions,
all orthogonal to v_v.  It is parametrized by a rotation matrix whose first
column is v_v and second column the reference horizontal v_h1, and by angles
alpha_m about v_v (alpha_1 = 0).  Horizontal directions are line directions:
opposite wall normals are the same direction, so angles live mod 180 degrees.

Per keyframe, world-frame normals inside the horizon band (|n . v_v| below
sin(band)) vote in a 1-degree azimuth histogram; smoothed strict local maxima
become peaks; peaks are associated to known directions within assoc_deg and
refine them by support-weighted circular averaging, or are appended as new
directions when strong enough.  Directions are never removed and v_v stays
fixed after initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import is_rotation, rotation_about_axis, unit

BAND_DEG = 20.0  # horizon band half-width around the equator of v_v
ASSOC_DEG = 20.0  # peak-to-direction association threshold
SMOOTH_SIGMA_BINS = 2.0
N_BINS = 361  # 1-degree buckets spanning [-180, 180]


class AtlantaInitError(Exception):
    """Not enough structure in a frame to initialize the frame directions."""


def fold180(a):
    """Fold angles (deg) to [0, 180)."""
    return np.mod(a, 180.0)


def circdist180(a, b):
    """Distance between mod-180 line angles, in [0, 90]."""
    d = np.abs(fold180(a) - fold180(b))
    return np.minimum(d, 180.0 - d)


def horizon_basis(v_v: np.ndarray):
    """Deterministic in-plane basis (e1, e2) orthogonal to v_v.

    Azimuths measured in this basis are comparable across keyframes because
    the basis depends only on v_v.
    """
    v = unit(v_v)
    a = np.array([1.0, 0.0, 0.0])
    if abs(np.dot(v, a)) > 0.9:
        a = np.array([0.0, 1.0, 0.0])
    e1 = unit(a - np.dot(a, v) * v)
    return e1, np.cross(v, e1)


def azimuth_deg(dirs: np.ndarray, v_v: np.ndarray) -> np.ndarray:
    """World azimuth of directions (N, 3) in the horizon basis of v_v."""
    e1, e2 = horizon_basis(v_v)
    d = np.atleast_2d(dirs)
    return np.degrees(np.arctan2(d @ e2, d @ e1))


def direction_from_azimuth(az_deg: float, v_v: np.ndarray) -> np.ndarray:
    e1, e2 = horizon_basis(v_v)
    a = np.radians(az_deg)
    return np.cos(a) * e1 + np.sin(a) * e2


@dataclass
class DirectionHistogram:
    """Azimuth vote histogram: raw one-degree counts plus circular smoothing."""

    counts: np.ndarray  # (361,) raw votes, bin k centered at k - 180 deg
    smoothed: np.ndarray  # (360,) circularly smoothed, bins 360 and 0 merged
    total: int

    @property
    def folded_counts(self) -> np.ndarray:
        f = self.counts[:360].astype(np.float64).copy()
        f[0] += self.counts[360]
        return f

    @property
    def line_counts(self) -> np.ndarray:
        """Votes folded mod 180: bin k = line angle k degrees, k in [0, 180)."""
        f = self.folded_counts
        return f[:180] + f[180:]


def build_histogram(az_deg: np.ndarray, sigma_bins: float = SMOOTH_SIGMA_BINS) -> DirectionHistogram:
    bins = (np.round(az_deg).astype(int) + 180) % 361
    counts = np.bincount(bins, minlength=N_BINS)
    folded = counts[:360].astype(np.float64)
    folded[0] += counts[360]
    r = max(1, int(np.ceil(3.0 * sigma_bins)))
    x = np.arange(-r, r + 1)
    kern = np.exp(-0.5 * (x / sigma_bins) ** 2)
    kern /= kern.sum()
    padded = np.concatenate([folded[-r:], folded, folded[:r]])
    smoothed = np.convolve(padded, kern, mode="valid")
    return DirectionHistogram(counts, smoothed, int(counts.sum()))


@dataclass(frozen=True)
class Peak:
    angle_deg: float  # world line angle mod 180, in [0, 180)
    support: float  # raw votes within +- assoc/2 of the peak bin (both faces)


def detect_horizontal_peaks(
    normals_world: np.ndarray,
    v_v: np.ndarray,
    band_deg: float = BAND_DEG,
    sigma_bins: float = SMOOTH_SIGMA_BINS,
    min_support_abs: float = 300.0,
    min_support_frac: float = 0.02,
    support_halfwidth_bins: int = 10,
):
    """Peaks of the horizon-band normal histogram, as mod-180 line angles.

    Opposite faces of the same wall vote for the same line direction, so peak
    finding runs on the 180-bin folded histogram.  Returns (peaks sorted by
    support descending, histogram).  Support is the sum of raw votes within
    support_halfwidth_bins of the peak; the threshold is
    max(min_support_abs, min_support_frac * band population).  Peak angles
    are refined to sub-bin accuracy by parabolic interpolation.
    """
    v = unit(v_v)
    n = np.atleast_2d(normals_world)
    band = np.abs(n @ v) <= np.sin(np.radians(band_deg))
    nb = n[band]
    if len(nb) == 0:
        return [], build_histogram(np.empty(0))
    az = azimuth_deg(nb, v)
    hist = build_histogram(az, sigma_bins)
    line = hist.line_counts
    r = max(1, int(np.ceil(3.0 * sigma_bins)))
    x = np.arange(-r, r + 1)
    kern = np.exp(-0.5 * (x / sigma_bins) ** 2)
    kern /= kern.sum()
    padded = np.concatenate([line[-r:], line, line[:r]])
    s = np.convolve(padded, kern, mode="valid")
    left = np.roll(s, 1)
    right = np.roll(s, -1)
    is_peak = (s > left) & (s > right)
    thresh = max(min_support_abs, min_support_frac * hist.total)
    peaks = []
    w = support_halfwidth_bins
    for k in np.nonzero(is_peak)[0]:
        idx = (np.arange(k - w, k + w + 1)) % 180
        support = float(line[idx].sum())
        if support < thresh:
            continue
        denom = s[(k - 1) % 180] - 2.0 * s[k] + s[(k + 1) % 180]
        delta = 0.0
        if denom < 0:
            delta = float(np.clip(0.5 * (s[(k - 1) % 180] - s[(k + 1) % 180]) / denom, -0.5, 0.5))
        peaks.append(Peak(float(fold180(k + delta)), support))
    peaks.sort(key=lambda p: -p.support)
    return peaks, hist


@dataclass
class AtlantaFrame:
    """Global direction set: rotation (columns v_v, v_h1, v_v x v_h1) plus
    angles (deg, mod 180, angles[0] == 0) and accumulated supports."""

    rotation: np.ndarray
    angles: np.ndarray
    supports: np.ndarray

    @property
    def v_v(self) -> np.ndarray:
        return self.rotation[:, 0]

    @property
    def v_h1(self) -> np.ndarray:
        return self.rotation[:, 1]

    @property
    def n_horizontal(self) -> int:
        return len(self.angles)

    def horizontal_direction(self, m: int) -> np.ndarray:
        """World direction of horizontal index m (1-based)."""
        a = np.radians(self.angles[m - 1])
        return np.cos(a) * self.rotation[:, 1] + np.sin(a) * self.rotation[:, 2]

    def direction(self, i: int) -> np.ndarray:
        """Direction by id: 0 = vertical, i >= 1 = horizontal i."""
        return self.v_v if i == 0 else self.horizontal_direction(i)

    def all_directions(self) -> np.ndarray:
        return np.stack([self.direction(i) for i in range(self.n_horizontal + 1)])

    def validate(self, min_sep_deg: float = ASSOC_DEG) -> None:
        if not is_rotation(self.rotation):
            raise ValueError("AF rotation is not orthonormal")
        if len(self.angles) != len(self.supports) or len(self.angles) == 0:
            raise ValueError("angles/supports mismatch")
        if abs(self.angles[0]) > 1e-9:
            raise ValueError("reference angle must be zero")
        if np.any(self.angles < 0) or np.any(self.angles >= 180.0):
            raise ValueError("angles must lie in [0, 180)")
        for i in range(len(self.angles)):
            for j in range(i + 1, len(self.angles)):
                if circdist180(self.angles[i], self.angles[j]) <= min_sep_deg:
                    raise ValueError("horizontal directions closer than separation bound")

    def copy(self) -> "AtlantaFrame":
        return AtlantaFrame(self.rotation.copy(), self.angles.copy(), self.supports.copy())


@dataclass
class LocalAF:
    """Per-keyframe view: global frame snapshot + the direction ids observed
    in this keyframe (0 = vertical, m >= 1 = horizontal m)."""

    frame: AtlantaFrame
    observed: tuple[int, ...]

    def observed_directions(self) -> list[tuple[int, np.ndarray]]:
        return [(i, self.frame.direction(i)) for i in self.observed]


def vertical_support(normals_world: np.ndarray, v_v: np.ndarray,
                     band_deg: float = BAND_DEG) -> int:
    """Number of normals within band_deg of +-v_v."""
    n = np.atleast_2d(normals_world)
    return int(np.count_nonzero(np.abs(n @ unit(v_v)) >= np.cos(np.radians(band_deg))))


def _fibonacci_hemisphere(n: int, pole: np.ndarray) -> np.ndarray:
    """Roughly uniform directions on the hemisphere around `pole`."""
    i = np.arange(n)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = (i + 0.5) / n  # (0, 1): upper hemisphere in local frame
    r = np.sqrt(1.0 - z * z)
    local = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    p = unit(pole)
    a = np.array([1.0, 0.0, 0.0]) if abs(p[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = unit(np.cross(a, p))
    e2 = np.cross(p, e1)
    return local @ np.stack([e1, e2, p])


def initialize_global_af(
    normals_world: np.ndarray,
    camera_up_world: np.ndarray,
    band_deg: float = BAND_DEG,
    min_normals: int = 1000,
    min_support_abs: float = 300.0,
    min_support_frac: float = 0.02,
    n_candidates: int = 512,
    score_subsample: int = 8000,
) -> AtlantaFrame:
    """Bootstrap the frame from one keyframe's normals.

    Sweeps candidate vertical axes, keeps the one explaining the most normals
    as pole-aligned or equatorial, refines it on its pole inliers, picks the
    vertical among the implied orthogonal triad by the camera-up prior, and
    sets v_h1 from the strongest horizontal peak.
    """
    n = np.atleast_2d(normals_world)
    if len(n) < min_normals:
        raise AtlantaInitError(f"only {len(n)} valid normals (< {min_normals})")
    up = unit(camera_up_world)
    sub = n
    if len(n) > score_subsample:
        step = len(n) // score_subsample
        sub = n[::step]

    cand = _fibonacci_hemisphere(n_candidates, up)
    dots = np.abs(sub @ cand.T)  # (Nsub, C)
    cos_band = np.cos(np.radians(band_deg))
    sin_band = np.sin(np.radians(band_deg))
    score = (dots >= cos_band).sum(axis=0) + (dots <= sin_band).sum(axis=0)
    axis = cand[int(np.argmax(score))]

    for _ in range(3):  # refine on the polar cone
        d = n @ axis
        sel = np.abs(d) >= cos_band
        if not np.any(sel):
            break
        axis = unit((n[sel] * np.sign(d[sel])[:, None]).sum(axis=0))

    # orthogonal triad: refined axis + strongest equatorial peak
    peaks0, _ = detect_horizontal_peaks(
        n, axis, band_deg, min_support_abs=min_support_abs,
        min_support_frac=min_support_frac)
    triad = [axis]
    if peaks0:
        w1 = direction_from_azimuth(peaks0[0].angle_deg, axis)
        triad += [w1, np.cross(axis, w1)]
    align = [abs(float(np.dot(t, up))) for t in triad]
    v_v = triad[int(np.argmax(align))]
    if np.dot(v_v, up) < 0:
        v_v = -v_v

    peaks, _ = detect_horizontal_peaks(
        n, v_v, band_deg, min_support_abs=min_support_abs,
        min_support_frac=min_support_frac)
    if not peaks:
        raise AtlantaInitError("no horizontal peak to anchor the frame")
    az0 = fold180(peaks[0].angle_deg)
    v_h1 = direction_from_azimuth(az0, v_v)
    v_h1 = unit(v_h1 - np.dot(v_h1, v_v) * v_v)
    R = np.stack([v_v, v_h1, np.cross(v_v, v_h1)], axis=1)
    frame = AtlantaFrame(R, np.array([0.0]), np.array([peaks[0].support]))
    frame.validate()
    return frame


def _weighted_circular_mean_180(angles_deg, weights) -> float:
    """Support-weighted mean of mod-180 angles via the double-angle embedding."""
    th = np.radians(2.0 * np.asarray(angles_deg, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    c = float((w * np.cos(th)).sum())
    s = float((w * np.sin(th)).sum())
    if c * c + s * s < 1e-24:
        return float(fold180(angles_deg[0]))
    return float(fold180(np.degrees(np.arctan2(s, c)) / 2.0))


def associate_and_update(
    frame: AtlantaFrame,
    peaks: list[Peak],
    assoc_deg: float = ASSOC_DEG,
    min_new_support: float = 300.0,
):
    """Match peaks to known horizontal directions and refine, append new ones.

    Returns (updated frame, observed horizontal ids (1-based)).  Matching is
    nearest-by-mod-180-angle within assoc_deg; matched directions move to the
    support-weighted circular mean of their history and the new evidence.  A
    shift of the reference direction is realized by rotating the frame about
    v_v so alpha_1 stays 0.  Unmatched peaks with support >= min_new_support
    and clear of every existing direction become new directions.  The
    direction count never decreases and v_v never changes.
    """
    out = frame.copy()
    if not peaks:
        return out, ()
    phi0 = float(azimuth_deg(out.v_h1[None], out.v_v)[0])
    rel = np.array([fold180(p.angle_deg - phi0) for p in peaks])
    sup = np.array([p.support for p in peaks])

    M = out.n_horizontal
    matched: dict[int, list[int]] = {}
    new_idx = []
    for i in range(len(peaks)):
        d = circdist180(rel[i], out.angles)
        m = int(np.argmin(d))
        if d[m] <= assoc_deg:
            matched.setdefault(m, []).append(i)
        else:
            new_idx.append(i)

    observed = []
    dphi = 0.0
    for m, idxs in sorted(matched.items()):
        angs = [out.angles[m]] + [rel[i] for i in idxs]
        ws = [out.supports[m]] + [sup[i] for i in idxs]
        mu = _weighted_circular_mean_180(angs, ws)
        out.supports[m] += sum(sup[i] for i in idxs)
        if m == 0:
            # realize the reference shift as a rotation of the frame about v_v
            dphi = mu if mu <= 90.0 else mu - 180.0
        else:
            out.angles[m] = mu
        observed.append(m + 1)
    if dphi != 0.0:
        Rz = rotation_about_axis(out.v_v, np.radians(dphi))
        out.rotation = Rz @ out.rotation
        out.rotation[:, 0] = frame.v_v  # keep v_v bit-identical
        for m in range(1, M):
            out.angles[m] = fold180(out.angles[m] - dphi)

    # append new directions, strongest first, re-checking separation
    for i in sorted(new_idx, key=lambda i: -sup[i]):
        if sup[i] < min_new_support:
            continue
        a = fold180(rel[i] - dphi)
        if np.min(circdist180(a, out.angles)) <= assoc_deg:
            continue  # collides after refinement; try again next keyframe
        out.angles = np.append(out.angles, a)
        out.supports = np.append(out.supports, sup[i])
        observed.append(len(out.angles))

    out.validate(min_sep_deg=0.0)  # structural checks; separation handled above
    return out, tuple(sorted(observed))
