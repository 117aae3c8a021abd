"""Geometric pattern consistency between two images.

Local descriptors are matched into point correspondences, matched coordinates
are normalized per side, and a projective homography is estimated with
RANSAC.  The inlier count n and inlier ratio omega summarize how much of the
pattern agrees geometrically; the reid module folds them into the final
distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .seeding import derive_seed

# Candidate models fitted per vectorized RANSAC round.
RANSAC_CHUNK = 128
# Triangle areas below this (in normalized coordinates) mark a degenerate sample.
COLLINEAR_EPS = 1e-9

RATIO_DENOMINATORS = ("matches", "all_points")


class GeometryError(ValueError):
    """Degenerate geometric configuration."""


@dataclass
class Correspondence:
    """One matched patch pair, carrying the frame centers of both features."""

    query_point: Tuple[float, float]
    db_point: Tuple[float, float]
    descriptor_distance: float
    query_index: int = -1
    db_index: int = -1


@dataclass
class PointTransform:
    """Centroid/scale pair that maps original points to normalized ones."""

    centroid: np.ndarray
    scale: float
    degenerate: bool = False


@dataclass
class Homography:
    """3x3 projective transform, scaled so h33 = 1 when possible.

    When |h33| is numerically zero the matrix is scaled to unit Frobenius
    norm instead and frobenius_scaled is set.
    """

    matrix: np.ndarray
    frobenius_scaled: bool = False


@dataclass
class GeomVerdict:
    """Inlier statistics of a verified pair.

    omega is n over the correspondences entering RANSAC (or over the smaller
    feature count when the alternative denominator is selected); both are 0
    when no homography was estimable.
    """

    n: int
    omega: float
    homography: Optional[Homography]
    inlier_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def match_descriptors(
    query,
    db,
    max_distance: float = 0.9,
    mutual: bool = True,
    ratio: Optional[float] = None,
) -> list:
    """Match query descriptors to database descriptors by cosine distance.

    Each query descriptor pairs with its nearest database descriptor; a pair
    is kept when its distance is <= max_distance, when (with mutual set) the
    database descriptor's nearest query descriptor closes the cycle, and when
    (with ratio set) it passes a nearest/second-nearest ratio test.  Output
    is sorted by ascending distance, ties by (query index, db index).
    """
    desc_q = np.asarray(query.descriptors, dtype=np.float64)
    desc_d = np.asarray(db.descriptors, dtype=np.float64)
    if desc_q.shape[0] == 0 or desc_d.shape[0] == 0:
        return []
    dist = 1.0 - desc_q @ desc_d.T
    nn_of_q = np.argmin(dist, axis=1)
    iq = np.arange(desc_q.shape[0])
    d = dist[iq, nn_of_q]
    keep = d <= max_distance
    if mutual:
        nn_of_d = np.argmin(dist, axis=0)
        keep &= nn_of_d[nn_of_q] == iq
    if ratio is not None and desc_d.shape[0] >= 2:
        second = np.partition(dist, 1, axis=1)[:, 1]
        keep &= d <= ratio * second
    iq, idb, d = iq[keep], nn_of_q[keep], d[keep]
    order = np.lexsort((idb, iq, d))
    pts_q = query.points
    pts_d = db.points
    matches = []
    for i in order:
        a, b = int(iq[i]), int(idb[i])
        matches.append(
            Correspondence(
                query_point=(float(pts_q[a, 0]), float(pts_q[a, 1])),
                db_point=(float(pts_d[b, 0]), float(pts_d[b, 1])),
                descriptor_distance=float(d[i]),
                query_index=a,
                db_index=b,
            )
        )
    return matches


def normalize_points(points: np.ndarray) -> Tuple[np.ndarray, PointTransform]:
    """Shift points to zero mean and scale the set's max norm to 1.

    Returns the normalized points plus the (centroid, scale) transform.  A
    set of coincident points cannot define a scale; it is returned with
    scale 1 and the degenerate flag set.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 1:
        raise GeometryError(f"expected non-empty (N, 2) points, got {points.shape}")
    centroid = points.mean(axis=0)
    shifted = points - centroid
    max_norm = float(np.max(np.linalg.norm(shifted, axis=1)))
    if max_norm < 1e-12:
        return shifted, PointTransform(centroid=centroid, scale=1.0, degenerate=True)
    return shifted / max_norm, PointTransform(centroid=centroid, scale=max_norm)


def _dlt_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Stack the two DLT constraint rows per correspondence: (..., 2N, 9)."""
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    n = src.shape[-2]
    A = np.zeros(src.shape[:-2] + (2 * n, 9), dtype=np.float64)
    A[..., 0::2, 0] = -x
    A[..., 0::2, 1] = -y
    A[..., 0::2, 2] = -1.0
    A[..., 0::2, 6] = u * x
    A[..., 0::2, 7] = u * y
    A[..., 0::2, 8] = u
    A[..., 1::2, 3] = -x
    A[..., 1::2, 4] = -y
    A[..., 1::2, 5] = -1.0
    A[..., 1::2, 6] = v * x
    A[..., 1::2, 7] = v * y
    A[..., 1::2, 8] = v
    return A


def _scale_homography(H: np.ndarray) -> Homography:
    if abs(H[2, 2]) > 1e-9:
        return Homography(matrix=H / H[2, 2])
    return Homography(matrix=H / np.linalg.norm(H), frobenius_scaled=True)


def dlt_homography(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Least-squares homography from >= 4 point pairs (direct linear transform).

    Expects coordinates already normalized per normalize_points.  The
    solution is the singular direction of the stacked constraint system;
    a configuration that leaves the system rank-deficient (e.g. collinear
    points) raises GeometryError.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise GeometryError(
            f"src/dst must both be (N, 2), got {src.shape} and {dst.shape}"
        )
    if src.shape[0] < 4:
        raise GeometryError(f"need at least 4 correspondences, got {src.shape[0]}")
    A = _dlt_matrix(src, dst)
    _, s, Vh = np.linalg.svd(A)
    # A unique solution has exactly one (near-)zero singular value.
    if s[-2] <= 1e-9 * max(s[0], 1e-30):
        raise GeometryError("degenerate correspondences: homography not unique")
    return _scale_homography(Vh[-1].reshape(3, 3))


def apply_homography(H: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Map (N, 2) points through H; points sent to infinity come back non-finite."""
    points = np.asarray(points, dtype=np.float64)
    ph = np.column_stack([points, np.ones(points.shape[0])])
    proj = ph @ np.asarray(H, dtype=np.float64).T
    with np.errstate(divide="ignore", invalid="ignore"):
        return proj[:, :2] / proj[:, 2:3]


def homography_jacobian(H: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Local 2x2 Jacobian of the map induced by H at each point: (N, 2, 2).

    This is how a homography warps an infinitesimal patch, used to transport
    affine feature frames between views.
    """
    H = np.asarray(H, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    w = points @ H[2, :2] + H[2, 2]
    uv = apply_homography(H, points)
    J = np.empty((points.shape[0], 2, 2), dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        J[:, 0, 0] = (H[0, 0] - uv[:, 0] * H[2, 0]) / w
        J[:, 0, 1] = (H[0, 1] - uv[:, 0] * H[2, 1]) / w
        J[:, 1, 0] = (H[1, 0] - uv[:, 1] * H[2, 0]) / w
        J[:, 1, 1] = (H[1, 1] - uv[:, 1] * H[2, 1]) / w
    return J


def reprojection_residuals(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Euclidean distance between H(src) and dst; non-finite projections give inf."""
    proj = apply_homography(H, np.asarray(src, dtype=np.float64))
    diff = proj - np.asarray(dst, dtype=np.float64)
    res = np.linalg.norm(diff, axis=1)
    res[~np.isfinite(res)] = np.inf
    return res


def _noncollinear(quads: np.ndarray) -> np.ndarray:
    """True where no triple within a (B, 4, 2) sample is (near-)collinear."""
    triples = [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
    ok = np.ones(quads.shape[0], dtype=bool)
    for i, j, k in triples:
        ab = quads[:, j] - quads[:, i]
        ac = quads[:, k] - quads[:, i]
        area2 = np.abs(ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0])
        ok &= area2 > COLLINEAR_EPS
    return ok


def ransac_homography(
    correspondences: Sequence[Correspondence],
    inlier_threshold: float,
    seed=None,
    confidence: float = 0.99,
    max_iters: int = 2000,
) -> GeomVerdict:
    """Robust homography fit over normalized correspondences.

    Seeded minimal 4-point samples are fitted in vectorized chunks; a
    correspondence is an inlier when its reprojection distance is strictly
    below inlier_threshold.  The iteration budget adapts with the standard
    (1 - w^4) confidence formula, capped at max_iters.  The final homography
    is refit on the best consensus set; the reported inlier_mask is that
    consensus.  Fewer than 4 correspondences, or no valid sample, yield
    n = 0 with no homography.
    """
    if inlier_threshold <= 0:
        raise GeometryError(f"inlier_threshold must be positive, got {inlier_threshold}")
    corr = list(correspondences)
    total = len(corr)
    failure = GeomVerdict(
        n=0, omega=0.0, homography=None, inlier_mask=np.zeros(total, dtype=bool)
    )
    if total < 4:
        return failure
    src = np.array([c.query_point for c in corr], dtype=np.float64)
    dst = np.array([c.db_point for c in corr], dtype=np.float64)

    rng = np.random.default_rng(seed)
    src_h = np.vstack([src.T, np.ones(total)])
    thr2 = inlier_threshold * inlier_threshold

    best_count = 0
    best_mask = np.zeros(total, dtype=bool)
    best_H = None
    done = 0
    target = max_iters
    while done < target:
        chunk = min(RANSAC_CHUNK, target - done)
        done += chunk
        # 4 distinct indices per model: the smallest entries of a random row.
        keys = rng.random((chunk, total))
        idx = np.argpartition(keys, 4, axis=1)[:, :4]
        sq, dq = src[idx], dst[idx]
        valid = _noncollinear(sq) & _noncollinear(dq)
        if not np.any(valid):
            continue
        A = _dlt_matrix(sq[valid], dq[valid])
        _, _, Vh = np.linalg.svd(A)
        Hc = Vh[:, -1, :].reshape(-1, 3, 3)

        proj = Hc @ src_h
        with np.errstate(divide="ignore", invalid="ignore"):
            xy = proj[:, :2, :] / proj[:, 2:3, :]
        res2 = np.sum((xy - dst.T) ** 2, axis=1)
        res2[~np.isfinite(res2)] = np.inf
        masks = res2 < thr2
        counts = masks.sum(axis=1)
        top = int(np.argmax(counts))
        if counts[top] > best_count:
            best_count = int(counts[top])
            best_mask = masks[top].copy()
            best_H = Hc[top]
            # Shrink the iteration budget as the inlier ratio estimate grows.
            w4 = (best_count / total) ** 4
            if w4 >= 1.0 - 1e-15:
                target = done
            else:
                needed = int(np.ceil(np.log1p(-confidence) / np.log1p(-w4)))
                target = min(max_iters, max(needed, 1))

    if best_H is None or best_count < 4:
        return failure
    try:
        homography = dlt_homography(src[best_mask], dst[best_mask])
    except GeometryError:
        homography = _scale_homography(best_H)
    return GeomVerdict(
        n=best_count,
        omega=best_count / max(1, total),
        homography=homography,
        inlier_mask=best_mask,
    )


def geometric_similarity(
    query,
    db,
    inlier_threshold: float = 0.1,
    seed: int = 0,
    mutual: bool = True,
    max_distance: float = 0.9,
    ratio: Optional[float] = None,
    confidence: float = 0.99,
    max_iters: int = 2000,
    ratio_denominator: str = "matches",
) -> GeomVerdict:
    """Full geometric verification of a (query, db) image pair.

    Composition of match_descriptors, per-side normalize_points, and
    ransac_homography.  The RANSAC stream is derived from the global seed
    and the two image ids, so verdicts are reproducible pair by pair in any
    execution order.  omega's denominator is the number of matches, or the
    smaller feature count with ratio_denominator="all_points".
    """
    if ratio_denominator not in RATIO_DENOMINATORS:
        raise ValueError(
            f"ratio_denominator must be one of {RATIO_DENOMINATORS}, "
            f"got {ratio_denominator!r}"
        )
    matches = match_descriptors(
        query, db, max_distance=max_distance, mutual=mutual, ratio=ratio
    )
    n_matches = len(matches)
    if ratio_denominator == "matches":
        denom = n_matches
    else:
        denom = min(query.count, db.count)
    if n_matches < 4:
        return GeomVerdict(
            n=0,
            omega=0.0,
            homography=None,
            inlier_mask=np.zeros(n_matches, dtype=bool),
        )
    q_pts = np.array([c.query_point for c in matches], dtype=np.float64)
    d_pts = np.array([c.db_point for c in matches], dtype=np.float64)
    q_norm, q_tf = normalize_points(q_pts)
    d_norm, d_tf = normalize_points(d_pts)
    if q_tf.degenerate or d_tf.degenerate:
        return GeomVerdict(
            n=0,
            omega=0.0,
            homography=None,
            inlier_mask=np.zeros(n_matches, dtype=bool),
        )
    normalized = [
        Correspondence(
            query_point=(float(q_norm[i, 0]), float(q_norm[i, 1])),
            db_point=(float(d_norm[i, 0]), float(d_norm[i, 1])),
            descriptor_distance=c.descriptor_distance,
            query_index=c.query_index,
            db_index=c.db_index,
        )
        for i, c in enumerate(matches)
    ]
    verdict = ransac_homography(
        normalized,
        inlier_threshold=inlier_threshold,
        seed=derive_seed(seed, "ransac", query.image_id, db.image_id),
        confidence=confidence,
        max_iters=max_iters,
    )
    omega = verdict.n / denom if (denom > 0 and verdict.homography is not None) else 0.0
    return GeomVerdict(
        n=verdict.n,
        omega=float(omega),
        homography=verdict.homography,
        inlier_mask=verdict.inlier_mask,
    )
