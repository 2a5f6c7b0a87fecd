"""Geospatial correction of tiles against a reference image.

Pipeline: detect multi-scale keypoints on both tiles, match them, estimate
a homography with RANSAC, and warp the tile into the reference frame. The
detector is pluggable; this build defaults to SIFT (AKAZE is supported
where the local OpenCV provides it) and matching defaults to descriptor-
space L2 with a ratio test. Coordinate-space L2 matching is kept as an
option for tiles that are already approximately registered.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil, log

import cv2
import numpy as np

from .errors import InsufficientDataError, InvalidInputError
from .raster import RasterTile

_COLLINEAR_AREA_PX2 = 1.0


@dataclass(frozen=True)
class Keypoint:
    position: tuple[float, float]  # (x, y) pixel coordinates
    descriptor: np.ndarray
    response: float


@dataclass(frozen=True)
class MatchSet:
    """One-to-one keypoint correspondences: (index into A, index into B, distance)."""

    pairs: tuple[tuple[int, int, float], ...]

    def __post_init__(self):
        ia = [p[0] for p in self.pairs]
        ib = [p[1] for p in self.pairs]
        if len(set(ia)) != len(ia) or len(set(ib)) != len(ib):
            raise InvalidInputError("matches must be one-to-one")
        if any(p[2] < 0 for p in self.pairs):
            raise InvalidInputError("match distances must be non-negative")

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class Homography:
    """3x3 projective transform, normalized so H[2,2] = 1."""

    H: np.ndarray

    def __post_init__(self):
        H = np.asarray(self.H, dtype=np.float64)
        if H.shape != (3, 3):
            raise InvalidInputError("homography must be 3x3")
        if abs(np.linalg.det(H)) < 1e-12:
            raise InvalidInputError("homography is singular")
        if abs(H[2, 2]) < 1e-12:
            raise InvalidInputError("cannot normalize: H[2,2] ~ 0")
        H = H / H[2, 2]
        H.flags.writeable = False
        object.__setattr__(self, "H", H)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.H))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (n, 2) points through the transform."""
        return _project(self.H, np.asarray(points, dtype=np.float64))


@dataclass(frozen=True)
class AlignConfig:
    detector: str = "sift"
    max_keypoints: int = 2000
    strategy: str = "descriptor_l2"
    ratio: float = 0.75
    radius: float = 32.0
    reproj_threshold: float = 3.0
    max_iters: int = 2000
    confidence: float = 0.995
    seed: int = 0
    min_inlier_ratio: float = 0.2


@dataclass(frozen=True)
class AlignResult:
    aligned: RasterTile
    homography: Homography | None
    diagnostics: dict = field(default_factory=dict)
    status: str = "ok"


def _to_gray(tile: RasterTile) -> np.ndarray:
    px = tile.pixels
    if px.dtype != np.uint8:
        raise InvalidInputError("keypoint detection expects uint8 tiles")
    if tile.channels == 1:
        return px[:, :, 0]
    if tile.channels == 4:
        px = px[:, :, :3]
    return cv2.cvtColor(px, cv2.COLOR_RGB2GRAY)


def _make_detector(name: str):
    if name == "sift":
        return cv2.SIFT_create()
    if name == "orb":
        return cv2.ORB_create(nfeatures=100000)
    if name == "akaze":
        factory = getattr(cv2, "AKAZE_create", None)
        if factory is None:
            raise InvalidInputError("this OpenCV build does not provide AKAZE; use 'sift' or 'orb'")
        return factory()
    raise InvalidInputError(f"unknown detector {name!r}")


def detect_keypoints(tile: RasterTile, detector: str = "sift", max_keypoints: int = 2000) -> list[Keypoint]:
    """Detect multi-scale keypoints with descriptors, strongest first.

    Deterministic for a given tile. A textureless image yields an empty
    list, which is not an error.
    """
    gray = _to_gray(tile)
    kps, desc = _make_detector(detector).detectAndCompute(gray, None)
    if not kps:
        return []
    desc = desc.astype(np.float32)
    order = sorted(
        range(len(kps)), key=lambda i: (-kps[i].response, kps[i].pt[0], kps[i].pt[1])
    )[:max_keypoints]
    return [
        Keypoint(position=(float(kps[i].pt[0]), float(kps[i].pt[1])), descriptor=desc[i], response=float(kps[i].response))
        for i in order
    ]


def positions(keypoints: list[Keypoint]) -> np.ndarray:
    """(n, 2) array of keypoint pixel coordinates."""
    return np.array([k.position for k in keypoints], dtype=np.float64).reshape(-1, 2)


def _l2_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a * a).sum(1)[:, None]
    bb = (b * b).sum(1)[None, :]
    d2 = np.maximum(aa + bb - 2.0 * (a @ b.T), 0.0)
    return np.sqrt(d2)


def match_keypoints(
    a: list[Keypoint],
    b: list[Keypoint],
    strategy: str = "descriptor_l2",
    ratio: float = 0.75,
    radius: float = 32.0,
) -> MatchSet:
    """Pair keypoints one-to-one by L2 nearest neighbor.

    `descriptor_l2` uses mutual nearest neighbors in descriptor space with
    a Lowe ratio test; `coordinate_l2` pairs mutual nearest neighbors in
    pixel coordinates within `radius` and only makes sense when the two
    tiles are already approximately registered. Zero surviving matches
    yield an empty MatchSet, not an error.
    """
    if not a or not b:
        raise InvalidInputError("both keypoint lists must be non-empty")
    if strategy == "descriptor_l2":
        dist = _l2_matrix(
            np.stack([k.descriptor for k in a]).astype(np.float64),
            np.stack([k.descriptor for k in b]).astype(np.float64),
        )
        use_ratio = dist.shape[1] >= 2 and ratio is not None
    elif strategy == "coordinate_l2":
        dist = _l2_matrix(positions(a), positions(b))
        use_ratio = False
    else:
        raise InvalidInputError(f"unknown matching strategy {strategy!r}")

    nn12 = dist.argmin(axis=1)
    nn21 = dist.argmin(axis=0)
    pairs = []
    for i, j in enumerate(nn12):
        if nn21[j] != i:
            continue
        d_best = dist[i, j]
        if use_ratio:
            second = np.partition(dist[i], 1)[1]
            if not d_best < ratio * second:
                continue
        if strategy == "coordinate_l2" and d_best > radius:
            continue
        pairs.append((i, int(j), float(d_best)))
    return MatchSet(tuple(pairs))


def _project(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    homo = np.hstack([pts, np.ones((len(pts), 1))])
    q = homo @ H.T
    return q[:, :2] / q[:, 2:3]


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Least-squares homography from >= 4 correspondences (unnormalized)."""
    n = len(src)
    A = np.zeros((2 * n, 9))
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    A[0::2, 0], A[0::2, 1], A[0::2, 2] = -x, -y, -1.0
    A[0::2, 6], A[0::2, 7], A[0::2, 8] = x * u, y * u, u
    A[1::2, 3], A[1::2, 4], A[1::2, 5] = -x, -y, -1.0
    A[1::2, 6], A[1::2, 7], A[1::2, 8] = x * v, y * v, v
    try:
        _, s, vt = np.linalg.svd(A)
    except np.linalg.LinAlgError:
        return None
    H = vt[-1].reshape(3, 3)
    if abs(H[2, 2]) < 1e-12 or abs(np.linalg.det(H)) < 1e-12:
        return None
    return H / H[2, 2]


def _normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    scale = np.sqrt(2.0) / d if d > 1e-12 else 1.0
    T = np.array(
        [[scale, 0, -scale * centroid[0]], [0, scale, -scale * centroid[1]], [0, 0, 1]]
    )
    return _project(T, pts), T


def _dlt_normalized(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    sn, Ts = _normalize_points(src)
    dn, Td = _normalize_points(dst)
    Hn = _dlt(sn, dn)
    if Hn is None:
        return None
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) < 1e-12:
        return None
    return H / H[2, 2]


def _any_collinear(pts: np.ndarray) -> bool:
    for skip in range(4):
        p = np.delete(pts, skip, axis=0)
        u, v = p[1] - p[0], p[2] - p[0]
        area = abs(u[0] * v[1] - u[1] * v[0]) / 2.0
        if area < _COLLINEAR_AREA_PX2:
            return True
    return False


def _symmetric_errors(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Per-correspondence max of forward and backward transfer distance."""
    fwd = np.linalg.norm(_project(H, src) - dst, axis=1)
    bwd = np.linalg.norm(_project(np.linalg.inv(H), dst) - src, axis=1)
    return np.maximum(fwd, bwd)


def estimate_homography_ransac(
    matches: MatchSet,
    pts_a: np.ndarray,
    pts_b: np.ndarray,
    reproj_threshold: float = 3.0,
    max_iters: int = 2000,
    confidence: float = 0.995,
    seed: int = 0,
) -> tuple[Homography, np.ndarray]:
    """RANSAC homography mapping A points onto B points.

    Samples 4-point minimal sets, solves the direct linear transform,
    scores by symmetric reprojection error below `reproj_threshold`, then
    refits on the best inlier set with a normalized least-squares solve.
    Early exit once `confidence` is reached. Deterministic in `seed`.
    Returns the homography and a boolean inlier flag per match.
    """
    if len(matches) < 4:
        raise InsufficientDataError(f"need at least 4 matches, got {len(matches)}")
    pts_a = np.asarray(pts_a, dtype=np.float64)
    pts_b = np.asarray(pts_b, dtype=np.float64)
    src = np.stack([pts_a[i] for i, _, _ in matches.pairs])
    dst = np.stack([pts_b[j] for _, j, _ in matches.pairs])
    n = len(src)

    rng = np.random.default_rng(seed)
    best_H: np.ndarray | None = None
    best_inliers = np.zeros(n, dtype=bool)
    best_score = (-1, 0.0)
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        if _any_collinear(src[idx]) or _any_collinear(dst[idx]):
            continue
        H = _dlt(src[idx], dst[idx])
        if H is None or abs(np.linalg.det(H)) < 1e-12:
            continue
        err = _symmetric_errors(H, src, dst)
        inl = err < reproj_threshold
        count = int(inl.sum())
        score = (count, -float(err[inl].sum()))
        if score > best_score:
            best_score, best_H, best_inliers = score, H, inl
            w = count / n
            if w >= 1.0:
                break
            denom = log(1.0 - w**4) if w > 0 else 0.0
            if denom < 0:
                needed = min(needed, ceil(log(max(1.0 - confidence, 1e-12)) / denom))

    if best_H is None or best_inliers.sum() < 4:
        raise InsufficientDataError("RANSAC found no valid 4-point model")

    refit = _dlt_normalized(src[best_inliers], dst[best_inliers])
    if refit is not None:
        err = _symmetric_errors(refit, src, dst)
        inl = err < reproj_threshold
        if int(inl.sum()) >= int(best_inliers.sum()):
            best_H, best_inliers = refit, inl
    return Homography(best_H), best_inliers


def warp_tile(
    tile: RasterTile,
    homography: Homography,
    out_shape: tuple[int, int] | None = None,
    interpolation: str = "bilinear",
) -> RasterTile:
    """Resample a tile through a homography by inverse mapping.

    `homography` maps tile pixel coordinates to output coordinates. Pixels
    sampled from outside the source are filled with 0 and the covered
    fraction is recorded in `meta['valid_fraction']`. Use nearest
    interpolation for masks and label rasters.
    """
    h, w = (tile.height, tile.width) if out_shape is None else out_shape
    Hinv = np.linalg.inv(homography.H)
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    denom = Hinv[2, 0] * xs + Hinv[2, 1] * ys + Hinv[2, 2]
    map_x = (Hinv[0, 0] * xs + Hinv[0, 1] * ys + Hinv[0, 2]) / denom
    map_y = (Hinv[1, 0] * xs + Hinv[1, 1] * ys + Hinv[1, 2]) / denom
    flags = cv2.INTER_LINEAR if interpolation == "bilinear" else cv2.INTER_NEAREST
    out = cv2.remap(
        tile.pixels,
        map_x.astype(np.float32),
        map_y.astype(np.float32),
        flags,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0,
    )
    if out.ndim == 2:
        out = out[:, :, None]
    valid = (
        (map_x >= 0) & (map_x <= tile.width - 1) & (map_y >= 0) & (map_y <= tile.height - 1)
    )
    meta = dict(tile.meta)
    meta["valid_fraction"] = float(valid.mean())
    return RasterTile(
        out, geo=tile.geo, crs=tile.crs, resolution_m_per_px=tile.resolution_m_per_px, meta=meta
    )


def align_tile(tile: RasterTile, reference: RasterTile, config: AlignConfig = AlignConfig()) -> AlignResult:
    """Register a tile to a reference: detect, match, RANSAC, warp.

    Returns the aligned tile plus diagnostics. If there is too little
    texture, too few matches, or the inlier ratio falls below
    `config.min_inlier_ratio`, the original tile is returned with status
    'rejected' instead of raising.
    """
    kp_tile = detect_keypoints(tile, config.detector, config.max_keypoints)
    kp_ref = detect_keypoints(reference, config.detector, config.max_keypoints)
    diagnostics = {
        "keypoints_tile": len(kp_tile),
        "keypoints_reference": len(kp_ref),
        "matches": 0,
        "inlier_ratio": 0.0,
        "mean_reproj_error": float("nan"),
        "strategy": config.strategy,
        "detector": config.detector,
    }

    def rejected() -> AlignResult:
        return AlignResult(aligned=tile, homography=None, diagnostics=diagnostics, status="rejected")

    if len(kp_tile) < 4 or len(kp_ref) < 4:
        return rejected()
    matches = match_keypoints(kp_tile, kp_ref, config.strategy, config.ratio, config.radius)
    diagnostics["matches"] = len(matches)
    if len(matches) < 4:
        return rejected()

    pts_a, pts_b = positions(kp_tile), positions(kp_ref)
    try:
        H, inliers = estimate_homography_ransac(
            matches,
            pts_a,
            pts_b,
            reproj_threshold=config.reproj_threshold,
            max_iters=config.max_iters,
            confidence=config.confidence,
            seed=config.seed,
        )
    except InsufficientDataError:
        return rejected()

    src = np.stack([pts_a[i] for i, _, _ in matches.pairs])
    dst = np.stack([pts_b[j] for _, j, _ in matches.pairs])
    err = _symmetric_errors(H.H, src, dst)
    diagnostics["inlier_ratio"] = float(inliers.mean())
    diagnostics["mean_reproj_error"] = float(err[inliers].mean())
    if diagnostics["inlier_ratio"] < config.min_inlier_ratio:
        return rejected()

    aligned = warp_tile(tile, H, out_shape=(reference.height, reference.width))
    return AlignResult(aligned=aligned, homography=H, diagnostics=diagnostics, status="ok")
