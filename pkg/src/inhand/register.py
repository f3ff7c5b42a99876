"""Frame-to-frame registration: weighted sparse alignment plus dense ICP.

Each new frame is first aligned to the previous frame by solving a single
weighted least-squares problem over all available sparse correspondence
sets (2D feature matches, 3D feature matches, hand-contact pairs, and
optionally detector-box pairs).  The result is composed with the previous
frame's world pose and then refined by point-to-point ICP against the
metascan — the running accumulation of every previously registered cloud.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .contact import contact_correspondences, detect_contacts
from .errors import (
    DegenerateConfigurationError,
    DivergenceError,
    EmptyInputError,
    NoContactError,
    UnderConstrainedError,
)
from .features import CorrespondenceSet, load_feat2d, match_feat3d
from .geometry import (
    CameraIntrinsics,
    PointCloud,
    RigidTransform,
    SpatialIndex,
    back_project_many,
    solve_weighted_rigid,
    voxel_downsample_indices,
)
from .preprocess import SegmentedFrame

log = logging.getLogger(__name__)

# Sets that carry the contact weight gamma_t; every other tag enters the
# sparse energy with unit weight.
_GAMMA_TAGS = frozenset({"contact", "detector"})


@dataclass(frozen=True)
class RegistrationConfig:
    """Knobs for the per-pair solve and the ICP refinement.

    ``use_contact`` / ``use_detector`` / ``use_icp`` switch whole terms on
    or off for ablation runs; ``gamma_t`` scales whichever of the contact
    or detector sets are active.
    """

    gamma_t: float = 15.0
    icp_max_dist: float = 5.0
    icp_max_iters: int = 50
    icp_convergence_eps: float = 1e-3
    use_contact: bool = True
    use_detector: bool = False
    use_icp: bool = True

    def __post_init__(self) -> None:
        if self.gamma_t < 0.0:
            raise ValueError("gamma_t must be nonnegative")
        if self.icp_max_dist <= 0.0:
            raise ValueError("icp_max_dist must be positive")
        if self.icp_max_iters < 1:
            raise ValueError("icp_max_iters must be at least 1")
        if self.icp_convergence_eps <= 0.0:
            raise ValueError("icp_convergence_eps must be positive")

    def set_weight(self, tag: str) -> float:
        return self.gamma_t if tag in _GAMMA_TAGS else 1.0


class Metascan:
    """World-frame accumulation of all registered object clouds.

    Every appended cloud is merged into a 2 mm voxel grid where the
    earliest point in a voxel wins, so the structure grows by filling
    previously unseen voxels only.  The nearest-neighbor index is rebuilt
    lazily after each append.
    """

    def __init__(self, voxel_size: float = 2.0):
        if voxel_size <= 0.0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self._points = np.empty((0, 3), dtype=np.float64)
        self._frame_ids = np.empty(0, dtype=np.int64)
        self._index: SpatialIndex | None = None

    def __len__(self) -> int:
        return len(self._points)

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def frame_ids(self) -> np.ndarray:
        return self._frame_ids

    @property
    def index(self) -> SpatialIndex:
        if self._index is None:
            self._index = SpatialIndex(self._points)
        return self._index

    def append(self, cloud: PointCloud | np.ndarray, frame_index: int) -> None:
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
        pts = pts.reshape(-1, 3).astype(np.float64)
        merged = np.vstack([self._points, pts])
        ids = np.concatenate(
            [self._frame_ids, np.full(len(pts), frame_index, dtype=np.int64)]
        )
        keep = voxel_downsample_indices(merged, self.voxel_size)
        self._points = merged[keep]
        self._frame_ids = ids[keep]
        self._index = None


@dataclass(frozen=True)
class FramePose:
    """Registration result for one frame plus residual diagnostics."""

    frame_index: int
    world_from_frame: RigidTransform
    sparse_residual: float
    icp_residual: float
    correspondence_counts: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    rms_history: tuple[float, ...]
    pair_count: int


def sparse_energy(
    sets: list[CorrespondenceSet], transform: RigidTransform, gamma_t: float
) -> float:
    """Weighted sum of squared residuals over all correspondence sets."""
    total = 0.0
    for cs in sets:
        if len(cs) == 0:
            continue
        w = (gamma_t if cs.tag in _GAMMA_TAGS else 1.0) * cs.weight
        if w == 0.0:
            continue
        res = transform.apply(cs.source) - cs.target
        total += w * float(np.einsum("ij,ij->", res, res))
    return total


def align_sparse(
    sets: list[CorrespondenceSet], config: RegistrationConfig = RegistrationConfig()
) -> RigidTransform:
    """Exact minimizer of the weighted sparse alignment energy.

    Stacks every correspondence pair with its set weight (1 for visual
    sets, ``gamma_t`` for contact/detector sets) and solves one weighted
    rigid least-squares problem over the union.
    """
    sources, targets, weights = [], [], []
    for cs in sets:
        w = config.set_weight(cs.tag) * cs.weight
        if len(cs) == 0 or w == 0.0:
            continue
        sources.append(cs.source)
        targets.append(cs.target)
        weights.append(np.full(len(cs), w))
    effective = sum(len(s) for s in sources)
    if effective < 3:
        empty = sorted({cs.tag for cs in sets if len(cs) == 0}) or ["(all)"]
        raise UnderConstrainedError(
            f"{effective} effective pairs (need 3); empty sets: {', '.join(empty)}"
        )
    return solve_weighted_rigid(
        np.vstack(sources), np.vstack(targets), np.concatenate(weights)
    )


def refine_icp(
    source: PointCloud | np.ndarray,
    metascan: Metascan,
    config: RegistrationConfig = RegistrationConfig(),
) -> IcpResult:
    """Point-to-point ICP of ``source`` against the metascan.

    ``source`` must already carry the sparse alignment (world frame).
    Each iteration pairs every source point with its nearest metascan
    point, keeps pairs within ``icp_max_dist``, solves for the rigid
    increment, and records the post-update RMS over those pairs.  Returns
    the accumulated incremental transform.
    """
    if len(metascan) == 0:
        raise EmptyInputError("metascan is empty")
    pts = source.points if isinstance(source, PointCloud) else np.asarray(source)
    pts = pts.reshape(-1, 3).astype(np.float64)
    t = RigidTransform.identity()
    history: list[float] = []
    prev_rms = None
    pair_count = 0
    for iteration in range(config.icp_max_iters):
        moved = t.apply(pts)
        idx, dist = metascan.index.nearest_many(moved)
        in_range = dist <= config.icp_max_dist
        pair_count = int(in_range.sum())
        if pair_count < 3:
            raise DivergenceError(
                f"{pair_count} ICP pairs within {config.icp_max_dist} mm "
                f"at iteration {iteration}"
            )
        targets = metascan.points[idx[in_range]]
        delta = solve_weighted_rigid(moved[in_range], targets)
        t = delta.compose(t)
        res = t.apply(pts[in_range]) - targets
        rms = math.sqrt(float(np.einsum("ij,ij->", res, res)) / pair_count)
        history.append(rms)
        if prev_rms is not None and abs(prev_rms - rms) < config.icp_convergence_eps:
            break
        prev_rms = rms
    return IcpResult(t, tuple(history), pair_count)


def detector_correspondences(
    source: SegmentedFrame,
    target: SegmentedFrame,
    intrinsics: CameraIntrinsics,
) -> CorrespondenceSet:
    """Pair back-projected pixels at identical offsets inside shared boxes.

    For every detector label present on both frames, the depth patches are
    walked in lockstep: offset (row, col) in the source box is paired with
    the same offset in the target box whenever both depths are valid.
    """
    src_boxes = {b.label: b for b in source.detector_boxes or ()}
    tgt_boxes = {b.label: b for b in target.detector_boxes or ()}
    src_pts, tgt_pts = [], []
    for label in sorted(set(src_boxes) & set(tgt_boxes)):
        bs, bt = src_boxes[label], tgt_boxes[label]
        if (bs.height, bs.width) != (bt.height, bt.width):
            raise ValueError(f"detector boxes for {label!r} differ in size")
        valid = (bs.depth > 0.0) & (bt.depth > 0.0)
        rows, cols = np.nonzero(valid)
        if len(rows) == 0:
            continue
        src_px = np.column_stack([bs.x + cols, bs.y + rows]).astype(np.float64)
        tgt_px = np.column_stack([bt.x + cols, bt.y + rows]).astype(np.float64)
        src_pts.append(back_project_many(src_px, bs.depth[rows, cols], intrinsics))
        tgt_pts.append(back_project_many(tgt_px, bt.depth[rows, cols], intrinsics))
    if not src_pts:
        return CorrespondenceSet(np.empty((0, 3)), np.empty((0, 3)), "detector")
    return CorrespondenceSet(np.vstack(src_pts), np.vstack(tgt_pts), "detector")


def build_correspondences(
    prev: SegmentedFrame,
    curr: SegmentedFrame,
    config: RegistrationConfig,
    intrinsics: CameraIntrinsics | None = None,
) -> list[CorrespondenceSet]:
    """All sparse sets aligning ``curr`` (source) to ``prev`` (target)."""
    sets = [match_feat3d(curr.object_cloud, prev.object_cloud)]
    if (
        curr.feat2d_matches is not None
        and intrinsics is not None
        and prev.frame_index == curr.frame_index - 1
    ):
        pixel_pairs, src_d, tgt_d = curr.feat2d_matches
        sets.append(load_feat2d(pixel_pairs, src_d, tgt_d, intrinsics))
    if config.use_contact and config.gamma_t > 0.0:
        try:
            curr_state = detect_contacts(curr.hand_pose, curr.object_cloud)
            prev_state = detect_contacts(prev.hand_pose, prev.object_cloud)
        except NoContactError as exc:
            log.warning("frame %d: %s; contact term dropped", curr.frame_index, exc)
        else:
            sets.append(
                contact_correspondences(
                    curr.hand_pose, prev.hand_pose, curr_state, prev_state
                )
            )
    if config.use_detector and intrinsics is not None:
        sets.append(detector_correspondences(curr, prev, intrinsics))
    return sets


def _pair_rms(sets: list[CorrespondenceSet], transform: RigidTransform) -> float:
    """Unweighted RMS residual over the union of all pairs."""
    total, count = 0.0, 0
    for cs in sets:
        if len(cs) == 0:
            continue
        res = transform.apply(cs.source) - cs.target
        total += float(np.einsum("ij,ij->", res, res))
        count += len(cs)
    return math.sqrt(total / count) if count else float("nan")


def register_pair(
    prev: SegmentedFrame,
    curr: SegmentedFrame,
    metascan: Metascan,
    world_from_prev: RigidTransform,
    config: RegistrationConfig = RegistrationConfig(),
    intrinsics: CameraIntrinsics | None = None,
) -> FramePose:
    """Register ``curr`` against ``prev`` and refine against the metascan.

    On success the transformed object cloud is appended to the metascan.
    An under-constrained sparse stage falls back to an identity increment
    (ICP still runs); ICP divergence propagates so the caller can skip the
    frame.
    """
    sets = build_correspondences(prev, curr, config, intrinsics)
    counts = {cs.tag: len(cs) for cs in sets}
    try:
        t_pair = align_sparse(sets, config)
    except UnderConstrainedError as exc:
        log.warning(
            "frame %d: sparse stage under-constrained (%s); identity fallback",
            curr.frame_index,
            exc,
        )
        t_pair = RigidTransform.identity()
    sparse_rms = _pair_rms(sets, t_pair)
    world = world_from_prev.compose(t_pair)
    icp_rms = float("nan")
    if config.use_icp and len(metascan) > 0:
        result = refine_icp(curr.object_cloud.transformed(world), metascan, config)
        world = result.transform.compose(world)
        icp_rms = result.rms_history[-1]
        counts["icp"] = result.pair_count
    metascan.append(curr.object_cloud.transformed(world), curr.frame_index)
    return FramePose(curr.frame_index, world, sparse_rms, icp_rms, counts)


@dataclass(frozen=True)
class SequenceResult:
    poses: tuple[FramePose, ...]
    metascan: Metascan
    skipped: tuple[int, ...]

    def pose_for(self, frame_index: int) -> FramePose:
        for pose in self.poses:
            if pose.frame_index == frame_index:
                return pose
        raise KeyError(f"frame {frame_index} has no pose")


def run_sequence(
    frames: list[SegmentedFrame],
    config: RegistrationConfig = RegistrationConfig(),
    intrinsics: CameraIntrinsics | None = None,
) -> SequenceResult:
    """Register a whole sequence; frame 0 anchors the world frame.

    Frames whose registration diverges are skipped and the next frame is
    aligned against the last successfully registered one, over the same
    metascan.
    """
    if not frames:
        raise EmptyInputError("no frames to register")
    metascan = Metascan()
    first = frames[0]
    identity = RigidTransform.identity()
    metascan.append(first.object_cloud, first.frame_index)
    poses = [
        FramePose(first.frame_index, identity, float("nan"), float("nan"), {})
    ]
    skipped: list[int] = []
    prev, world_prev = first, identity
    for curr in frames[1:]:
        try:
            pose = register_pair(prev, curr, metascan, world_prev, config, intrinsics)
        except (DivergenceError, DegenerateConfigurationError) as exc:
            log.warning("frame %d skipped: %s", curr.frame_index, exc)
            skipped.append(curr.frame_index)
            continue
        poses.append(pose)
        prev, world_prev = curr, pose.world_from_frame
    return SequenceResult(tuple(poses), metascan, tuple(skipped))


def pairwise_annotation_error(pairs, transform: RigidTransform) -> tuple[float, float]:
    """Mean and standard deviation of ``|x' - T(x)|`` over annotated pairs."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyInputError("no annotated pairs")
    src = np.asarray([p[0] for p in pairs], dtype=np.float64)
    tgt = np.asarray([p[1] for p in pairs], dtype=np.float64)
    errs = np.linalg.norm(tgt - transform.apply(src), axis=1)
    return float(errs.mean()), float(errs.std())


def pose_record(pose: FramePose) -> dict:
    """JSON-ready trajectory record for one frame."""

    def _num(x: float):
        return None if math.isnan(x) else x

    return {
        "frame": pose.frame_index,
        "rotation": [float(v) for v in pose.world_from_frame.rotation.ravel()],
        "translation": [float(v) for v in pose.world_from_frame.translation],
        "sparse_rms": _num(pose.sparse_residual),
        "icp_rms": _num(pose.icp_residual),
        "counts": dict(pose.correspondence_counts),
    }
