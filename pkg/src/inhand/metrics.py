"""Evaluation protocols over registered and fused sequences.

Two instruments:

* :func:`run_gamma_sweep` re-runs the full reconstruction pipeline across
  a grid of contact weights and scores each run by how far the fused
  mesh's measured dimensions land from ground truth.
* :func:`compare_energies` scores the four sparse-energy configurations
  (contact/detector, each with and without visual features) against
  annotated point pairs, isolating the per-pair solve from ICP and
  fusion.

Both emit plot-ready CSV through :func:`sweep_to_csv` and
:func:`energies_to_csv`.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyInputError, InHandError, UnderConstrainedError
from .fusion import (
    Probe,
    TsdfVolume,
    extract_mesh,
    integrate,
    laplacian_smooth,
    measure_dimensions,
)
from .geometry import CameraIntrinsics, RigidTransform, rotation_angle_rad
from .preprocess import SegmentedFrame
from .register import (
    RegistrationConfig,
    align_sparse,
    build_correspondences,
    pairwise_annotation_error,
    run_sequence,
)

log = logging.getLogger(__name__)

__all__ = [
    "ProbeCell",
    "SweepResult",
    "EnergyRow",
    "normalized_mean_error",
    "pooled_normalized_errors",
    "rotation_span_deg",
    "run_gamma_sweep",
    "compare_energies",
    "sweep_to_csv",
    "energies_to_csv",
]


def rotation_span_deg(poses: Sequence[RigidTransform]) -> float:
    """Total rotation traversed along a pose trajectory, in degrees.

    Sums the angles of consecutive relative rotations, so a trajectory
    that barely moves scores near zero while one that thrashes between
    unrelated poses scores far above the scripted motion.
    """
    total = 0.0
    for a, b in zip(poses, poses[1:]):
        total += math.degrees(rotation_angle_rad(a.rotation.T @ b.rotation))
    return total


@dataclass(frozen=True)
class ProbeCell:
    """One (gamma, probe) measurement against the fused mesh.

    ``measured`` is NaN when the pipeline or the probe failed at this
    cell; the absolute error then propagates as NaN too.
    """

    gamma: float
    probe: str
    kind: str
    expected: float
    measured: float

    def __post_init__(self) -> None:
        if self.expected <= 0.0:
            raise ValueError(f"probe {self.probe!r}: expected value must be positive")

    @property
    def error(self) -> float:
        """Absolute measurement error in the probe's own units."""
        return abs(self.measured - self.expected)

    @property
    def normalized_error(self) -> float:
        """Absolute error divided by the ground-truth value."""
        return self.error / self.expected


def normalized_mean_error(cells: Iterable[ProbeCell]) -> float:
    """Mean of ``|measured - expected| / expected`` over millimeter probes.

    Volume probes are excluded from the average: a cubic-unit error would
    swamp the linear probes, so only length-like probes are pooled and
    volume cells remain available in the raw table.  Returns NaN when any
    pooled cell failed or when no length probes are present.
    """
    values = [c.normalized_error for c in cells if c.kind != "volume"]
    if not values:
        return float("nan")
    return float(np.mean(values))


@dataclass(frozen=True)
class SweepResult:
    """Dimension errors across a grid of contact weights.

    ``cells`` holds one entry per (gamma, probe); ``normalized_errors``
    holds, per gamma, the normalized mean over that gamma's length
    probes.  Construction re-derives every normalized value from the
    cells and rejects a mismatch, so the summary column can always be
    recomputed from the raw table.
    """

    gammas: tuple[float, ...]
    normalized_errors: tuple[float, ...]
    cells: tuple[ProbeCell, ...]

    def __post_init__(self) -> None:
        if not self.gammas:
            raise ValueError("a sweep needs at least one gamma")
        if any(b <= a for a, b in zip(self.gammas, self.gammas[1:])):
            raise ValueError("gamma values must be strictly increasing")
        if len(self.normalized_errors) != len(self.gammas):
            raise ValueError("need exactly one normalized error per gamma")
        known = set(self.gammas)
        if any(c.gamma not in known for c in self.cells):
            raise ValueError("cell gamma not in the gamma grid")
        for gamma, stored in zip(self.gammas, self.normalized_errors):
            recomputed = normalized_mean_error(self.cells_at(gamma))
            if not _same_float(stored, recomputed):
                raise ValueError(
                    f"normalized error at gamma={gamma:g} is {stored!r} but "
                    f"recomputes to {recomputed!r} from the cells"
                )

    def cells_at(self, gamma: float) -> tuple[ProbeCell, ...]:
        """All probe cells measured at one gamma."""
        gamma = float(gamma)
        return tuple(c for c in self.cells if c.gamma == gamma)

    def error_at(self, gamma: float) -> float:
        """Normalized mean error at one gamma of the grid."""
        gamma = float(gamma)
        for g, err in zip(self.gammas, self.normalized_errors):
            if g == gamma:
                return err
        raise KeyError(f"gamma {gamma:g} not in sweep grid")


def _same_float(a: float, b: float) -> bool:
    return (math.isnan(a) and math.isnan(b)) or a == b


def pooled_normalized_errors(results: Sequence[SweepResult]) -> dict[float, float]:
    """Normalized mean error per gamma pooled over several sweeps.

    All sweeps must cover the same gamma grid.  Pooling concatenates the
    raw cells, so objects with more probes weigh proportionally more --
    the same convention as averaging one table of per-probe rows.
    """
    results = list(results)
    if not results:
        raise EmptyInputError("no sweep results to pool")
    gammas = results[0].gammas
    for r in results[1:]:
        if r.gammas != gammas:
            raise ValueError("sweeps cover different gamma grids")
    return {
        g: normalized_mean_error(c for r in results for c in r.cells_at(g))
        for g in gammas
    }


def run_gamma_sweep(
    frames: Sequence[SegmentedFrame],
    probes: Sequence[Probe],
    expected: dict[str, float],
    gammas: Sequence[float],
    *,
    volume_center,
    config: RegistrationConfig = RegistrationConfig(),
    intrinsics: CameraIntrinsics | None = None,
    tsdf_side_mm: float = 350.0,
    tsdf_resolution: int = 256,
    smooth_iterations: int = 3,
    threads: int = 1,
) -> SweepResult:
    """Run the full pipeline once per gamma and measure the fused mesh.

    Each gamma gets a fresh registration, TSDF fusion at ``volume_center``,
    mesh extraction, smoothing, and probe measurement against the
    ``expected`` ground-truth dimensions.  A pipeline failure at some
    gamma (or a single unmeasurable probe, e.g. volume of an open mesh)
    is recorded as a NaN cell and the sweep continues.  Gamma cells are
    independent, so ``threads > 1`` runs them concurrently with results
    identical to the serial order.
    """
    frames = list(frames)
    probes = tuple(probes)
    if not frames:
        raise EmptyInputError("no frames to sweep")
    if not probes:
        raise EmptyInputError("no probes to measure")
    grid = tuple(float(g) for g in gammas)
    if not grid:
        raise ValueError("gamma list is empty")
    if any(g < 0.0 or not math.isfinite(g) for g in grid):
        raise ValueError("gamma values must be finite and nonnegative")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("gamma values must be strictly increasing")
    missing = [p.name for p in probes if p.name not in expected]
    if missing:
        raise ValueError(f"no ground-truth value for probes: {', '.join(missing)}")
    if threads < 1:
        raise ValueError("threads must be at least 1")

    def measure(gamma: float) -> dict[str, float]:
        return _measure_at_gamma(
            frames,
            probes,
            replace(config, gamma_t=gamma),
            intrinsics,
            volume_center,
            tsdf_side_mm,
            tsdf_resolution,
            smooth_iterations,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            measurements = list(pool.map(measure, grid))
    else:
        measurements = [measure(g) for g in grid]

    cells: list[ProbeCell] = []
    norms: list[float] = []
    for gamma, measured in zip(grid, measurements):
        row = [
            ProbeCell(gamma, p.name, p.kind, float(expected[p.name]), measured[p.name])
            for p in probes
        ]
        cells.extend(row)
        norms.append(normalized_mean_error(row))
    return SweepResult(grid, tuple(norms), tuple(cells))


def _measure_at_gamma(
    frames: list[SegmentedFrame],
    probes: tuple[Probe, ...],
    config: RegistrationConfig,
    intrinsics: CameraIntrinsics | None,
    volume_center,
    tsdf_side_mm: float,
    tsdf_resolution: int,
    smooth_iterations: int,
) -> dict[str, float]:
    """Probe values for one pipeline run; failures come back as NaN."""
    failed = {p.name: float("nan") for p in probes}
    try:
        result = run_sequence(frames, config, intrinsics)
        by_index = {f.frame_index: f for f in frames}
        volume = TsdfVolume(volume_center, tsdf_side_mm, tsdf_resolution)
        for pose in result.poses:
            volume = integrate(
                volume, by_index[pose.frame_index].object_cloud, pose.world_from_frame
            )
        mesh = laplacian_smooth(extract_mesh(volume), smooth_iterations)
    except InHandError as exc:
        log.warning(
            "gamma %g: pipeline failed (%s); recording failed cells", config.gamma_t, exc
        )
        return failed
    out: dict[str, float] = {}
    for probe in probes:
        try:
            out[probe.name] = float(measure_dimensions(mesh, [probe])[probe.name])
        except InHandError as exc:
            log.warning("gamma %g: probe %r failed (%s)", config.gamma_t, probe.name, exc)
            out[probe.name] = float("nan")
    return out


# The four sparse-energy configurations scored by compare_energies, as
# (row label, anchor tag, correspondence tags included in the solve).
# The anchor set must be present and non-empty for the row to count:
# without it the solve would silently degrade to a different config.
_ENERGY_CONFIGS: tuple[tuple[str, str, frozenset], ...] = (
    ("contact+visual", "contact", frozenset({"contact", "feat3d", "feat2d"})),
    ("contact", "contact", frozenset({"contact"})),
    ("detector+visual", "detector", frozenset({"detector", "feat3d", "feat2d"})),
    ("detector", "detector", frozenset({"detector"})),
)


@dataclass(frozen=True)
class EnergyRow:
    """Pooled annotation error for one sparse-energy configuration."""

    config: str
    mean: float
    stdev: float
    pair_count: int = 0
    available: bool = True


def compare_energies(
    frames: Sequence[SegmentedFrame],
    annotations,
    *,
    config: RegistrationConfig = RegistrationConfig(),
    intrinsics: CameraIntrinsics | None = None,
) -> tuple[EnergyRow, ...]:
    """Score the four sparse-energy configurations on annotated pairs.

    Every annotated frame pair is solved four ways -- contact+visual,
    contact only, detector+visual, detector only -- and each solve is
    scored by :func:`pairwise_annotation_error` over that pair's
    annotated points; rows pool the error over all annotated pairs.  ICP
    and fusion are deliberately excluded so the rows compare the sparse
    solves alone.  A configuration that cannot be solved on every pair
    (no detector boxes or intrinsics, a dropped contact term, fewer than
    three effective pairs) comes back marked unavailable.
    """
    frames = list(frames)
    annotations = list(annotations)
    if not annotations:
        raise EmptyInputError("sequence carries no annotated pairs")
    by_index = {f.frame_index: f for f in frames}
    build_cfg = replace(config, use_contact=True, use_detector=True)

    # Per config: one (mean, stdev, count) triple per annotated pair.
    stats: dict[str, list[tuple[float, float, int]]] = {
        name: [] for name, _, _ in _ENERGY_CONFIGS
    }
    usable = {name: True for name, _, _ in _ENERGY_CONFIGS}
    for ann in annotations:
        try:
            prev, curr = by_index[ann.frame_a], by_index[ann.frame_b]
        except KeyError as exc:
            raise ValueError(f"annotation references missing frame {exc}") from None
        sets = build_correspondences(prev, curr, build_cfg, intrinsics)
        present = {cs.tag for cs in sets if len(cs) > 0}
        for name, anchor, tags in _ENERGY_CONFIGS:
            chosen = [cs for cs in sets if cs.tag in tags]
            try:
                if anchor not in present:
                    raise UnderConstrainedError(f"no {anchor} correspondences")
                pair_transform = align_sparse(chosen, config)
            except UnderConstrainedError as exc:
                if usable[name]:
                    log.warning(
                        "config %r unavailable: frames (%d, %d): %s",
                        name,
                        ann.frame_a,
                        ann.frame_b,
                        exc,
                    )
                usable[name] = False
                continue
            mean, stdev = pairwise_annotation_error(
                zip(ann.points_b, ann.points_a), pair_transform
            )
            stats[name].append((mean, stdev, len(ann.points_a)))

    rows = []
    for name, _, _ in _ENERGY_CONFIGS:
        if not usable[name]:
            rows.append(EnergyRow(name, float("nan"), float("nan"), 0, False))
            continue
        per_pair = stats[name]
        total = sum(n for _, _, n in per_pair)
        mean = sum(m * n for m, _, n in per_pair) / total
        # Pool exactly: E[x^2] recombines from each pair's (mean, stdev).
        second = sum((s * s + m * m) * n for m, s, n in per_pair) / total
        stdev = math.sqrt(max(second - mean * mean, 0.0))
        rows.append(EnergyRow(name, float(mean), float(stdev), total))
    return tuple(rows)


def _write_atomic(path, write_rows) -> None:
    """Write CSV via a sibling temp file and rename, never a partial file."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".part")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            write_rows(csv.writer(fh))
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def sweep_to_csv(result: SweepResult, path) -> None:
    """One row per (gamma, probe), with the per-gamma normalized mean repeated."""

    def rows(writer) -> None:
        writer.writerow(
            [
                "gamma",
                "probe",
                "kind",
                "expected",
                "measured",
                "abs_error",
                "normalized_mean_error",
            ]
        )
        for gamma, norm in zip(result.gammas, result.normalized_errors):
            for cell in result.cells_at(gamma):
                writer.writerow(
                    [
                        repr(gamma),
                        cell.probe,
                        cell.kind,
                        repr(cell.expected),
                        repr(cell.measured),
                        repr(cell.error),
                        repr(norm),
                    ]
                )

    _write_atomic(path, rows)


def energies_to_csv(rows: Sequence[EnergyRow], path) -> None:
    """One row per (config, statistic); unavailable rows carry empty values."""

    def write(writer) -> None:
        writer.writerow(["config", "statistic", "value", "available"])
        for row in rows:
            for stat, value in (("mean", row.mean), ("stdev", row.stdev)):
                writer.writerow(
                    [
                        row.config,
                        stat,
                        repr(value) if row.available else "",
                        int(row.available),
                    ]
                )

    _write_atomic(path, write)
