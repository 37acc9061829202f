"""Offline threshold profiling and the online top-k grouping oracle.

The offline path pools each run's values per (layer, kind) cell, cuts the
pooled distribution at the configured tail ratios with a midpoint-of-order-
statistics rule, and averages the per-run threshold quads into a profile.
The online path ranks a single vector and takes exact top-k tails; it is
the ground truth the threshold grouping is validated against.

Key design decisions:
- Threshold = midpoint of the k-th and (k+1)-th order statistics with
  k = round(ratio * n), so the cut fraction is exact up to integer rounding
  and ties. Counts round half up.
- A ratio of 0 collapses its band to just beyond the data range (one float
  step past the extremes), so the band is empty on the profiled data.
- Quads that would violate the ordering t_lo_outer <= t_lo_inner <= 0 <=
  t_hi_inner <= t_hi_outer (for example from single-signed data) raise
  DegenerateDistributionError rather than silently misgroup.
- Averaging across runs is an unweighted mean per threshold component;
  runs must partition the trace's tokens.
- The bulk path partitions float32 blocks in place but computes midpoints
  in float64 from the selected order statistics, which keeps it bit-equal
  to the scalar path on half-precision trace data.
"""
from __future__ import annotations

import dataclasses
import math
from typing import Iterable, Sequence

import numpy as np
import yaml

from .errors import (
    ConfigError,
    DegenerateDistributionError,
    FormatError,
    ProfilingError,
)
from .quant import GroupLabel
from .trace import GroupConfig, KvKind, KvTrace

PROFILE_FORMAT = "threshold-profile-v1"

_QUAD_FIELDS = ("t_lo_outer", "t_lo_inner", "t_hi_inner", "t_hi_outer")


@dataclasses.dataclass(frozen=True)
class ThresholdQuad:
    """Four thresholds cutting a distribution into Outer/Middle/Inner bands.

    Invariants: t_lo_outer <= t_lo_inner <= 0 <= t_hi_inner <= t_hi_outer,
    and all components are finite.
    """

    t_lo_outer: float
    t_lo_inner: float
    t_hi_inner: float
    t_hi_outer: float

    def __post_init__(self) -> None:
        values = self.as_tuple()
        if not all(math.isfinite(v) for v in values):
            raise ConfigError(f"thresholds must be finite, got {values}")
        if not (
            self.t_lo_outer <= self.t_lo_inner
            and self.t_lo_inner <= 0.0 <= self.t_hi_inner
            and self.t_hi_inner <= self.t_hi_outer
        ):
            raise ConfigError(f"threshold ordering violated: {values}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.t_lo_outer, self.t_lo_inner, self.t_hi_inner, self.t_hi_outer)


@dataclasses.dataclass(frozen=True)
class ProfileProvenance:
    """How a profile was produced: run count, config, and source digest."""

    num_runs: int
    group_config: GroupConfig
    source_trace_digest: str


@dataclasses.dataclass
class ThresholdProfile:
    """Averaged threshold quads per (layer, kind) cell plus provenance."""

    quads: dict[tuple[int, KvKind], ThresholdQuad]
    provenance: ProfileProvenance

    def quad(self, layer: int, kind: KvKind) -> ThresholdQuad:
        try:
            return self.quads[(layer, kind)]
        except KeyError:
            raise ConfigError(
                f"profile has no thresholds for layer={layer} kind={kind.value}"
            ) from None

    def cells(self) -> list[tuple[int, KvKind]]:
        return sorted(self.quads, key=lambda cell: (cell[0], cell[1].bit))


# ---------------------------------------------------------------------------
# Threshold extraction
# ---------------------------------------------------------------------------


def _round_count(x: float) -> int:
    """Half-up count rounding; matches the code-rounding convention."""
    return int(math.floor(x + 0.5))


def _check_pool_size(n: int, config: GroupConfig) -> None:
    if n < 2:
        raise ProfilingError(f"need at least 2 values to cut, got {n}")
    positive = [r for r in (config.ratio_outer, config.ratio_inner) if r > 0.0]
    if positive and n * min(positive) < 2.0:
        need = math.ceil(2.0 / min(positive))
        raise ProfilingError(
            f"too few values for the requested ratios: {n} < {need}"
        )


def extract_quad(values: np.ndarray, config: GroupConfig | None = None) -> ThresholdQuad:
    """Cut one pooled sample into a threshold quad.

    The outer cuts take ratio_outer/2 per signed tail; the inner cut takes
    ratio_inner of the smallest magnitudes, symmetric around zero. Each
    threshold is the midpoint of the two order statistics bracketing the
    cut, clamped to the data range at the ends.

    Args:
        values: Sample values; flattened before cutting.
        config: Grouping ratios; defaults to GroupConfig().

    Returns:
        ThresholdQuad for the sample.

    Raises:
        ProfilingError: Too few values for the requested ratios.
        DegenerateDistributionError: All values equal, or the cuts would
            violate the quad ordering (for example single-signed data).
    """
    config = config or GroupConfig()
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size and not np.all(np.isfinite(arr)):
        raise ConfigError("values must be finite")
    n = arr.size
    _check_pool_size(n, config)
    mn = float(arr.min())
    mx = float(arr.max())
    if mn == mx:
        raise DegenerateDistributionError(
            f"all {n} values equal {mn}; no thresholds exist"
        )

    if config.ratio_outer == 0.0:
        t_lo_outer = float(np.nextafter(mn, -np.inf))
        t_hi_outer = float(np.nextafter(mx, np.inf))
    else:
        k = _round_count(config.ratio_outer / 2.0 * n)
        k = max(1, min(k, n - 1))
        part = np.partition(arr, [k - 1, k, n - k - 1, n - k])
        t_lo_outer = (part[k - 1] + part[k]) / 2.0
        t_hi_outer = (part[n - k - 1] + part[n - k]) / 2.0

    mags = np.abs(arr)
    if config.ratio_inner == 0.0:
        t_hi_inner = max(0.0, float(np.nextafter(mags.min(), -np.inf)))
    else:
        k_in = _round_count(config.ratio_inner * n)
        if k_in >= n:
            t_hi_inner = float(mags.max())
        else:
            k_in = max(1, k_in)
            mp = np.partition(mags, [k_in - 1, k_in])
            t_hi_inner = (mp[k_in - 1] + mp[k_in]) / 2.0

    quad = (t_lo_outer, -t_hi_inner, t_hi_inner, t_hi_outer)
    if not (t_lo_outer <= -t_hi_inner and t_hi_inner <= t_hi_outer):
        raise DegenerateDistributionError(
            f"cuts collapse into an invalid quad {quad}; the sample does not "
            "support a symmetric inner band between the outer tails"
        )
    return ThresholdQuad(*quad)


def _bulk_run_quads(
    block: np.ndarray, num_runs: int, config: GroupConfig
) -> np.ndarray:
    """Per-run quads for equal-sized contiguous runs of one (layer, kind) block.

    Bit-equal to calling extract_quad per run: selection touches only values
    the block already holds, and midpoints are computed in float64.
    """
    num_tokens, vector_len = block.shape
    chunk = num_tokens // num_runs
    n = chunk * vector_len
    _check_pool_size(n, config)
    data = block.reshape(num_runs, n)
    mn = data.min(axis=1).astype(np.float64)
    mx = data.max(axis=1).astype(np.float64)
    flat = np.where(mn == mx)[0]
    if flat.size:
        raise DegenerateDistributionError(
            f"all values equal ({mn[flat[0]]}) in run {int(flat[0])}"
        )

    quads = np.empty((num_runs, 4), dtype=np.float64)
    scratch = data.copy()
    if config.ratio_outer == 0.0:
        quads[:, 0] = np.nextafter(mn, -np.inf)
        quads[:, 3] = np.nextafter(mx, np.inf)
    else:
        k = _round_count(config.ratio_outer / 2.0 * n)
        k = max(1, min(k, n - 1))
        scratch.partition([k - 1, k, n - k - 1, n - k], axis=1)
        picked = scratch[:, [k - 1, k, n - k - 1, n - k]].astype(np.float64)
        quads[:, 0] = (picked[:, 0] + picked[:, 1]) / 2.0
        quads[:, 3] = (picked[:, 2] + picked[:, 3]) / 2.0

    np.abs(scratch, out=scratch)
    if config.ratio_inner == 0.0:
        low = scratch.min(axis=1).astype(np.float64)
        quads[:, 2] = np.maximum(0.0, np.nextafter(low, -np.inf))
    else:
        k_in = _round_count(config.ratio_inner * n)
        if k_in >= n:
            quads[:, 2] = np.maximum(np.abs(mn), np.abs(mx))
        else:
            k_in = max(1, k_in)
            scratch.partition([k_in - 1, k_in], axis=1)
            picked = scratch[:, [k_in - 1, k_in]].astype(np.float64)
            quads[:, 2] = (picked[:, 0] + picked[:, 1]) / 2.0
    quads[:, 1] = -quads[:, 2]

    bad = np.where((quads[:, 0] > quads[:, 1]) | (quads[:, 2] > quads[:, 3]))[0]
    if bad.size:
        run = int(bad[0])
        raise DegenerateDistributionError(
            f"cuts collapse into an invalid quad {tuple(quads[run])} in run {run}"
        )
    return quads


def _resolve_runs(
    num_tokens: int, runs: int | Sequence[Sequence[int]]
) -> list[np.ndarray]:
    """Turn a run spec into explicit token-index lists partitioning the trace."""
    if isinstance(runs, int):
        if runs < 1:
            raise ConfigError(f"need at least one run, got {runs}")
        if num_tokens < runs:
            raise ConfigError(
                f"cannot split {num_tokens} tokens into {runs} runs"
            )
        return [
            chunk for chunk in np.array_split(np.arange(num_tokens), runs)
        ]
    resolved = []
    seen = np.zeros(num_tokens, dtype=bool)
    for i, indices in enumerate(runs):
        idx = np.asarray(list(indices), dtype=np.int64)
        if idx.size == 0:
            raise ConfigError(f"run {i} is empty")
        if idx.min() < 0 or idx.max() >= num_tokens:
            raise ConfigError(
                f"run {i} has token indices outside [0, {num_tokens})"
            )
        if np.unique(idx).size != idx.size or np.any(seen[idx]):
            raise ConfigError(f"run {i} repeats a token index")
        seen[idx] = True
        resolved.append(idx)
    if not np.all(seen):
        missing = int(np.where(~seen)[0][0])
        raise ConfigError(
            f"runs must partition all tokens; token {missing} is unassigned"
        )
    return resolved


def profile(
    trace: KvTrace,
    config: GroupConfig | None = None,
    runs: int | Sequence[Sequence[int]] = 100,
) -> ThresholdProfile:
    """Profile a trace into per-(layer, kind) threshold quads.

    Each run pools its tokens' values across the whole vector dimension,
    yields one quad per cell, and the profile is the unweighted mean of the
    per-run quads.

    Args:
        trace: Source trace.
        config: Grouping ratios; defaults to GroupConfig().
        runs: Either a run count (tokens split into that many contiguous
            chunks) or explicit per-run token-index sequences. Runs must
            partition the trace's tokens.

    Returns:
        ThresholdProfile with provenance (run count, config, trace digest).
    """
    config = config or GroupConfig()
    run_indices = _resolve_runs(trace.meta.num_tokens, runs)
    num_runs = len(run_indices)
    equal_chunks = (
        isinstance(runs, int) and trace.meta.num_tokens % num_runs == 0
    )

    quads: dict[tuple[int, KvKind], ThresholdQuad] = {}
    for layer, kind in trace.cells():
        block = trace.tokens(layer, kind)
        if equal_chunks:
            per_run = _bulk_run_quads(block, num_runs, config)
        else:
            per_run = np.array(
                [
                    extract_quad(block[idx].ravel(), config).as_tuple()
                    for idx in run_indices
                ],
                dtype=np.float64,
            )
        mean = per_run.mean(axis=0)
        quads[(layer, kind)] = ThresholdQuad(*(float(v) for v in mean))

    return ThresholdProfile(
        quads=quads,
        provenance=ProfileProvenance(
            num_runs=num_runs,
            group_config=config,
            source_trace_digest=trace.content_digest(),
        ),
    )


# ---------------------------------------------------------------------------
# Online top-k oracle
# ---------------------------------------------------------------------------


def online_topk_grouping(
    values: np.ndarray, config: GroupConfig | None = None
) -> np.ndarray:
    """Group one vector by exact ranking instead of thresholds.

    Takes round(ratio_outer/2 * n) elements per signed tail as Outer, then
    round(ratio_inner * n) smallest magnitudes of the rest as Inner; the
    leftovers are Middle with the side given by the value's sign (ties to
    High). Equal values break ties by index (stable order), so the result
    is deterministic even on constant input.

    Returns:
        int8 array of GroupLabel values.
    """
    config = config or GroupConfig()
    arr = np.asarray(values, dtype=np.float64).ravel()
    n = arr.size
    if n == 0:
        raise ProfilingError("cannot group an empty vector")
    labels = np.full(n, GroupLabel.MIDDLE_HIGH, dtype=np.int8)
    labels[arr < 0.0] = GroupLabel.MIDDLE_LOW

    order = np.argsort(arr, kind="stable")
    k_tail = _round_count(config.ratio_outer / 2.0 * n)
    k_tail = min(k_tail, n // 2)
    if k_tail:
        labels[order[:k_tail]] = GroupLabel.OUTER_LOW
        labels[order[n - k_tail :]] = GroupLabel.OUTER_HIGH

    remaining = order[k_tail : n - k_tail] if k_tail else order
    k_in = _round_count(config.ratio_inner * n)
    k_in = min(k_in, remaining.size)
    if k_in:
        mag_order = np.argsort(np.abs(arr[remaining]), kind="stable")
        labels[remaining[mag_order[:k_in]]] = GroupLabel.INNER
    return labels


# ---------------------------------------------------------------------------
# Profile files
# ---------------------------------------------------------------------------


def profile_to_dict(prof: ThresholdProfile) -> dict:
    """Plain-data form of a profile, ready for YAML."""
    cfg = prof.provenance.group_config
    entries = []
    for layer, kind in prof.cells():
        quad = prof.quads[(layer, kind)]
        entry = {"layer": layer, "kind": kind.value}
        entry.update(
            {name: float(getattr(quad, name)) for name in _QUAD_FIELDS}
        )
        entries.append(entry)
    return {
        "format": PROFILE_FORMAT,
        "provenance": {
            "num_runs": prof.provenance.num_runs,
            "source_trace_digest": prof.provenance.source_trace_digest,
            "group_config": {
                "ratio_outer": cfg.ratio_outer,
                "ratio_middle": cfg.ratio_middle,
                "ratio_inner": cfg.ratio_inner,
                "bits_middle": cfg.bits_middle,
                "bits_outlier": cfg.bits_outlier,
                "segment_len": cfg.segment_len,
            },
        },
        "thresholds": entries,
    }


def profile_from_dict(data: dict) -> ThresholdProfile:
    """Parse and validate plain data into a profile; fails closed."""
    try:
        if data["format"] != PROFILE_FORMAT:
            raise FormatError(
                f"unsupported profile format {data['format']!r}; "
                f"expected {PROFILE_FORMAT!r}"
            )
        prov = data["provenance"]
        cfg_data = prov["group_config"]
        config = GroupConfig(
            ratio_outer=float(cfg_data["ratio_outer"]),
            ratio_middle=float(cfg_data["ratio_middle"]),
            ratio_inner=float(cfg_data["ratio_inner"]),
            bits_middle=int(cfg_data["bits_middle"]),
            bits_outlier=int(cfg_data["bits_outlier"]),
            segment_len=int(cfg_data["segment_len"]),
        )
        quads: dict[tuple[int, KvKind], ThresholdQuad] = {}
        for entry in data["thresholds"]:
            cell = (int(entry["layer"]), KvKind(entry["kind"]))
            if cell in quads:
                raise FormatError(
                    f"duplicate thresholds for layer={cell[0]} kind={cell[1].value}"
                )
            quads[cell] = ThresholdQuad(
                *(float(entry[name]) for name in _QUAD_FIELDS)
            )
        if not quads:
            raise FormatError("profile has no threshold entries")
        provenance = ProfileProvenance(
            num_runs=int(prov["num_runs"]),
            group_config=config,
            source_trace_digest=str(prov["source_trace_digest"]),
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise FormatError(f"malformed profile data: {exc}") from exc
    return ThresholdProfile(quads=quads, provenance=provenance)


def save_profile(prof: ThresholdProfile, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(profile_to_dict(prof), fh, sort_keys=False)


def load_profile(path) -> ThresholdProfile:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise FormatError(f"profile {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise FormatError(f"profile {path} does not hold a mapping")
    return profile_from_dict(data)
