"""Instance sampling: multi-scale random draws and regional stratification.

A plan fixes how many instances come from each scale; the raw ceiling
counts ``ceil(s * ratio_j)`` can overshoot the target, so the plan is
repaired by decrementing the scale with the largest fractional overshoot
(ties go to the lowest scale index) until the counts sum to ``s`` exactly.
Each repaired count therefore never drops more than 1 below its ceiling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class SamplingPlan:
    target: int
    scales: list
    ratios: list
    counts: list


@dataclass
class InstanceView:
    """One sampled instance seen at one scale."""

    instance: int
    scale: int
    vector: np.ndarray


def mris_plan(s: int, ratios, scales=None) -> SamplingPlan:
    """Per-scale counts for a target of ``s`` instances."""
    if s < 1:
        raise ConfigError(f"target count must be positive, got {s}")
    ratios = [float(r) for r in ratios]
    if not ratios:
        raise ConfigError("empty ratio set")
    if any(r < 0 or r > 1 for r in ratios):
        raise ConfigError(f"ratios must lie in [0, 1]: {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)!r}")
    if scales is None:
        scales = list(range(len(ratios)))
    elif len(scales) != len(ratios):
        raise ConfigError("one ratio per scale required")

    counts = [math.ceil(s * r) for r in ratios]
    while sum(counts) > s:
        overshoot = [c - s * r for c, r in zip(counts, ratios)]
        counts[overshoot.index(max(overshoot))] -= 1
    return SamplingPlan(target=s, scales=list(scales), ratios=ratios, counts=counts)


def _draw(rng, population: int, count: int):
    """Uniform draw; falls back to replacement only when the stratum is
    smaller than its quota."""
    if count <= population:
        return rng.choice(population, size=count, replace=False)
    return rng.integers(0, population, size=count)


def mris_sample(slide, plan: SamplingPlan, rng) -> list:
    """Draw ``plan.counts[j]`` instances per scale, attach each one's
    scale-j view, merge and shuffle. Views share one feature width, so the
    result stacks directly into a bag matrix."""
    n_scales = slide.views.shape[0]
    out = []
    for scale, count in zip(plan.scales, plan.counts):
        if not 0 <= scale < n_scales:
            raise ConfigError(f"slide {slide.slide_id} has no scale {scale}")
        if count == 0:
            continue
        for idx in _draw(rng, slide.n_instances, count):
            out.append(InstanceView(int(idx), int(scale), slide.views[scale, idx]))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def regional_random_sample(slide, n_regions: int, s: int, rng, scale: int = 0) -> list:
    """Stratify the draw over spatial regions: uniform quotas over the
    non-empty regions, then a uniform draw within each."""
    if n_regions < 1:
        raise ConfigError(f"n_regions must be >= 1, got {n_regions}")
    regions = np.asarray(slide.region_ids)
    if regions.min() < 0 or regions.max() >= n_regions:
        raise ConfigError(
            f"slide {slide.slide_id} carries region ids outside [0, {n_regions})")
    present = [r for r in range(n_regions) if (regions == r).any()]
    quotas = mris_plan(s, [1.0 / len(present)] * len(present), scales=present)
    out = []
    for region, count in zip(quotas.scales, quotas.counts):
        members = np.flatnonzero(regions == region)
        for k in _draw(rng, len(members), count):
            idx = members[k]
            out.append(InstanceView(int(idx), int(scale), slide.views[scale, idx]))
    order = rng.permutation(len(out))
    return [out[i] for i in order]
