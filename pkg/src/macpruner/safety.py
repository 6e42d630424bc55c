"""Four-stage strategy validation and correction.

Stage 1 clamps individual ratios/multipliers to dataset-specific limits,
stage 2 moves proposals out of danger zones recorded around failed
configurations, stage 3 rejects strategies whose exactly-predicted total
MAC reduction exceeds the dataset cap, and stage 4 applies absolute
guardrails as the last defense. The pipeline iterates to a fixed point, so
validation is idempotent and its output always revalidates cleanly.

Dataset profiles carry the published limit tables; the factor limits bound
how far a group's effective pruning ratio may exceed the run's target
ratio (additive headroom — the guaranteed-safe presets sit exactly on this
boundary), while absolute guardrails cap effective ratios outright on
imagenet-like profiles and multipliers on cifar-like ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .macprof import InfeasibleStrategyError
from .pruner import MAX_UNIT_RATIO, MULTIPLIER_NAMES, Strategy, effective_ratios

_EPS = 1e-9
DEFAULT_ZONE_RADIUS = 0.05
_ZONE_ESCAPE_MARGIN = 0.005

PROFILES = ("imagenet-like", "cifar-like", "synthetic")


class UnrecoverableStrategyError(ValueError):
    """Strategy cannot be corrected into the safe region; use a fallback preset."""


@dataclass(frozen=True)
class SafetyLimits:
    dataset_profile: str
    max_mlp_factor: float | None
    max_qkv_factor: float | None
    proj_allowed: bool
    head_allowed: bool
    total_reduction_cap_pct: float | None
    absolute_mlp_cap: float | None
    absolute_qkv_cap: float | None
    collapse_threshold_pct: float
    # absolute caps bound effective ratios on imagenet-like profiles and raw
    # multipliers on cifar-like ones
    absolute_caps_apply_to: str = "effective"


def limits_for_profile(profile: str) -> SafetyLimits:
    if profile == "imagenet-like":
        return SafetyLimits(
            dataset_profile=profile,
            max_mlp_factor=0.6, max_qkv_factor=0.3,
            proj_allowed=False, head_allowed=False,
            total_reduction_cap_pct=40.0,
            absolute_mlp_cap=0.40, absolute_qkv_cap=0.25,
            collapse_threshold_pct=1.0,
            absolute_caps_apply_to="effective",
        )
    if profile == "cifar-like":
        return SafetyLimits(
            dataset_profile=profile,
            max_mlp_factor=0.2, max_qkv_factor=0.1,
            proj_allowed=True, head_allowed=True,
            total_reduction_cap_pct=None,
            absolute_mlp_cap=1.6, absolute_qkv_cap=1.2,
            collapse_threshold_pct=30.0,
            absolute_caps_apply_to="multiplier",
        )
    if profile == "synthetic":
        return SafetyLimits(
            dataset_profile=profile,
            max_mlp_factor=None, max_qkv_factor=None,
            proj_allowed=True, head_allowed=True,
            total_reduction_cap_pct=None,
            absolute_mlp_cap=None, absolute_qkv_cap=None,
            collapse_threshold_pct=1.0,
            absolute_caps_apply_to="effective",
        )
    raise ValueError(f"unknown dataset profile {profile!r}")


@dataclass(frozen=True)
class DangerZone:
    """Neighborhood around a failed configuration that proposals must avoid."""

    criterion: str
    round_to: int
    knobs: tuple[float, ...]
    radius: float = DEFAULT_ZONE_RADIUS

    @classmethod
    def from_strategy(cls, strategy: Strategy,
                      radius: float = DEFAULT_ZONE_RADIUS) -> "DangerZone":
        return cls(criterion=strategy.criterion, round_to=strategy.round_to,
                   knobs=strategy.knobs(), radius=radius)


def in_danger_zone(candidate: Strategy,
                   zones: list[DangerZone]) -> tuple[bool, DangerZone | None]:
    """True iff criterion and round_to match a zone and every knob lies
    within its radius (inclusive)."""
    knobs = candidate.knobs()
    for zone in zones:
        if zone.criterion != candidate.criterion or zone.round_to != candidate.round_to:
            continue
        if len(zone.knobs) != len(knobs):
            continue
        if all(abs(k - z) <= zone.radius + _EPS for k, z in zip(knobs, zone.knobs)):
            return True, zone
    return False, None


def zones_from_history(history) -> list[DangerZone]:
    """Danger zones for every collapsed revision in a search history."""
    zones = []
    for record in history or []:
        status = getattr(record, "status", None)
        if status == "collapsed":
            zones.append(DangerZone.from_strategy(record.strategy))
    return zones


def detect_collapse(zero_shot_acc: float, limits: SafetyLimits | str) -> bool:
    """Accuracy collapse: strictly below the profile threshold."""
    if isinstance(limits, str):
        limits = limits_for_profile(limits)
    if not 0.0 <= zero_shot_acc <= 100.0:
        raise ValueError(f"accuracy must lie in [0, 100], got {zero_shot_acc}")
    return zero_shot_acc < limits.collapse_threshold_pct


def fallback_preset(dataset_profile: str, target_ratio: float) -> Strategy:
    """Guaranteed-safe strategy for a profile and target MAC-reduction ratio.

    Passes :func:`validate_and_correct` unchanged for any target ratio in
    (0, 1] (property-tested on a dense grid).
    """
    if not 0.0 < target_ratio <= 1.0:
        raise ValueError(f"target_ratio must lie in (0, 1], got {target_ratio}")
    if dataset_profile == "cifar-like":
        multipliers = {
            "qkv": min(1.0, 0.5 / target_ratio),
            "mlp": min(1.4, 0.7 / target_ratio),
            "proj": 0.0,
            "head": 0.0,
        }
        round_to = 1
    else:  # imagenet-like (synthetic follows the conservative preset)
        multipliers = {
            "qkv": min(0.8, 0.25 / target_ratio),
            "mlp": min(1.0, 0.4 / target_ratio),
            "proj": 0.0,
            "head": 0.0,
        }
        round_to = 2
    return Strategy.vit(base_ratio=target_ratio, multipliers=multipliers,
                        criterion="taylor", round_to=round_to,
                        rationale="guaranteed-safe fallback preset")


@dataclass
class SafetyContext:
    """Optional graph context enabling the exact stage-3 reduction estimate."""

    graph: object
    deps: object
    baseline_macs: int


def _set_multiplier(strategy: Strategy, key: str, value: float) -> Strategy:
    mult = strategy.multipliers()
    mult[key] = value
    return replace(strategy, group_multipliers=tuple(
        (k, float(mult.get(k, 0.0))) for k in MULTIPLIER_NAMES))


def _clamp_effective(strategy: Strategy, key: str, cap: float,
                     log: list[str], reason: str) -> Strategy:
    base = strategy.base_ratio or 0.0
    if base <= 0:
        return strategy
    eff = base * strategy.multipliers().get(key, 0.0)
    if eff > cap + _EPS:
        new_mult = max(0.0, cap / base)
        log.append(f"{reason}: {key} effective ratio {eff:.3f} -> {cap:.3f}")
        return _set_multiplier(strategy, key, new_mult)
    return strategy


def _stage1_individual(strategy: Strategy, limits: SafetyLimits,
                       target_ratio: float | None, log: list[str]) -> Strategy:
    if strategy.mode == "cnn":
        ratio = strategy.channel_pruning_ratio
        clamped = min(MAX_UNIT_RATIO, max(0.0, ratio))
        if abs(clamped - ratio) > _EPS:
            log.append(f"stage1: channel ratio {ratio:.3f} -> {clamped:.3f}")
            strategy = replace(strategy, channel_pruning_ratio=clamped)
        return strategy

    mult = strategy.multipliers()
    if not limits.proj_allowed and mult.get("proj", 0.0) > _EPS:
        log.append(f"stage1: proj multiplier {mult['proj']:.3f} -> 0.0 "
                   f"(projection pruning disallowed on {limits.dataset_profile})")
        strategy = _set_multiplier(strategy, "proj", 0.0)
    if not limits.head_allowed and strategy.multipliers().get("head", 0.0) > _EPS:
        log.append(f"stage1: head multiplier {strategy.multipliers()['head']:.3f} -> 0.0 "
                   f"(head pruning disallowed on {limits.dataset_profile})")
        strategy = _set_multiplier(strategy, "head", 0.0)

    # per-unit capacity floor applies to every group
    for key in MULTIPLIER_NAMES:
        strategy = _clamp_effective(strategy, key, MAX_UNIT_RATIO, log,
                                    "stage1: capacity floor")
    if target_ratio is not None:
        if limits.max_mlp_factor is not None:
            cap = min(MAX_UNIT_RATIO, target_ratio + limits.max_mlp_factor)
            strategy = _clamp_effective(strategy, "mlp", cap, log, "stage1: mlp limit")
        if limits.max_qkv_factor is not None:
            cap = min(MAX_UNIT_RATIO, target_ratio + limits.max_qkv_factor)
            strategy = _clamp_effective(strategy, "qkv", cap, log, "stage1: qkv limit")
    return strategy


def _stage2_history(strategy: Strategy, zones: list[DangerZone],
                    log: list[str]) -> Strategy:
    for _ in range(16):
        inside, zone = in_danger_zone(strategy, zones)
        if not inside:
            return strategy
        knobs = strategy.knobs()
        best = None  # (cost, knob index, new value)
        for i, (k, z) in enumerate(zip(knobs, zone.knobs)):
            for direction in (-1.0, 1.0):
                candidate = z + direction * (zone.radius + _ZONE_ESCAPE_MARGIN)
                if candidate < 0.0:
                    continue
                if strategy.mode == "cnn" and candidate > MAX_UNIT_RATIO:
                    continue
                cost = abs(candidate - k)
                if best is None or cost < best[0]:
                    best = (cost, i, candidate)
        if best is None:
            raise UnrecoverableStrategyError(
                "no danger-zone escape available along any axis")
        _, idx, value = best
        log.append(f"stage2: knob {idx} moved {knobs[idx]:.3f} -> {value:.3f} "
                   f"to leave a danger zone")
        if strategy.mode == "cnn":
            strategy = replace(strategy, channel_pruning_ratio=value)
        elif idx == 0:
            strategy = replace(strategy, base_ratio=value)
        else:
            strategy = _set_multiplier(strategy, MULTIPLIER_NAMES[idx - 1], value)
    raise UnrecoverableStrategyError("could not escape danger zones")


def _stage3_total_cap(strategy: Strategy, limits: SafetyLimits,
                      context: SafetyContext | None, log: list[str]) -> Strategy:
    if (strategy.mode != "vit" or context is None
            or limits.total_reduction_cap_pct is None):
        return strategy
    from .macprof import predict_pruned_macs

    try:
        predicted = predict_pruned_macs(context.graph, context.deps, strategy)
    except InfeasibleStrategyError as exc:
        raise UnrecoverableStrategyError(str(exc)) from exc
    reduction_pct = (1.0 - predicted / context.baseline_macs) * 100.0
    if reduction_pct > limits.total_reduction_cap_pct + 1e-6:
        raise UnrecoverableStrategyError(
            f"estimated total reduction {reduction_pct:.1f}% exceeds the "
            f"{limits.total_reduction_cap_pct:.0f}% cap for {limits.dataset_profile}")
    return strategy


def _stage4_guardrails(strategy: Strategy, limits: SafetyLimits,
                       log: list[str]) -> Strategy:
    if strategy.mode != "vit":
        return strategy
    caps = (("mlp", limits.absolute_mlp_cap), ("qkv", limits.absolute_qkv_cap))
    if limits.absolute_caps_apply_to == "multiplier":
        mult = strategy.multipliers()
        for key, cap in caps:
            if cap is not None and mult.get(key, 0.0) > cap + _EPS:
                log.append(f"stage4: {key} multiplier {mult[key]:.3f} -> {cap:.3f} "
                           f"(absolute guardrail)")
                strategy = _set_multiplier(strategy, key, cap)
    else:
        for key, cap in caps:
            if cap is not None:
                strategy = _clamp_effective(strategy, key, cap, log,
                                            "stage4: absolute guardrail")
    return strategy


def validate_and_correct(strategy: Strategy, history, limits: SafetyLimits,
                         *, target_ratio: float | None = None,
                         context: SafetyContext | None = None,
                         extra_zones: list[DangerZone] | None = None,
                         ) -> tuple[Strategy, list[str]]:
    """Run the four-stage pipeline until it reaches a fixed point.

    Raises :class:`UnrecoverableStrategyError` when no safe correction
    exists; the caller should substitute :func:`fallback_preset`.
    """
    strategy.validate()
    zones = zones_from_history(history) + list(extra_zones or [])
    log: list[str] = []
    current = strategy
    for _ in range(6):
        before = current
        current = _stage1_individual(current, limits, target_ratio, log)
        current = _stage2_history(current, zones, log)
        current = _stage3_total_cap(current, limits, context, log)
        current = _stage4_guardrails(current, limits, log)
        if current == before:
            return current, log
    raise UnrecoverableStrategyError("validation did not reach a fixed point")
