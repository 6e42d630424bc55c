"""Pluggable strategy oracles.

Two interchangeable proposal paths drive the search: a deterministic
history-aware heuristic (quadratic-model initialization, secant refinement
on bracketing attempts, repetition and danger-zone avoidance), and an
LLM-backed oracle speaking a chat-completion HTTP protocol with the
published prompt templates, strict first-balanced-JSON extraction, token
accounting, and fallback to guaranteed-safe presets on any parse or
transport failure. Offline mode reads canned responses from a fixture
directory so every code path runs without network access.
"""
from __future__ import annotations

import json
import math
import os
import re
import time
from dataclasses import dataclass, field
from importlib import resources

import requests

from .macprof import ToleranceBand
from .netgraph import IsomorphicGroup, ModelGraph
from .pruner import MULTIPLIER_NAMES, Strategy
from .safety import (
    DangerZone,
    SafetyContext,
    SafetyLimits,
    UnrecoverableStrategyError,
    fallback_preset,
    in_danger_zone,
    limits_for_profile,
    validate_and_correct,
    zones_from_history,
)

TEMPLATE_NAMES = ("profiling", "master", "analysis-cnn", "analysis-vit")
_STEP_CLAMP = 0.15  # max knob movement per revision
_MIN_RATIO = 0.02


class OracleUnavailableError(RuntimeError):
    """Transport failure or missing canned fixture after retries."""


class PromptFieldError(KeyError):
    pass


@dataclass
class ProfileReport:
    """The profiling stage's output consumed by the strategy oracles."""

    baseline_macs: int
    per_layer: dict[str, int]
    per_group: dict[str, int]
    constraints: list[str]
    groups: list[IsomorphicGroup]
    dataset_notes: str
    dataset_profile: str
    model_arch: str
    num_classes: int
    input_size: int
    is_vit: bool


def build_profile(graph: ModelGraph, groups: list[IsomorphicGroup],
                  report, num_classes: int = 10, input_size: int = 32,
                  dataset_notes: str = "") -> ProfileReport:
    """Assemble a ProfileReport from a MacReport and grouping."""
    kinds: dict[str, int] = {}
    for node in graph.nodes:
        kinds[node.kind] = kinds.get(node.kind, 0) + 1
    arch = ", ".join(f"{count}x {kind}" for kind, count in sorted(kinds.items()))
    constraints = ["first conv and classifier are never pruned",
                   "coupled dimensions prune with identical index sets"]
    if graph.is_transformer:
        constraints += ["qkv width stays divisible by 3*num_heads",
                        "head_dim >= 8 and qkv out >= 96"]
    return ProfileReport(
        baseline_macs=report.total,
        per_layer=dict(report.per_layer),
        per_group=dict(report.per_group),
        constraints=constraints,
        groups=groups,
        dataset_notes=dataset_notes,
        dataset_profile=graph.dataset_profile,
        model_arch=arch,
        num_classes=num_classes,
        input_size=input_size,
        is_vit=graph.is_transformer,
    )


@dataclass
class GuidanceNote:
    """Master Agent strategic output consumed by the proposal oracles."""

    should_stop: bool = False
    stop_reason: str | None = None
    direction: str = "hold"  # more-aggressive | less-aggressive | hold
    tuning_order: tuple[str, ...] = ()
    danger_zones: tuple[DangerZone, ...] = ()
    stagnation: bool = False
    delta_r: float | None = None
    error_buckets: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.should_stop and not self.stop_reason:
            raise ValueError("should_stop requires a stop_reason")


@dataclass
class OracleUsage:
    """LLM call and token accounting at configurable per-million rates."""

    calls: int = 0
    input_tokens: int = 0
    output_tokens: int = 0
    rate_in_per_mtok: float = 3.0
    rate_out_per_mtok: float = 15.0

    @property
    def estimated_cost(self) -> float:
        return (self.input_tokens * self.rate_in_per_mtok
                + self.output_tokens * self.rate_out_per_mtok) / 1e6

    def add(self, input_tokens: int, output_tokens: int) -> None:
        self.calls += 1
        self.input_tokens += input_tokens
        self.output_tokens += output_tokens

    def merge(self, other: "OracleUsage") -> None:
        self.calls += other.calls
        self.input_tokens += other.input_tokens
        self.output_tokens += other.output_tokens

    def to_dict(self) -> dict:
        return {
            "calls": self.calls,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "rate_in_per_mtok": self.rate_in_per_mtok,
            "rate_out_per_mtok": self.rate_out_per_mtok,
            "estimated_cost": round(self.estimated_cost, 6),
        }


# ---------------------------------------------------------------------------
# prompt rendering
# ---------------------------------------------------------------------------

_PLACEHOLDER_RE = re.compile(r"\{([a-z_][a-z0-9_]*)\}")


def _load_template(name: str) -> str:
    fname = name.replace("-", "_") + ".txt"
    return resources.files("macpruner.prompts").joinpath(fname).read_text()


def render_prompt(template: str, context: dict) -> str:
    """Instantiate a prompt template byte-exactly at placeholder sites.

    Only ``{lowercase_identifier}`` tokens are substituted; literal JSON
    braces in the templates pass through untouched. A placeholder without a
    context value raises :class:`PromptFieldError` naming the field.
    """
    if template not in TEMPLATE_NAMES:
        raise ValueError(f"unknown template {template!r}, expected one of {TEMPLATE_NAMES}")
    text = _load_template(template)
    missing: list[str] = []

    def sub(match: re.Match) -> str:
        key = match.group(1)
        if key not in context:
            missing.append(key)
            return match.group(0)
        return str(context[key])

    rendered = _PLACEHOLDER_RE.sub(sub, text)
    if missing:
        raise PromptFieldError(f"prompt field(s) without values: {sorted(set(missing))}")
    return rendered


def _fmt_g(macs: float) -> str:
    return f"{macs / 1e9:.2f}"


def prompt_context(template: str, profile: ProfileReport, target: float,
                   band: ToleranceBand, round_to: int = 2) -> dict:
    """Placeholder values shared by the template family."""
    lower, upper = band.bounds(target)
    reduction = (1.0 - target / profile.baseline_macs) * 100.0
    ctx = {
        "model_arch": profile.model_arch,
        "dataset": profile.dataset_profile,
        "num_classes": profile.num_classes,
        "input_size": profile.input_size,
        "baseline_macs": _fmt_g(profile.baseline_macs),
        "target_macs": _fmt_g(target),
        "mac_reduction_needed": f"{reduction:.1f}",
        "macs_overshoot_tolerance_pct": f"{band.overshoot_pct:g}%",
        "macs_undershoot_tolerance_pct": f"{band.undershoot_pct:g}%",
        "undershoot_lower_bound": _fmt_g(lower),
        "overshoot_upper_bound": _fmt_g(upper),
        "min_target_macs_g": _fmt_g(lower),
        "max_target_macs_g": _fmt_g(upper),
        "round_to": round_to,
        "previous_strategies": "",
    }
    return ctx


def render_history_table(history) -> str:
    """Compact (revision, strategy, achieved MACs, error, accuracy) table."""
    if not history:
        return "(no attempts yet)"
    lines = [f"{'rev':>4}  {'strategy':<44} {'MACs(G)':>8} {'err%':>7} {'acc%':>6}"]
    for rec in history:
        acc = f"{rec.inline_ft_acc:.2f}" if rec.inline_ft_acc is not None else "-"
        lines.append(
            f"{rec.index:>4}  {rec.strategy.summary():<44} "
            f"{rec.achieved_macs / 1e9:>8.3f} {rec.mac_error:>+7.1f} {acc:>6} "
            f"[{rec.status}]")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# deterministic heuristic oracle
# ---------------------------------------------------------------------------

def _strategy_for_knob(knob: float, mode: str, profile: ProfileReport,
                       multipliers: dict[str, float], round_to: int,
                       rationale: str) -> Strategy:
    knob = round(min(0.85, max(_MIN_RATIO, knob)), 4)
    if mode == "cnn":
        return Strategy.cnn(knob, criterion="taylor", round_to=round_to,
                            rationale=rationale)
    return Strategy.vit(knob, multipliers, criterion="taylor", round_to=round_to,
                        rationale=rationale)


def _knob_of(strategy: Strategy) -> float:
    return strategy.knobs()[0]


def heuristic_propose(history, profile: ProfileReport, guidance: GuidanceNote,
                      target: float, *, limits: SafetyLimits | None = None,
                      round_to: int = 2,
                      safety_context: SafetyContext | None = None) -> Strategy:
    """History-aware deterministic proposal.

    Empty history inverts the quadratic MAC model (1-r)^2 = target/base;
    afterwards, bracketing attempts drive a secant step on (knob, achieved
    MACs) while one-sided histories recalibrate the quadratic model. Steps
    are clamped to +/-0.15 per revision and proposals never repeat a prior
    attempt or land inside a danger zone.
    """
    limits = limits or limits_for_profile(profile.dataset_profile)
    base_macs = profile.baseline_macs
    reduction = max(1e-6, 1.0 - target / base_macs)
    mode = "vit" if profile.is_vit else "cnn"
    multipliers = {}
    if mode == "vit":
        multipliers = fallback_preset(profile.dataset_profile,
                                      min(1.0, reduction)).multipliers()
    records = list(history or [])

    if not records:
        knob = 1.0 - math.sqrt(max(0.0, target / base_macs))
        rationale = "initial proposal from the quadratic MAC model"
    else:
        last = records[-1]
        valid = [r for r in records if r.status == "valid"]
        if last.status == "valid" and valid:
            best = max(valid, key=lambda r: (r.inline_ft_acc or 0.0, -abs(r.mac_error)))
            step = 0.002 * ((len(valid) + 1) // 2) * (1 if len(valid) % 2 else -1)
            knob = _knob_of(best.strategy) + step
            rationale = "exploring near the best valid configuration"
        else:
            pts = [(_knob_of(r.strategy), r.achieved_macs) for r in records]
            above = [p for p in pts if p[1] > target]
            below = [p for p in pts if p[1] <= target]
            if above and below:
                ka, ma = min(above, key=lambda p: p[1] - target)
                kb, mb = min(below, key=lambda p: target - p[1])
                if ma == mb:
                    knob = (ka + kb) / 2.0
                else:
                    knob = ka + (target - ma) * (kb - ka) / (mb - ma)
                rationale = "secant step between bracketing attempts"
            else:
                k_last, m_last = pts[-1]
                calib = m_last / (base_macs * max(1e-6, (1.0 - k_last) ** 2))
                inside = max(0.0, min(1.0, target / (calib * base_macs)))
                knob = 1.0 - math.sqrt(inside)
                rationale = "recalibrated quadratic model"
            k_last = _knob_of(last.strategy)
            knob = max(k_last - _STEP_CLAMP, min(k_last + _STEP_CLAMP, knob))

    zones = zones_from_history(records) + list(guidance.danger_zones)
    seen = {r.strategy.signature() for r in records}

    direction = -1.0 if records and records[-1].status == "undershoot" else 1.0
    candidate = _strategy_for_knob(knob, mode, profile, multipliers, round_to, rationale)
    for attempt in range(60):
        try:
            corrected, _ = validate_and_correct(
                candidate, records, limits,
                target_ratio=min(1.0, reduction), context=safety_context,
                extra_zones=list(guidance.danger_zones))
        except UnrecoverableStrategyError:
            corrected = None
        if corrected is not None:
            flagged, _ = in_danger_zone(corrected, zones)
            if corrected.signature() not in seen and not flagged:
                return corrected
        nudge = direction * 0.003 * (attempt + 1)
        candidate = _strategy_for_knob(knob + nudge, mode, profile, multipliers,
                                       round_to, rationale + " (repetition avoidance)")

    if mode == "vit":
        return fallback_preset(profile.dataset_profile, min(1.0, reduction))
    knob = 1.0 - math.sqrt(max(0.0, target / base_macs))
    return _strategy_for_knob(knob + 0.0007 * len(records), "cnn", profile,
                              {}, round_to, "conservative fallback")


# ---------------------------------------------------------------------------
# LLM-backed oracle
# ---------------------------------------------------------------------------

@dataclass
class LLMEndpointConfig:
    """Chat-completion endpoint settings; offline fixtures replace HTTP."""

    url: str = ""
    model: str = "claude-3-5-sonnet"
    provider: str = "generic"
    api_key_env: str = "MACPRUNER_API_KEY"
    timeout_s: float = 60.0
    retries: int = 2
    backoff_s: float = 1.0
    max_tokens: int = 1024
    rate_in_per_mtok: float = 3.0
    rate_out_per_mtok: float = 15.0
    fixtures_dir: str | None = None


def extract_json(text: str) -> dict | None:
    """First syntactically valid balanced-brace JSON object in ``text``."""
    for start, ch in enumerate(text):
        if ch != "{":
            continue
        depth = 0
        in_string = False
        escape = False
        for end in range(start, len(text)):
            c = text[end]
            if in_string:
                if escape:
                    escape = False
                elif c == "\\":
                    escape = True
                elif c == '"':
                    in_string = False
                continue
            if c == '"':
                in_string = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    try:
                        doc = json.loads(text[start:end + 1])
                    except json.JSONDecodeError:
                        break
                    if isinstance(doc, dict):
                        return doc
                    break
        # fall through to the next opening brace
    return None


def _fetch_response(prompt: str, revision: int,
                    config: LLMEndpointConfig) -> tuple[str, int, int]:
    """(text, input tokens, output tokens); offline mode reads one canned
    file per revision."""
    if config.fixtures_dir:
        path = os.path.join(config.fixtures_dir, f"response_{revision:03d}.txt")
        if not os.path.exists(path):
            raise OracleUnavailableError(f"no canned response at {path}")
        with open(path, "r") as fh:
            text = fh.read()
        return text, max(1, len(prompt) // 4), max(1, len(text) // 4)

    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(config.api_key_env, "")
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    payload = {
        "model": config.model,
        "temperature": 0,
        "max_tokens": config.max_tokens,
        "messages": [{"role": "user", "content": prompt}],
    }
    last_error: Exception | None = None
    for attempt in range(config.retries + 1):
        try:
            resp = requests.post(config.url, json=payload, headers=headers,
                                 timeout=config.timeout_s)
            resp.raise_for_status()
            doc = resp.json()
            text = doc["choices"][0]["message"]["content"]
            usage = doc.get("usage", {})
            in_tok = int(usage.get("prompt_tokens", max(1, len(prompt) // 4)))
            out_tok = int(usage.get("completion_tokens", max(1, len(text) // 4)))
            return text, in_tok, out_tok
        except (requests.RequestException, KeyError, ValueError) as exc:
            last_error = exc
            if attempt < config.retries:
                time.sleep(config.backoff_s * (attempt + 1))
    raise OracleUnavailableError(f"LLM endpoint unavailable: {last_error}")


_REQUIRED_CNN = ("importance_criterion", "channel_pruning_ratio")
_REQUIRED_VIT = ("importance_criterion", "isomorphic_group_ratios")


def _strategy_from_response(doc: dict, is_vit: bool,
                            target_ratio: float) -> Strategy | None:
    required = _REQUIRED_VIT if is_vit else _REQUIRED_CNN
    if any(key not in doc for key in required):
        return None
    payload = dict(doc)
    if is_vit:
        payload["base_ratio"] = target_ratio
    try:
        return Strategy.from_dict(payload)
    except (ValueError, TypeError, KeyError):
        return None


def llm_propose(history, profile: ProfileReport, guidance: GuidanceNote,
                target: float, band: ToleranceBand, config: LLMEndpointConfig,
                *, limits: SafetyLimits | None = None,
                safety_context: SafetyContext | None = None,
                ) -> tuple[Strategy, OracleUsage, list[str]]:
    """One LLM proposal round: render, call, extract, correct.

    Returns the validated strategy, the usage delta for this call, and an
    event log (fallback substitutions, safety corrections). JSON failures
    and unrecoverable strategies substitute the guaranteed-safe preset.
    """
    limits = limits or limits_for_profile(profile.dataset_profile)
    reduction = min(1.0, max(1e-6, 1.0 - target / profile.baseline_macs))
    template = "analysis-vit" if profile.is_vit else "analysis-cnn"
    ctx = prompt_context(template, profile, target, band)
    prompt = render_prompt(template, ctx)
    prompt += ("\n\nMAC Pruning History and Observed Trends:\n"
               + render_history_table(history))
    if guidance.danger_zones:
        prompt += "\n\nAvoid these failed configurations (+/-0.05 per component):\n"
        for zone in guidance.danger_zones:
            prompt += f"- {zone.criterion} rt={zone.round_to} knobs={zone.knobs}\n"
    if guidance.direction != "hold":
        prompt += f"\nMaster guidance: be {guidance.direction}.\n"

    events: list[str] = []
    usage = OracleUsage(rate_in_per_mtok=config.rate_in_per_mtok,
                        rate_out_per_mtok=config.rate_out_per_mtok)
    revision = len(list(history or []))
    text, in_tok, out_tok = _fetch_response(prompt, revision, config)
    usage.add(in_tok, out_tok)

    doc = extract_json(text)
    if doc is None:
        events.append("json-parse-failure: fallback preset substituted")
        return fallback_preset(profile.dataset_profile, reduction), usage, events
    proposal = _strategy_from_response(doc, profile.is_vit, reduction)
    if proposal is None:
        events.append("missing-required-fields: fallback preset substituted")
        return fallback_preset(profile.dataset_profile, reduction), usage, events
    try:
        corrected, log = validate_and_correct(
            proposal, history, limits, target_ratio=reduction,
            context=safety_context, extra_zones=list(guidance.danger_zones))
    except UnrecoverableStrategyError as exc:
        events.append(f"unrecoverable-strategy ({exc}): fallback preset substituted")
        return fallback_preset(profile.dataset_profile, reduction), usage, events
    events.extend(f"safety-correction: {entry}" for entry in log)
    return corrected, usage, events


# ---------------------------------------------------------------------------
# oracle adapters used by the search loop
# ---------------------------------------------------------------------------

class HeuristicOracle:
    name = "heuristic"

    def __init__(self, limits: SafetyLimits, *, round_to: int = 2,
                 safety_context: SafetyContext | None = None):
        self.limits = limits
        self.round_to = round_to
        self.safety_context = safety_context
        self.usage = OracleUsage()

    def propose(self, history, profile, guidance, target, band):
        strategy = heuristic_propose(
            history, profile, guidance, target, limits=self.limits,
            round_to=self.round_to, safety_context=self.safety_context)
        return strategy, []


class LLMOracle:
    name = "llm"

    def __init__(self, config: LLMEndpointConfig, limits: SafetyLimits,
                 safety_context: SafetyContext | None = None):
        self.config = config
        self.limits = limits
        self.safety_context = safety_context
        self.usage = OracleUsage(rate_in_per_mtok=config.rate_in_per_mtok,
                                 rate_out_per_mtok=config.rate_out_per_mtok)

    def propose(self, history, profile, guidance, target, band):
        strategy, delta, events = llm_propose(
            history, profile, guidance, target, band, self.config,
            limits=self.limits, safety_context=self.safety_context)
        self.usage.merge(delta)
        return strategy, events
