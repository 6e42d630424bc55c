"""Master-Agent state machine and the complete revision loop.

Per revision: guidance, oracle proposal, safety correction, pruning from
the pristine baseline, exact recount, band status, and (for valid
candidates only) inline fine-tuning. The first valid candidate opens an
extended phase of up to 30 further explored candidates; termination picks
the highest-accuracy candidate, falling back to the history record nearest
the MAC target when none qualified. Every revision is appended to the
persistent JSONL log before the next begins, so an aborted search can be
replayed or resumed from disk.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import harness
from .importance import ImportanceTable, compute_scores
from .macprof import ToleranceBand, count_model_macs, mac_error_pct, predict_pruned_macs, within_tolerance
from .netexec import WeightedNet
from .netgraph import derive_dependencies, group_isomorphic
from .oracle import (
    GuidanceNote,
    HeuristicOracle,
    LLMEndpointConfig,
    LLMOracle,
    OracleUsage,
    ProfileReport,
    build_profile,
)
from .pruner import Strategy, apply_pruning
from .safety import (
    DangerZone,
    SafetyContext,
    SafetyLimits,
    detect_collapse,
    limits_for_profile,
    zones_from_history,
)

EXTENDED_BUDGET = 30
CONVERGENCE_ACC_RANGE = 0.5  # accuracy-point spread for early stopping
CYCLING_OCCURRENCES = 3      # a signature seen this often counts as cycling

ERROR_BUCKETS = ("<5%", "5-15%", "15-30%", ">30%")


@dataclass
class RevisionRecord:
    index: int
    strategy: Strategy
    achieved_macs: int
    mac_error: float
    zero_shot_acc: float | None
    inline_ft_acc: float | None
    status: str  # valid | undershoot | overshoot | collapsed
    wall_time: dict[str, float] = field(default_factory=dict)
    events: list[str] = field(default_factory=list)

    def to_json_line(self) -> str:
        return json.dumps({
            "index": self.index,
            "strategy": self.strategy.to_dict(),
            "achieved_macs": self.achieved_macs,
            "mac_error": round(self.mac_error, 6),
            "zero_shot_acc": self.zero_shot_acc,
            "inline_ft_acc": self.inline_ft_acc,
            "status": self.status,
            "wall_time": {k: round(v, 6) for k, v in sorted(self.wall_time.items())},
            "events": self.events,
        }, sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "RevisionRecord":
        doc = json.loads(line)
        return cls(
            index=doc["index"],
            strategy=Strategy.from_dict(doc["strategy"]),
            achieved_macs=doc["achieved_macs"],
            mac_error=doc["mac_error"],
            zero_shot_acc=doc.get("zero_shot_acc"),
            inline_ft_acc=doc.get("inline_ft_acc"),
            status=doc["status"],
            wall_time=doc.get("wall_time", {}),
            events=doc.get("events", []),
        )


@dataclass
class Candidate:
    revision: int
    strategy: Strategy
    achieved_macs: int
    mac_error: float
    inline_acc: float
    net: WeightedNet | None = None


@dataclass
class SearchState:
    r_max: int
    target: float = 0.0
    band: ToleranceBand | None = None
    history: list[RevisionRecord] = field(default_factory=list)
    candidates: list[Candidate] = field(default_factory=list)
    phase: str = "searching"  # searching | extended | done
    extended_remaining: int = 0
    stop_reason: str | None = None


def master_guidance(state: SearchState, target: float,
                    band: ToleranceBand) -> GuidanceNote:
    """Strategic guidance from the pruning history.

    Tracks the MAC error reduction rate Delta_r = |M_r - target| -
    |M_{r-1} - target|, flags stagnation after three consecutive
    non-improving revisions, sets the adjustment direction from the last
    band status, attaches danger zones for collapsed attempts, and buckets
    history by MAC-error magnitude.
    """
    history = state.history
    delta = None
    if len(history) >= 2:
        delta = (abs(history[-1].achieved_macs - target)
                 - abs(history[-2].achieved_macs - target))
    stagnation = False
    if len(history) >= 4:
        recent = [abs(history[i].achieved_macs - target)
                  - abs(history[i - 1].achieved_macs - target)
                  for i in range(len(history) - 3, len(history))]
        stagnation = all(d >= 0 for d in recent)

    direction = "hold"
    if history:
        band_status = within_tolerance(history[-1].achieved_macs, target, band)
        if band_status == "overshoot":
            direction = "more-aggressive"
        elif band_status == "undershoot":
            direction = "less-aggressive"

    buckets = {name: 0 for name in ERROR_BUCKETS}
    for rec in history:
        err = abs(rec.mac_error)
        if err < 5:
            buckets["<5%"] += 1
        elif err < 15:
            buckets["5-15%"] += 1
        elif err < 30:
            buckets["15-30%"] += 1
        else:
            buckets[">30%"] += 1

    if history and history[-1].strategy.mode == "vit":
        tuning = ("mlp_multiplier", "qkv_multiplier", "base_ratio")
    else:
        tuning = ("channel_pruning_ratio", "round_to")

    stop, reason = should_stop(state, band)
    return GuidanceNote(
        should_stop=stop,
        stop_reason=reason,
        direction=direction,
        tuning_order=tuning,
        danger_zones=tuple(zones_from_history(history)),
        stagnation=stagnation,
        delta_r=delta,
        error_buckets=buckets,
    )


def should_stop(state: SearchState, band: ToleranceBand) -> tuple[bool, str | None]:
    """Early-stopping decision.

    Stops on three consecutive valid revisions with accuracy range below
    0.5 points, on a strategy signature cycling back despite repetition
    avoidance, on reaching the revision budget, and on exhausting the
    extended-phase budget.
    """
    history = state.history
    if len(history) >= 3:
        tail = history[-3:]
        if all(r.status == "valid" for r in tail):
            accs = [r.inline_ft_acc for r in tail if r.inline_ft_acc is not None]
            if len(accs) == 3 and max(accs) - min(accs) < CONVERGENCE_ACC_RANGE:
                return True, "converged"
    counts: dict[tuple, int] = {}
    for rec in history:
        sig = rec.strategy.signature()
        counts[sig] = counts.get(sig, 0) + 1
        if counts[sig] >= CYCLING_OCCURRENCES:
            return True, "cycling"
    if len(history) >= state.r_max:
        return True, "max-iterations"
    if state.phase == "extended" and state.extended_remaining <= 0:
        return True, "target-achieved"
    return False, None


def select_best(candidates: list[Candidate]) -> Candidate:
    """Argmax inline accuracy; ties prefer lower |mac error|, then the
    earlier revision."""
    if not candidates:
        raise ValueError("no candidates to select from")
    return min(candidates,
               key=lambda c: (-c.inline_acc, abs(c.mac_error), c.revision))


@dataclass
class SearchResult:
    best: Candidate | None
    nearest_record: RevisionRecord | None
    state: SearchState
    usage: OracleUsage
    timings: dict[str, float]
    profile: ProfileReport

    @property
    def succeeded(self) -> bool:
        return self.best is not None


def _now(deterministic: bool) -> float:
    return 0.0 if deterministic else time.perf_counter()


def run_search(net: WeightedNet, target: float, band: ToleranceBand,
               oracle_kind: str, r_max: int, *,
               dataset: harness.SyntheticDataset,
               inline_config: harness.InlineConfig | None = None,
               calibration_batches: int = 8,
               calibration_batch_size: int = 32,
               limits: SafetyLimits | None = None,
               llm_config: LLMEndpointConfig | None = None,
               log_path: str | None = None,
               deterministic_timing: bool = False,
               seed: int = 0,
               num_classes: int | None = None,
               resume_history: list[RevisionRecord] | None = None,
               ) -> SearchResult:
    """Run the complete two-phase MAC-budget search loop."""
    graph = net.graph
    inline_config = inline_config or harness.InlineConfig()
    limits = limits or limits_for_profile(graph.dataset_profile)
    deterministic = deterministic_timing
    num_classes = num_classes or dataset.params.classes

    t0 = _now(deterministic)
    deps = derive_dependencies(graph)
    groups = group_isomorphic(graph)
    report = count_model_macs(graph, groups)
    profile = build_profile(graph, groups, report, num_classes=num_classes,
                            input_size=dataset.params.height)
    baseline_macs = report.total
    if target >= baseline_macs:
        raise ValueError(f"target {target:.3g} must lie below baseline "
                         f"{baseline_macs:.3g} MACs")
    min_macs = predict_pruned_macs(
        graph, deps, _max_aggression_strategy(profile))
    if band.bounds(target)[1] < min_macs:
        raise ValueError(
            f"band upper bound {band.bounds(target)[1]:.3g} lies below the "
            f"minimum achievable {min_macs:.3g} MACs; the band is empty")
    safety_context = SafetyContext(graph=graph, deps=deps, baseline_macs=baseline_macs)
    timings = {"profiling": _now(deterministic) - t0, "analysis": 0.0,
               "pruning": 0.0, "finetune": 0.0, "evaluation": 0.0}

    if oracle_kind == "heuristic":
        oracle = HeuristicOracle(limits, safety_context=safety_context)
    elif oracle_kind == "llm":
        if llm_config is None:
            raise ValueError("llm oracle requires an endpoint configuration")
        oracle = LLMOracle(llm_config, limits, safety_context=safety_context)
    else:
        raise ValueError(f"unknown oracle kind {oracle_kind!r}")

    calibration = harness.make_calibration_batches(
        dataset, calibration_batches, calibration_batch_size, seed=seed)
    baseline_params = net.num_params()
    state = SearchState(r_max=r_max, target=target, band=band)
    if resume_history:
        state.history = list(resume_history)
        state.candidates = [
            Candidate(revision=r.index, strategy=r.strategy,
                      achieved_macs=r.achieved_macs, mac_error=r.mac_error,
                      inline_acc=r.inline_ft_acc)
            for r in resume_history
            if r.status == "valid" and r.inline_ft_acc is not None]
        if state.candidates:
            state.phase = "extended"
            state.extended_remaining = max(
                0, EXTENDED_BUDGET - (len(state.candidates) - 1))

    log_handle = open(log_path, "a") if log_path else None
    try:
        while True:
            guidance = master_guidance(state, target, band)
            if guidance.should_stop:
                state.stop_reason = guidance.stop_reason
                break

            t_analysis = _now(deterministic)
            strategy, events = oracle.propose(state.history, profile, guidance,
                                              target, band)
            strategy = _avoid_repetition(strategy, state.history, events)
            analysis_time = _now(deterministic) - t_analysis

            t_prune = _now(deterministic)
            scores = _scores_for(net, strategy, calibration,
                                 seed=seed * 1000 + len(state.history))
            outcome = apply_pruning(net, deps, groups, scores, strategy)
            prune_time = _now(deterministic) - t_prune

            t_eval = _now(deterministic)
            zero_shot = harness.evaluate_val(outcome.pruned_net, dataset)
            eval_time = _now(deterministic) - t_eval

            error = mac_error_pct(outcome.achieved_macs, target)
            collapsed = detect_collapse(zero_shot, limits)
            status = "collapsed" if collapsed else within_tolerance(
                outcome.achieved_macs, target, band)

            inline_acc = None
            finetune_time = 0.0
            if status == "valid":
                t_ft = _now(deterministic)
                try:
                    tuned, inline_acc = harness.inline_finetune(
                        outcome.pruned_net.copy(), dataset, inline_config,
                        baseline_params=baseline_params)
                except harness.DivergenceError:
                    status = "collapsed"
                    tuned = None
                    events = events + ["inline-finetune-divergence"]
                finetune_time = _now(deterministic) - t_ft
                if status == "valid":
                    state.candidates.append(Candidate(
                        revision=len(state.history), strategy=strategy,
                        achieved_macs=outcome.achieved_macs, mac_error=error,
                        inline_acc=inline_acc, net=tuned))
                    if len(state.candidates) == 1:
                        state.phase = "extended"
                        state.extended_remaining = EXTENDED_BUDGET
                    elif state.extended_remaining > 0:
                        state.extended_remaining -= 1

            record = RevisionRecord(
                index=len(state.history),
                strategy=strategy,
                achieved_macs=outcome.achieved_macs,
                mac_error=error,
                zero_shot_acc=zero_shot,
                inline_ft_acc=inline_acc,
                status=status,
                wall_time={"analysis": analysis_time, "pruning": prune_time,
                           "evaluation": eval_time, "finetune": finetune_time},
                events=list(events),
            )
            state.history.append(record)
            timings["analysis"] += analysis_time
            timings["pruning"] += prune_time
            timings["evaluation"] += eval_time
            timings["finetune"] += finetune_time
            if log_handle:
                log_handle.write(record.to_json_line() + "\n")
                log_handle.flush()
    finally:
        if log_handle:
            log_handle.close()

    state.phase = "done"
    best = select_best(state.candidates) if state.candidates else None
    nearest = None
    if best is None and state.history:
        nearest = min(state.history,
                      key=lambda r: (abs(r.achieved_macs - target), r.index))
    return SearchResult(best=best, nearest_record=nearest, state=state,
                        usage=oracle.usage, timings=timings, profile=profile)


def _max_aggression_strategy(profile: ProfileReport) -> Strategy:
    if profile.is_vit:
        return Strategy.vit(0.85, {k: 1.0 for k in ("mlp", "qkv", "proj", "head")},
                            round_to=1)
    return Strategy.cnn(0.85, round_to=1)


def _scores_for(net: WeightedNet, strategy: Strategy, calibration,
                seed: int) -> ImportanceTable:
    return compute_scores(net, strategy.criterion, calibration, seed=seed)


def _avoid_repetition(strategy: Strategy, history: list[RevisionRecord],
                      events: list[str]) -> Strategy:
    """Last-line repetition guard behind the oracle's own avoidance."""
    from dataclasses import replace

    seen = {r.strategy.signature() for r in history}
    current = strategy
    bump = 0.003
    while current.signature() in seen and bump < 0.2:
        if current.mode == "cnn":
            current = replace(current, channel_pruning_ratio=round(
                min(0.85, current.channel_pruning_ratio + bump), 4))
        else:
            current = replace(current, base_ratio=round(
                min(1.0, current.base_ratio + bump), 4))
        bump += 0.003
    if current is not strategy:
        events.append("strategy-repetition-avoidance")
    return current


# ---------------------------------------------------------------------------
# replay mode
# ---------------------------------------------------------------------------

@dataclass
class ReplayRecord:
    revision: int
    achieved_macs: float
    channel_ratio: float | None = None
    inline_acc: float | None = None
    criterion: str = "taylor"
    round_to: int = 2


def load_replay_history(path: str) -> list[ReplayRecord]:
    """Read a recorded trajectory: one JSON object per line."""
    records = []
    with open(path, "r") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            if "achieved_macs_g" in doc:
                macs = float(doc["achieved_macs_g"]) * 1e9
            else:
                macs = float(doc["achieved_macs"])
            records.append(ReplayRecord(
                revision=int(doc["revision"]),
                achieved_macs=macs,
                channel_ratio=doc.get("channel_ratio"),
                inline_acc=doc.get("inline_acc"),
                criterion=doc.get("criterion", "taylor"),
                round_to=int(doc.get("round_to", 2)),
            ))
    return records


def replay_history(records: list[ReplayRecord], target: float,
                   band: ToleranceBand) -> SearchState:
    """Re-derive band statuses and search state from a recorded history.

    Statuses come from the tolerance check alone, so replays are exactly
    reproducible; accuracy-based collapse detection needs live evaluation
    and does not apply here.
    """
    state = SearchState(r_max=len(records), target=target, band=band)
    for rec in records:
        strategy = Strategy.cnn(rec.channel_ratio if rec.channel_ratio is not None
                                else 0.0,
                                criterion=rec.criterion, round_to=rec.round_to)
        status = within_tolerance(rec.achieved_macs, target, band)
        record = RevisionRecord(
            index=rec.revision,
            strategy=strategy,
            achieved_macs=int(round(rec.achieved_macs)),
            mac_error=mac_error_pct(rec.achieved_macs, target),
            zero_shot_acc=None,
            inline_ft_acc=rec.inline_acc,
            status=status,
        )
        state.history.append(record)
        if status == "valid" and rec.inline_acc is not None:
            state.candidates.append(Candidate(
                revision=rec.revision, strategy=strategy,
                achieved_macs=record.achieved_macs, mac_error=record.mac_error,
                inline_acc=rec.inline_acc))
    state.phase = "done"
    state.stop_reason = "max-iterations"
    return state


def load_history(path: str) -> list[RevisionRecord]:
    """Read a persisted search log (one RevisionRecord JSON per line)."""
    records = []
    with open(path, "r") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(RevisionRecord.from_json_line(line))
    return records
