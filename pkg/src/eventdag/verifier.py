"""Executable meta-theory: linear oracle, deadlock detection, bounded
exhaustive exploration, strict-serializability and commutativity checks.

The linear oracle runs events strictly one at a time to full commit and is
the reference for what any interleaved schedule must be equivalent to.
Exploration enumerates every admissible schedule up to a bound, deduplicating
configurations by canonical state, and checks every reachable configuration
for deadlock and every terminal configuration against the oracle.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

from .engine import EngineOptions, GlobalConfig
from .lang import EventSpec, Program, Value


@dataclass(frozen=True)
class Bounds:
    max_configs: int = 200_000
    max_depth: int = 64


@dataclass(frozen=True)
class DeadlockWitness:
    """Cycle of (context, event) pairs: each event holds its context and has
    a request queued at the next context in the cycle."""
    cycle: tuple[tuple[str, str], ...]

    def canonical(self) -> "DeadlockWitness":
        rotations = [self.cycle[i:] + self.cycle[:i] for i in range(len(self.cycle))]
        return DeadlockWitness(min(rotations))


@dataclass
class Violation:
    kind: str      # 'serializability' | 'realtime' | 'stall'
    detail: str
    commit_order: tuple = ()
    expected_digest: str = ""
    actual_digest: str = ""
    trace: tuple = ()


@dataclass
class ExplorationReport:
    configs_visited: int = 0
    edges_explored: int = 0
    terminal_states: set = field(default_factory=set)
    deadlocks: list = field(default_factory=list)
    serializability_violations: list = field(default_factory=list)
    realtime_violations: list = field(default_factory=list)
    stalls: list = field(default_factory=list)
    bound_exhausted: bool = False
    touched: dict = field(default_factory=dict)  # eid -> set of contexts

    @property
    def verdict(self) -> str:
        if (self.deadlocks or self.serializability_violations
                or self.realtime_violations or self.stalls):
            return "VIOLATION"
        if self.bound_exhausted:
            return "BOUND-EXHAUSTED"
        return "PASS"

    def to_record(self) -> dict:
        return {
            "verdict": self.verdict,
            "configs_visited": self.configs_visited,
            "edges_explored": self.edges_explored,
            "terminal_states": sorted(self.terminal_states),
            "deadlocks": [list(map(list, w.cycle)) for w in self.deadlocks],
            "serializability_violations": [v.detail for v in
                                           self.serializability_violations],
            "realtime_violations": [v.detail for v in self.realtime_violations],
            "stalls": [v.detail for v in self.stalls],
            "bound_exhausted": self.bound_exhausted,
        }


# --------------------------------------------------------------------------
# Digests
# --------------------------------------------------------------------------

def store_digest(stores: dict[str, tuple]) -> str:
    """Hash of all context stores, sorted keys, virtual nodes excluded."""
    payload = repr(sorted(stores.items())).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


# --------------------------------------------------------------------------
# Linear oracle
# --------------------------------------------------------------------------

def linear_execute(program: Program,
                   ordered_events: Iterable[tuple[str, str, tuple]],
                   options: EngineOptions = EngineOptions(),
                   ) -> tuple[dict[str, tuple], list[str]]:
    """Run events one at a time, each to full commit, in the given order.

    Nested event dispatches are suppressed: callers provide the complete
    order (a recorded commit order already lists nested events explicitly).
    Returns the final per-context stores and each event's final status.
    """
    bare = replace(program, script=())
    opts = replace(options, check_invariants=False, suppress_nested=True)
    cfg = GlobalConfig.initial(bare, opts)
    statuses: list[str] = []
    for target, method, args in ordered_events:
        cfg = cfg.dispatch_event(target, method, tuple(args))
        eid = f"e{cfg.next_eid - 1}"
        while True:
            choices = cfg.enabled_transitions()
            if not choices:
                break
            cfg = cfg.apply(choices[0])
        info = cfg.events[eid]
        statuses.append(info.status)
        if info.status == "live":
            raise RuntimeError(f"linear execution of {eid} did not terminate")
    return cfg.store_digests(), statuses


# --------------------------------------------------------------------------
# Deadlock detection
# --------------------------------------------------------------------------

def detect_deadlock(cfg: GlobalConfig) -> Optional[DeadlockWitness]:
    """Find a holds/waits cycle: eid_i activated at ctx_i and queued at
    ctx_{i+1}, where a different event holds ctx_{i+1}.  Sound and complete
    for that cycle shape on the given configuration."""
    live = set(cfg.live_events())
    holders: dict[str, set[str]] = {}
    queued_at: dict[str, set[str]] = {}
    for cid, c in cfg.contexts.items():
        holders[cid] = {a.eid for a in c.activations if a.eid in live}
        queued_at[cid] = {r.eid for r in c.queue if r.eid in live}

    # nodes are (ctx, eid) holds; edge to the blocking holder at the next ctx
    nodes = [(cid, eid) for cid in sorted(holders) for eid in sorted(holders[cid])]
    succ: dict[tuple, list[tuple]] = {n: [] for n in nodes}
    for cid, eid in nodes:
        for cid2 in sorted(queued_at):
            if eid not in queued_at[cid2]:
                continue
            for eid2 in sorted(holders[cid2]):
                if eid2 != eid:
                    succ[(cid, eid)].append((cid2, eid2))

    color: dict[tuple, int] = {}
    stack: list[tuple] = []

    def visit(n) -> Optional[list[tuple]]:
        color[n] = 1
        stack.append(n)
        for m in succ[n]:
            st = color.get(m, 0)
            if st == 1:
                return stack[stack.index(m):]
            if st == 0:
                out = visit(m)
                if out:
                    return out
        stack.pop()
        color[n] = 2
        return None

    for n in nodes:
        if color.get(n, 0) == 0:
            cycle = visit(n)
            if cycle:
                return DeadlockWitness(tuple(cycle)).canonical()
    return None


# --------------------------------------------------------------------------
# Serializability
# --------------------------------------------------------------------------

@dataclass
class TraceFacts:
    """What the serializability check consumes; extractable from any
    terminal configuration or assembled by hand for adversarial traces."""
    commit_order: tuple[str, ...]                 # eids in release order
    events: dict                                   # eid -> EventInfo-like
    terminal_stores: dict[str, tuple]


def facts_from_config(cfg: GlobalConfig) -> TraceFacts:
    return TraceFacts(tuple(e for e, _ in cfg.history), dict(cfg.events),
                      cfg.store_digests())


def check_serializability(program: Program, facts: TraceFacts,
                          options: EngineOptions = EngineOptions(),
                          oracle_cache: Optional[dict] = None,
                          ) -> tuple[str, list[Violation]]:
    """Terminal stores must equal the linear oracle run in commit order, and
    the commit order must respect real time (commit before issue => first)."""
    violations: list[Violation] = []
    ordered = tuple((facts.events[e].target, facts.events[e].method,
                     facts.events[e].args) for e in facts.commit_order)
    if oracle_cache is not None and ordered in oracle_cache:
        oracle_stores, oracle_status = oracle_cache[ordered]
    else:
        oracle_stores, oracle_status = linear_execute(program, ordered, options)
        if oracle_cache is not None:
            oracle_cache[ordered] = (oracle_stores, oracle_status)

    actual = facts.terminal_stores
    if oracle_stores != actual:
        violations.append(Violation(
            "serializability",
            f"terminal stores diverge from linear oracle for commit order "
            f"{list(facts.commit_order)}",
            facts.commit_order,
            expected_digest=store_digest(oracle_stores),
            actual_digest=store_digest(actual)))
    else:
        actual_status = [facts.events[e].status for e in facts.commit_order]
        if actual_status != oracle_status:
            violations.append(Violation(
                "serializability",
                f"event outcomes diverge from linear oracle: "
                f"{actual_status} vs {oracle_status}", facts.commit_order))

    pos = {e: i for i, e in enumerate(facts.commit_order)}
    for e1 in facts.commit_order:
        for e2 in facts.commit_order:
            if e1 == e2:
                continue
            i1, i2 = facts.events[e1], facts.events[e2]
            if i1.commit_tick is not None and i1.commit_tick < i2.issue_tick:
                if pos[e1] > pos[e2]:
                    violations.append(Violation(
                        "realtime",
                        f"{e1} committed (t={i1.commit_tick}) before {e2} was "
                        f"issued (t={i2.issue_tick}) but follows it in the "
                        f"commit order"))
    verdict = "PASS" if not violations else "VIOLATION"
    return verdict, violations


# --------------------------------------------------------------------------
# Exploration
# --------------------------------------------------------------------------

def explore(program: Program,
            events: Optional[Iterable[EventSpec]] = None,
            bounds: Bounds = Bounds(),
            options: EngineOptions = EngineOptions(),
            observers: Iterable[Callable[[GlobalConfig], None]] = (),
            ) -> ExplorationReport:
    """DFS over every admissible schedule with state deduplication.

    Runs the deadlock detector on every configuration and the
    serializability check on every terminal configuration (for the first
    trace reaching each distinct terminal state).
    """
    if events is not None:
        program = replace(program, script=tuple(events))
    cfg0 = GlobalConfig.initial(program, options)
    report = ExplorationReport()
    oracle_cache: dict = {}
    seen_witnesses: set = set()
    visited = {cfg0.canonical_key()}
    stack = [cfg0]
    observers = list(observers)

    while stack:
        cfg = stack.pop()
        report.configs_visited += 1
        if report.configs_visited > bounds.max_configs:
            report.bound_exhausted = True
            break

        witness = detect_deadlock(cfg)
        if witness is not None and witness.cycle not in seen_witnesses:
            seen_witnesses.add(witness.cycle)
            report.deadlocks.append(witness)
        for obs in observers:
            obs(cfg)

        choices = cfg.enabled_transitions()
        if not choices:
            live = cfg.live_events()
            if live or cfg.script_pos < len(cfg.script):
                if witness is None:
                    report.stalls.append(Violation(
                        "stall", f"no transitions with live events {live}",
                        trace=cfg.trace))
                continue
            facts = facts_from_config(cfg)
            digest = store_digest(facts.terminal_stores)
            report.terminal_states.add(digest)
            verdict, violations = check_serializability(
                program, facts, options, oracle_cache)
            for v in violations:
                v.trace = cfg.trace
                if v.kind == "realtime":
                    report.realtime_violations.append(v)
                else:
                    report.serializability_violations.append(v)
            continue

        if cfg.step_count >= bounds.max_depth:
            report.bound_exhausted = True
            continue

        for ch in reversed(choices):
            child = cfg.apply(ch)
            report.edges_explored += 1
            entry = child.trace[-1]
            if entry.eid:
                report.touched.setdefault(entry.eid, set()).add(entry.ctx)
            key = child.canonical_key()
            if key not in visited:
                visited.add(key)
                stack.append(child)
    return report


def check_commutativity(program: Program, e0: EventSpec, e1: EventSpec,
                        bounds: Bounds = Bounds(),
                        options: EngineOptions = EngineOptions(),
                        ) -> tuple[str, dict]:
    """Independent events must reach one terminal state over all interleavings.

    Returns ('PASS', info), ('NOT-INDEPENDENT', info) when the two events
    ever transition on a common context (a precondition failure, not a
    verdict), or ('COUNTEREXAMPLE', info).
    """
    e0 = replace(e0, tick=0)
    e1 = replace(e1, tick=1)
    report = explore(program, [e0, e1], bounds, options)
    touched0 = report.touched.get("e0", set())
    touched1 = report.touched.get("e1", set())
    overlap = touched0 & touched1
    info = {"report": report, "overlap": sorted(overlap)}
    if overlap:
        return "NOT-INDEPENDENT", info
    if report.bound_exhausted:
        return "BOUND-EXHAUSTED", info
    if len(report.terminal_states) == 1 and report.verdict == "PASS":
        return "PASS", info
    return "COUNTEREXAMPLE", info
