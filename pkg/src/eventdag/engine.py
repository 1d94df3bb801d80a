"""Inter-context state machine.

Each context instance holds a request queue, a field store, and an activation
set that doubles as its lock: either any number of readonly activations of
any events, or activations of one single event.  Events enter through their
target's dominator, fan out via synchronous/asynchronous calls, and release
every lock atomically at commit.

Configurations are value-semantic: `apply` returns a fresh config and never
mutates its input, so exploration can branch freely.  All scheduling freedom
is surfaced through `enabled_transitions`; a driver (random policy, DFS
explorer, simulator) picks which admissible rule instance to fire.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from typing import Iterable, Optional

from . import interp
from .graph import CycleError, GraphError, MissingEdgeError, OwnershipGraph
from .interp import AccessViolation, EvalError, IntraConfig, Label
from .lang import (AddOwnership, EventSpec, Program, Stmt, Value,
                   copy_value, stmt_contains_waiting, value_repr)


class EngineError(Exception):
    pass


class UnknownContext(EngineError):
    pass


class UnknownMethod(EngineError):
    pass


class StaleChoice(EngineError):
    """A transition was applied that is not enabled in this configuration."""


class PrematureCommit(EngineError):
    pass


class ProtocolViolation(EngineError):
    """An internal invariant of the locking protocol was broken."""


# --------------------------------------------------------------------------
# Requests and activations
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CallReq:
    eid: str
    method: str
    args: tuple[Value, ...]
    decorator: str  # 'synch' | 'asynch' | 'event'
    am: str         # the issuing event's access mode

    def key(self) -> tuple:
        return ("call", self.eid, self.method, self.args, self.decorator, self.am)


@dataclass(frozen=True)
class LubReq:
    """Queue marker locking a dominator before the event reaches its target."""
    eid: str
    method: str
    args: tuple[Value, ...]
    target: str
    am: str

    def key(self) -> tuple:
        return ("lub", self.eid, self.method, self.args, self.target, self.am)


Request = "CallReq | LubReq"


class Activation:
    """Either running code for an event or a bare lock placeholder."""

    __slots__ = ("kind", "eid", "am", "decorator", "lenv", "stmt", "_peek")

    def __init__(self, kind: str, eid: str, am: str, decorator: str = "",
                 lenv: tuple = (), stmt: Optional[Stmt] = None):
        self.kind = kind  # 'run' | 'lock'
        self.eid = eid
        self.am = am
        self.decorator = decorator
        self.lenv = lenv
        self.stmt = stmt
        self._peek: dict = {}

    @classmethod
    def running(cls, eid: str, am: str, decorator: str, frame: dict,
                stmt: Stmt) -> "Activation":
        lenv = (tuple(sorted(frame.items())),)
        return cls("run", eid, am, decorator, lenv, stmt)

    @classmethod
    def placeholder(cls, eid: str, am: str) -> "Activation":
        return cls("lock", eid, am)

    def is_running(self) -> bool:
        return self.kind == "run"

    def with_config(self, cfg: IntraConfig) -> "Activation":
        return Activation("run", self.eid, self.am, self.decorator,
                          cfg.lenv, cfg.stmt)

    def key(self) -> tuple:
        if self.kind == "lock":
            return ("lock", self.eid, self.am)
        return ("run", self.eid, self.am, self.decorator, self.lenv, self.stmt)

    def __repr__(self) -> str:
        if self.kind == "lock":
            return f"⊥({self.eid},{self.am})"
        return f"run({self.eid},{self.am},{self.decorator})"


class ContextInstance:
    """Queue, store, ref bindings, and activation set of one context."""

    __slots__ = ("id", "class_name", "queue", "store", "genv", "activations", "_ckey")

    def __init__(self, cid: str, class_name: Optional[str],
                 queue: tuple = (), store: tuple = (), genv: tuple = (),
                 activations: tuple = ()):
        self.id = cid
        self.class_name = class_name
        self.queue = queue
        self.store = store
        self.genv = genv
        self.activations = activations
        self._ckey = None

    def evolve(self, **kw) -> "ContextInstance":
        new = ContextInstance(self.id, self.class_name,
                              kw.get("queue", self.queue),
                              kw.get("store", self.store),
                              kw.get("genv", self.genv),
                              kw.get("activations", self.activations))
        return new

    def store_dict(self) -> dict:
        return dict(self.store)

    def has_eid(self, eid: str) -> bool:
        return any(a.eid == eid for a in self.activations)

    def running_of(self, eid: str) -> list[Activation]:
        return [a for a in self.activations if a.eid == eid and a.is_running()]

    def has_placeholder(self, eid: str) -> bool:
        return any(a.eid == eid and a.kind == "lock" for a in self.activations)

    def has_ex_activation(self) -> bool:
        return any(a.am == "ex" for a in self.activations)

    def key(self) -> tuple:
        if self._ckey is None:
            self._ckey = (self.id, self.class_name,
                          tuple(r.key() for r in self.queue),
                          self.store, self.genv,
                          tuple(sorted(a.key() for a in self.activations)))
        return self._ckey

    def __repr__(self) -> str:
        return (f"<{self.id} q={list(self.queue)!r} A={list(self.activations)!r} "
                f"σ={dict(self.store)!r}>")


@dataclass(frozen=True)
class EventInfo:
    eid: str
    target: str
    method: str
    args: tuple[Value, ...]
    am: str
    issue_tick: int
    commit_tick: Optional[int] = None
    status: str = "live"  # 'live' | 'committed' | 'failed'
    root_returned: bool = False
    failure: Optional[str] = None

    def key(self) -> tuple:
        return (self.eid, self.target, self.method, self.args, self.am,
                self.status, self.root_returned)


@dataclass(frozen=True)
class TraceEntry:
    step: int
    rule: str
    ctx: str
    eid: str
    detail: str
    choice: tuple = ()

    def to_record(self) -> dict:
        return {"step": self.step, "rule": self.rule, "ctx": self.ctx,
                "eid": self.eid, "detail": self.detail,
                "choice": list(self.choice)}


@dataclass(frozen=True)
class EngineOptions:
    dominator_sequencing: bool = True   # off = the deadlock-prone mutation
    unshared_start: bool = False        # experimental early-start relaxation
    check_invariants: bool = True
    suppress_nested: bool = False       # linear oracle: commit drops nested
                                        # dispatches, the caller supplies them


# --------------------------------------------------------------------------
# Global configuration
# --------------------------------------------------------------------------

class GlobalConfig:
    """The (running events, context set) pair plus the ownership graph."""

    __slots__ = ("program", "graph", "contexts", "events", "pending_nested",
                 "script", "script_pos", "next_eid", "step_count", "history",
                 "trace", "options", "_enabled", "_ckey")

    def __init__(self, program: Program, graph: OwnershipGraph,
                 contexts: dict, events: dict, pending_nested: dict,
                 script: tuple, script_pos: int, next_eid: int,
                 step_count: int, history: tuple, trace: tuple,
                 options: EngineOptions):
        self.program = program
        self.graph = graph
        self.contexts = contexts
        self.events = events
        self.pending_nested = pending_nested
        self.script = script
        self.script_pos = script_pos
        self.next_eid = next_eid
        self.step_count = step_count
        self.history = history
        self.trace = trace
        self.options = options
        self._enabled = None
        self._ckey = None

    # -- construction ----------------------------------------------------

    @classmethod
    def initial(cls, program: Program,
                options: EngineOptions = EngineOptions()) -> "GlobalConfig":
        graph = OwnershipGraph()
        for nid, cls_name in program.graph.nodes:
            graph = graph.add_node(nid, cls_name)
        for parent, child in program.graph.edges:
            graph = graph.add_ownership(parent, child)
        graph = graph.saturated()

        contexts: dict[str, ContextInstance] = {}
        binds: dict[str, dict[str, str]] = {}
        for owner, fieldname, target in program.graph.binds:
            binds.setdefault(owner, {})[fieldname] = target
        for nid in graph.nodes():
            cls_name = graph.class_of(nid)
            store: dict[str, Value] = {}
            if cls_name is not None:
                decl = program.class_decl(cls_name)
                if decl is None:
                    raise EngineError(f"node {nid} has undeclared class {cls_name}")
                store = {name: default for name, default in decl.data_fields}
            genv = binds.get(nid, {})
            contexts[nid] = ContextInstance(
                nid, cls_name, (), tuple(sorted(store.items())),
                tuple(sorted(genv.items())), ())
        return cls(program, graph, contexts, {}, {}, tuple(program.script),
                   0, 0, 0, (), (), options)

    def _clone(self) -> "GlobalConfig":
        return GlobalConfig(self.program, self.graph, dict(self.contexts),
                            dict(self.events), dict(self.pending_nested),
                            self.script, self.script_pos, self.next_eid,
                            self.step_count, self.history, self.trace,
                            self.options)

    # -- inspection --------------------------------------------------------

    def ctx(self, cid: str) -> ContextInstance:
        c = self.contexts.get(cid)
        if c is None:
            raise UnknownContext(cid)
        return c

    def live_events(self) -> list[str]:
        return sorted(e for e, info in self.events.items() if info.status == "live")

    def locked_contexts(self, eid: str) -> set[str]:
        return {c.id for c in self.contexts.values() if c.has_eid(eid)}

    def queued_contexts(self, eid: str) -> set[str]:
        out = set()
        for c in self.contexts.values():
            if any(r.eid == eid for r in c.queue):
                out.add(c.id)
        return out

    def outstanding_work(self, eid: str) -> dict:
        """Per-event commit bookkeeping: counts that must hit zero."""
        running = sum(len(c.running_of(eid)) for c in self.contexts.values())
        queued = sum(sum(1 for r in c.queue if r.eid == eid)
                     for c in self.contexts.values())
        waiting = sum(stmt_contains_waiting(a.stmt)
                      for c in self.contexts.values()
                      for a in c.activations if a.is_running() and a.eid == eid)
        return {"running": running, "queued": queued, "waiting": waiting}

    def store_digests(self) -> dict[str, tuple]:
        """Canonical per-context store state; virtual nodes excluded."""
        out = {}
        for cid, c in self.contexts.items():
            if cid in self.graph.virtual_nodes:
                continue
            out[cid] = c.store
        return out

    def canonical_key(self) -> tuple:
        if self._ckey is None:
            self._ckey = (
                tuple(self.contexts[cid].key() for cid in sorted(self.contexts)),
                tuple(self.events[e].key() for e in sorted(self.events)),
                tuple((e, self.pending_nested[e])
                      for e in sorted(self.pending_nested) if self.pending_nested[e]),
                self.graph.canonical_key(),
                self.script_pos,
                self.history,
            )
        return self._ckey

    # -- event dispatch ----------------------------------------------------

    def _fresh_eid(self) -> tuple[str, int]:
        return f"e{self.next_eid}", self.next_eid + 1

    def dispatch_event(self, target: str, method: str, args: tuple,
                       issue_tick: Optional[int] = None) -> "GlobalConfig":
        """Admit a client event: queue it at its target's dominator."""
        ctx = self.ctx(target)
        if ctx.class_name is None:
            raise UnknownContext(f"{target} is not addressable")
        mdef = self.program.method_def(ctx.class_name, method)
        if mdef is None:
            raise UnknownMethod(f"{ctx.class_name}.{method}")
        am = mdef.access_mode
        new = self._clone()
        eid, new.next_eid = self._fresh_eid()
        tick = self.step_count + 1 if issue_tick is None else issue_tick
        new.events[eid] = EventInfo(eid, target, method, tuple(args), am, tick)
        dom = (self.graph.dominator(target)
               if self.options.dominator_sequencing else target)
        if dom == target:
            req: object = CallReq(eid, method, tuple(args), "event", am)
            where = target
        else:
            req = LubReq(eid, method, tuple(args), target, am)
            where = dom
        c = new.contexts[where]
        new.contexts[where] = c.evolve(queue=c.queue + (req,))
        return new

    # -- transition enumeration ---------------------------------------------

    def enabled_transitions(self) -> list[tuple]:
        """Complete, deterministically ordered list of admissible rule instances."""
        if self._enabled is not None:
            return list(self._enabled)
        choices: list[tuple] = []
        if self.script_pos < len(self.script):
            choices.append(("dispatch", self.script_pos))
        autolocks: set[tuple] = set()

        for cid in sorted(self.contexts):
            c = self.contexts[cid]
            if c.queue and self._head_admissible(c):
                choices.append(("activate", cid))

        for cid in sorted(self.contexts):
            c = self.contexts[cid]
            seen: set[str] = set()
            for j, r in enumerate(c.queue):
                if r.eid in seen:
                    continue
                seen.add(r.eid)
                if (j > 0 and isinstance(r, CallReq) and c.has_eid(r.eid)):
                    choices.append(("promote", cid, r.eid))

        for cid in sorted(self.contexts):
            c = self.contexts[cid]
            for k, act in enumerate(c.activations):
                if not act.is_running():
                    continue
                outcome = self._peek(c, act)
                status = self._route_status(c, act, outcome, autolocks)
                if status == "enabled":
                    choices.append(("lift", cid, act.eid, k))

        for parent, child, eid in sorted(autolocks):
            choices.append(("autolock", parent, child, eid))

        for eid in self.live_events():
            if self._commit_eligible(eid):
                choices.append(("commit", eid))

        self._enabled = tuple(choices)
        return list(choices)

    def _head_admissible(self, c: ContextInstance) -> bool:
        head = c.queue[0]
        if isinstance(head, CallReq):
            if head.am == "ex":
                return all(a.eid == head.eid for a in c.activations)
            return not c.has_ex_activation()
        # lub marker
        if head.am == "ex":
            if not c.activations:
                return True
            return self._unshared_start_ok(c, head)
        if not c.has_ex_activation():
            return True
        return self._unshared_start_ok(c, head)

    def _unshared_start_ok(self, c: ContextInstance, head: LubReq) -> bool:
        """Early-start relaxation: bypass a held dominator when no descendants
        are shared with any holder's target.  Off unless explicitly enabled."""
        if not self.options.unshared_start:
            return False
        mine = self.graph.descendants(head.target) | {head.target}
        for a in c.activations:
            info = self.events.get(a.eid)
            if info is None:
                return False
            theirs = self.graph.descendants(info.target) | {info.target}
            if mine & theirs:
                return False
        return True

    def _peek(self, c: ContextInstance, act: Activation):
        """Advance the activation's silent prefix; memoized per state."""
        memo_key = (c.store, c.genv, self._children_snapshot(c.id))
        hit = act._peek.get(memo_key)
        if hit is not None:
            return hit
        cfg = IntraConfig(c.store, c.genv, act.lenv, act.stmt, act.am,
                          c.id, memo_key[2])
        head = interp.head_stmt(cfg)
        if isinstance(head, interp.AssignWaiting):
            out = ("blocked",)
        else:
            try:
                cfg2, label = interp.step_intra(cfg)
                if label.kind == "ownership":
                    out = self._peek_ownership(cfg2)
                elif label.kind in ("synch", "asynch"):
                    out = ("label", cfg2, self._fill_label_am(label))
                else:
                    out = ("label", cfg2, label)
            except (EvalError, AccessViolation) as exc:
                out = ("error", type(exc).__name__, str(exc))
        act._peek[memo_key] = out
        return out

    def _peek_ownership(self, cfg2: IntraConfig):
        head = interp.head_stmt(cfg2)
        op = "add" if isinstance(head, AddOwnership) else "remove"
        try:
            parent = interp.eval_expr(cfg2, head.parent)
            child = interp.eval_expr(cfg2, head.child)
        except EvalError as exc:
            return ("error", "EvalError", str(exc))
        if not isinstance(parent, str) or not isinstance(child, str):
            return ("error", "EvalError", "ownership endpoints must be context refs")
        return ("ownership", cfg2, op, parent, child)

    def _fill_label_am(self, label: Label) -> Label:
        cls = None
        ctx = self.contexts.get(label.target)
        if ctx is not None:
            cls = ctx.class_name
        mdef = self.program.method_def(cls, label.method) if cls else None
        return replace(label, am=mdef.access_mode if mdef else None)

    def _children_snapshot(self, cid: str) -> tuple:
        kids = self.graph.children(cid)
        return tuple(sorted((k, self.graph.class_of(k) or "") for k in kids))

    def _route_status(self, c: ContextInstance, act: Activation, outcome,
                      autolocks: set) -> str:
        """Is this lift applicable now? Collect wanted auto-lock steps if not."""
        kind = outcome[0]
        if kind == "blocked":
            return "blocked"
        if kind == "error":
            return "enabled"  # the lift fires and aborts the event
        if kind == "ownership":
            _, _, _, parent, child = outcome
            ready = True
            for endpoint in (parent, child):
                st = self._target_ready(c, act.eid, endpoint, autolocks,
                                        lock_endpoint=True)
                ready = ready and st
            return "enabled" if ready else "blocked"
        _, _, label = outcome
        if label.kind in ("ret", "event"):
            return "enabled"
        # synch / asynch call
        if label.target not in self.contexts:
            return "enabled"  # aborts with illegal-target
        ready = self._target_ready(c, act.eid, label.target, autolocks,
                                   lock_endpoint=False)
        return "enabled" if ready else "blocked"

    def _target_ready(self, c: ContextInstance, eid: str, target: str,
                      autolocks: set, lock_endpoint: bool) -> bool:
        """Call/ownership target readiness under hand-in-hand path locking."""
        if target == c.id:
            return True
        tc = self.contexts.get(target)
        if tc is None:
            return True  # nonexistent: surfaces as illegal-target abort
        if not lock_endpoint and (target in self.graph.children(c.id)
                                  or tc.has_eid(eid)):
            return True
        if lock_endpoint and tc.has_eid(eid):
            return True
        if target not in self.graph.descendants(c.id):
            return True  # illegal-target abort
        path = self._lock_path(c.id, target)
        to_lock = path[1:] if lock_endpoint else path[1:-1]
        prev = c.id
        for node in to_lock:
            nc = self.contexts[node]
            if not nc.has_eid(eid):
                if self._lockable(nc, eid):
                    autolocks.add((prev, node, eid))
                return False
            prev = node
        return True

    def _lockable(self, nc: ContextInstance, eid: str) -> bool:
        info = self.events[eid]
        if info.am == "ro":
            return not nc.has_ex_activation()
        return not nc.activations

    def _lock_path(self, src: str, dst: str) -> list[str]:
        """Shortest top-down path src -> dst, lexicographic tie-break."""
        best: dict[str, tuple[int, str]] = {src: (0, "")}
        frontier = [src]
        while frontier:
            frontier.sort()
            nxt: list[str] = []
            for node in frontier:
                dist = best[node][0]
                for ch in sorted(self.graph.children(node)):
                    cand = (dist + 1, node)
                    if ch not in best or cand < best[ch]:
                        best[ch] = cand
                        nxt.append(ch)
            frontier = nxt
        if dst not in best:
            raise ProtocolViolation(f"no path {src} -> {dst}")
        path = [dst]
        while path[-1] != src:
            path.append(best[path[-1]][1])
        path.reverse()
        return path

    def _commit_eligible(self, eid: str) -> bool:
        info = self.events[eid]
        if not info.root_returned:
            return False
        work = self.outstanding_work(eid)
        return work["running"] == 0 and work["queued"] == 0

    # -- transition application ---------------------------------------------

    def apply(self, choice: tuple) -> "GlobalConfig":
        """Fire one enabled rule instance; raises StaleChoice otherwise."""
        if tuple(choice) not in set(map(tuple, self.enabled_transitions())):
            raise StaleChoice(f"choice {choice!r} is not enabled")
        rule = choice[0]
        before_locks = None
        if self.options.check_invariants:
            before_locks = {e: self.locked_contexts(e) for e in self.live_events()}
        if rule == "dispatch":
            new = self._apply_dispatch(choice)
        elif rule == "activate":
            new = self._apply_activate(choice)
        elif rule == "promote":
            new = self._apply_promote(choice)
        elif rule == "lift":
            new = self._apply_lift(choice)
        elif rule == "autolock":
            new = self._apply_autolock(choice)
        elif rule == "commit":
            new = self._apply_commit(choice)
        else:
            raise StaleChoice(f"unknown rule {rule!r}")
        new.step_count = self.step_count + 1
        if self.options.check_invariants:
            new.check_invariants(before_locks)
        return new

    def _traced(self, new: "GlobalConfig", rule: str, ctx: str, eid: str,
                detail: str, choice: tuple) -> "GlobalConfig":
        entry = TraceEntry(len(self.trace), rule, ctx, eid, detail, tuple(choice))
        new.trace = self.trace + (entry,)
        return new

    def _apply_dispatch(self, choice: tuple) -> "GlobalConfig":
        spec: EventSpec = self.script[choice[1]]
        new = self.dispatch_event(spec.target, spec.method, spec.args)
        new.script_pos = self.script_pos + 1
        eid = f"e{self.next_eid}"
        enqueue_at = (self.graph.dominator(spec.target)
                      if self.options.dominator_sequencing else spec.target)
        return self._traced(new, "dispatch", enqueue_at, eid,
                            f"{spec.target}.{spec.method}"
                            f"({', '.join(value_repr(a) for a in spec.args)})",
                            choice)

    def _apply_activate(self, choice: tuple) -> "GlobalConfig":
        cid = choice[1]
        new = self._clone()
        c = new.contexts[cid]
        head, rest = c.queue[0], c.queue[1:]
        if isinstance(head, CallReq):
            cls = c.class_name
            mdef = self.program.method_def(cls, head.method) if cls else None
            if mdef is None or len(mdef.params) != len(head.args):
                new.contexts[cid] = c.evolve(queue=rest)
                new = new._abort_event(head.eid,
                                       f"bad call {cid}.{head.method}")
                return self._traced(new, "abort", cid, head.eid,
                                    f"bad call {cid}.{head.method}", choice)
            frame = {p.name: copy_value(a) for p, a in zip(mdef.params, head.args)}
            act = Activation.running(head.eid, head.am, head.decorator,
                                     frame, mdef.body)
            new.contexts[cid] = c.evolve(queue=rest,
                                         activations=c.activations + (act,))
            return self._traced(new, "activate", cid, head.eid,
                                f"{head.decorator} {head.method} ({head.am})", choice)
        # lub marker: lock here, forward the event call to its target
        placeholder = Activation.placeholder(head.eid, head.am)
        forwarded = CallReq(head.eid, head.method, head.args, "event", head.am)
        if self.options.unshared_start and not self._normally_admissible(c, head):
            # early-start path: no dominator lock is taken
            new.contexts[cid] = c.evolve(queue=rest)
            rule_detail = f"early-start forward to {head.target}"
        else:
            new.contexts[cid] = c.evolve(queue=rest,
                                         activations=c.activations + (placeholder,))
            rule_detail = f"lub lock, forward to {head.target}"
        t = new.contexts[head.target]
        new.contexts[head.target] = t.evolve(queue=t.queue + (forwarded,))
        return self._traced(new, "lub_lock", cid, head.eid, rule_detail, choice)

    def _normally_admissible(self, c: ContextInstance, head: LubReq) -> bool:
        if head.am == "ex":
            return not c.activations
        return not c.has_ex_activation()

    def _apply_promote(self, choice: tuple) -> "GlobalConfig":
        cid, eid = choice[1], choice[2]
        new = self._clone()
        c = new.contexts[cid]
        j = next(i for i, r in enumerate(c.queue) if r.eid == eid)
        queue = (c.queue[j],) + c.queue[:j] + c.queue[j + 1:]
        new.contexts[cid] = c.evolve(queue=queue)
        return self._traced(new, "promote", cid, eid,
                            f"request promoted from slot {j}", choice)

    def _apply_autolock(self, choice: tuple) -> "GlobalConfig":
        parent, child, eid = choice[1], choice[2], choice[3]
        new = self._clone()
        c = new.contexts[child]
        info = self.events[eid]
        act = Activation.placeholder(eid, info.am)
        new.contexts[child] = c.evolve(activations=c.activations + (act,))
        return self._traced(new, "auto_lock", child, eid,
                            f"hand-in-hand from {parent}", choice)

    def _apply_lift(self, choice: tuple) -> "GlobalConfig":
        cid, eid, k = choice[1], choice[2], choice[3]
        c = self.contexts[cid]
        act = c.activations[k]
        outcome = self._peek(c, act)
        kind = outcome[0]
        if kind == "error":
            new = self._clone()
            new = new._abort_event(eid, f"{outcome[1]}: {outcome[2]}")
            return self._traced(new, "abort", cid, eid,
                                f"{outcome[1]}: {outcome[2]}", choice)
        if kind == "ownership":
            return self._lift_ownership(choice, c, act, outcome)
        _, cfg2, label = outcome
        if label.kind == "ret":
            return self._lift_return(choice, c, act, cfg2, label)
        if label.kind == "event":
            return self._lift_nested_event(choice, c, act, cfg2, label)
        return self._lift_call(choice, c, act, cfg2, label)

    def _store_back(self, new: "GlobalConfig", cid: str, cfg2: IntraConfig,
                    act: Activation, new_act: Optional[Activation]) -> None:
        """Write an intra step's results into the context instance."""
        c = new.contexts[cid]
        acts = list(c.activations)
        idx = acts.index(act)
        if new_act is None:
            del acts[idx]
        else:
            acts[idx] = new_act
        new.contexts[cid] = c.evolve(store=cfg2.store, activations=tuple(acts))

    def _lift_call(self, choice, c, act, cfg2: IntraConfig, label: Label):
        new = self._clone()
        tc = new.contexts.get(label.target)
        info = self.events[act.eid]
        if tc is None or tc.class_name is None:
            new = new._abort_event(act.eid, f"illegal-target {label.target}")
            return self._traced(new, "abort", c.id, act.eid,
                                f"illegal-target {label.target}", choice)
        legal = (label.target == c.id
                 or label.target in self.graph.children(c.id)
                 or tc.has_eid(act.eid)
                 or label.target in self.graph.descendants(c.id))
        if not legal:
            new = new._abort_event(act.eid, f"illegal-target {label.target}")
            return self._traced(new, "abort", c.id, act.eid,
                                f"illegal-target {label.target}", choice)
        if info.am == "ro" and label.am == "ex":
            new = new._abort_event(act.eid, "ro event calls ex method")
            return self._traced(new, "abort", c.id, act.eid,
                                "ro event calls ex method", choice)
        decorator = "synch" if label.kind == "synch" else "asynch"
        req = CallReq(act.eid, label.method, label.args, decorator, info.am)
        if label.kind == "asynch":
            cfg2 = interp.clear_emit(cfg2)
        self._store_back(new, c.id, cfg2, act, act.with_config(cfg2))
        tc = new.contexts[label.target]
        new.contexts[label.target] = tc.evolve(queue=tc.queue + (req,))
        return self._traced(new, f"{decorator}_call", c.id, act.eid,
                            f"-> {label.target}.{label.method}", choice)

    def _lift_nested_event(self, choice, c, act, cfg2: IntraConfig, label: Label):
        new = self._clone()
        cfg2 = interp.clear_emit(cfg2)
        self._store_back(new, c.id, cfg2, act, act.with_config(cfg2))
        pend = new.pending_nested.get(act.eid, ())
        new.pending_nested[act.eid] = pend + ((label.target, label.method,
                                               label.args),)
        return self._traced(new, "nested_event", c.id, act.eid,
                            f"defer {label.target}.{label.method}", choice)

    def _lift_return(self, choice, c, act, cfg2: IntraConfig, label: Label):
        new = self._clone()
        # the returning activation leaves a lock placeholder behind
        keep: Optional[Activation] = None
        if not c.has_placeholder(act.eid):
            keep = Activation.placeholder(act.eid, act.am)
        self._store_back(new, c.id, cfg2, act, keep)

        if act.decorator == "synch":
            waiter = None
            for cid2 in sorted(new.contexts):
                for a2 in new.contexts[cid2].activations:
                    if (a2.is_running() and a2.eid == act.eid
                            and stmt_contains_waiting(a2.stmt, c.id)):
                        waiter = (cid2, a2)
                        break
                if waiter:
                    break
            if waiter is None:
                raise ProtocolViolation(
                    f"synch return from {c.id} with no waiting caller for {act.eid}")
            cid2, a2 = waiter
            wcfg = IntraConfig(new.contexts[cid2].store, new.contexts[cid2].genv,
                               a2.lenv, a2.stmt, a2.am, cid2,
                               self._children_snapshot(cid2))
            resumed = interp.resume_with_return(wcfg, c.id, label.value)
            c2 = new.contexts[cid2]
            acts = list(c2.activations)
            acts[acts.index(a2)] = a2.with_config(resumed)
            new.contexts[cid2] = c2.evolve(activations=tuple(acts))
            return self._traced(new, "synch_return", c.id, act.eid,
                                f"resume {cid2} with {value_repr(label.value)}",
                                choice)
        if act.decorator == "asynch":
            return self._traced(new, "asynch_return", c.id, act.eid, "", choice)
        # event-decorated root return: commit happens in its own step once
        # all outstanding asynchronous work has drained
        info = new.events[act.eid]
        new.events[act.eid] = replace(info, root_returned=True)
        return self._traced(new, "event_return", c.id, act.eid,
                            f"value {value_repr(label.value)}", choice)

    def _lift_ownership(self, choice, c, act, outcome):
        _, cfg2, op, parent, child = outcome
        new = self._clone()
        for endpoint in (parent, child):
            tc = new.contexts.get(endpoint)
            held = endpoint == c.id or (tc is not None and tc.has_eid(act.eid))
            if tc is None or not held:
                new = new._abort_event(act.eid,
                                       f"ownership endpoint {endpoint} not held")
                return self._traced(new, "abort", c.id, act.eid,
                                    f"ownership endpoint {endpoint} not held",
                                    choice)
        try:
            if op == "add":
                graph2 = self.graph.add_ownership(parent, child)
                detail = f"add {parent} -> {child}"
            else:
                graph2 = self.graph.remove_ownership(parent, child)
                detail = f"remove {parent} -> {child}"
        except (CycleError, MissingEdgeError, GraphError) as exc:
            new = new._abort_event(act.eid, f"{type(exc).__name__}: {exc}")
            return self._traced(new, "abort", c.id, act.eid, str(exc), choice)
        new.graph = graph2
        for vid in graph2.nodes():
            if vid not in new.contexts:
                new.contexts[vid] = ContextInstance(vid, graph2.class_of(vid))
        stepped = replace(cfg2, stmt=interp._pop_head(cfg2.stmt, interp.Skip()))
        self._store_back(new, c.id, stepped, act, act.with_config(stepped))
        return self._traced(new, "ownership", c.id, act.eid, detail, choice)

    def _apply_commit(self, choice: tuple) -> "GlobalConfig":
        eid = choice[1]
        new = self._clone()
        new._release_event(eid)
        info = new.events[eid]
        commit_tick = self.step_count + 1
        new.events[eid] = replace(info, status="committed", commit_tick=commit_tick)
        new.history = self.history + ((eid, "committed"),)
        new = self._traced(new, "commit", info.target, eid,
                           f"released {len(self.locked_contexts(eid))} contexts",
                           choice)
        # nested events join the world only after their creator commits
        pending = () if self.options.suppress_nested else self.pending_nested.get(eid, ())
        for target, method, args in pending:
            try:
                new = new.dispatch_event(target, method, args,
                                         issue_tick=commit_tick + 1)
            except (UnknownContext, UnknownMethod) as exc:
                feid, new.next_eid = new._fresh_eid()
                new.events[feid] = EventInfo(feid, str(target), method, tuple(args),
                                             "ex", commit_tick + 1, commit_tick + 1,
                                             "failed", failure=str(exc))
                new.history = new.history + ((feid, "failed"),)
        new.pending_nested.pop(eid, None)
        return new

    def _release_event(self, eid: str) -> None:
        for cid, c in list(self.contexts.items()):
            acts = tuple(a for a in c.activations if a.eid != eid)
            queue = tuple(r for r in c.queue if r.eid != eid)
            if len(acts) != len(c.activations) or len(queue) != len(c.queue):
                self.contexts[cid] = c.evolve(queue=queue, activations=acts)

    def _abort_event(self, eid: str, reason: str) -> "GlobalConfig":
        """Failed event: locks released through the commit machinery."""
        self._release_event(eid)
        info = self.events[eid]
        self.events[eid] = replace(info, status="failed",
                                   commit_tick=self.step_count + 1, failure=reason)
        self.history = self.history + ((eid, "failed"),)
        self.pending_nested.pop(eid, None)
        return self

    # -- invariants ----------------------------------------------------------

    def check_invariants(self, before_locks: Optional[dict] = None) -> None:
        """Protocol invariants asserted after every transition."""
        for cid, c in self.contexts.items():
            ams = {a.am for a in self.activations_of(cid)}
            eids = {a.eid for a in c.activations}
            if "ex" in ams and len(eids) > 1:
                raise ProtocolViolation(
                    f"lock shape broken at {cid}: {c.activations!r}")
        if self.options.dominator_sequencing and not self.options.unshared_start:
            for eid in self.live_events():
                locked = self.locked_contexts(eid)
                if not locked:
                    continue
                info = self.events[eid]
                dom = self.graph.dominator(info.target)
                if dom not in locked:
                    raise ProtocolViolation(
                        f"{eid} active without its dominator lock at {dom}")
                self._check_path_lock(eid, info.target, dom, locked)
        if before_locks:
            for eid, before in before_locks.items():
                info = self.events.get(eid)
                if info is None or info.status != "live":
                    continue
                after = self.locked_contexts(eid)
                if not before <= after:
                    raise ProtocolViolation(
                        f"lock set of {eid} shrank before commit: "
                        f"{sorted(before)} -> {sorted(after)}")

    def activations_of(self, cid: str) -> tuple:
        return self.contexts[cid].activations

    def _check_path_lock(self, eid: str, target: str, dom: str,
                         locked: set[str]) -> None:
        # Every locked context must be connected to the rest of the lock set;
        # the dominator forwards directly to the target, which counts as a link.
        links: dict[str, set[str]] = {n: set() for n in locked}
        for n in locked:
            for m in self.graph.children(n) | self.graph.parents(n):
                if m in locked:
                    links[n].add(m)
                    links.setdefault(m, set()).add(n)
        if dom in locked and target in locked:
            links[dom].add(target)
            links[target].add(dom)
        start = dom if dom in locked else next(iter(sorted(locked)))
        seen = {start}
        stack = [start]
        while stack:
            n = stack.pop()
            for m in links[n]:
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        if seen != locked:
            raise ProtocolViolation(
                f"lock set of {eid} is disconnected: {sorted(locked - seen)} "
                f"unreachable from {start}")


# --------------------------------------------------------------------------
# Drivers
# --------------------------------------------------------------------------

def run_to_completion(cfg: GlobalConfig, policy_seed: int = 0,
                      max_steps: int = 100_000) -> tuple[GlobalConfig, tuple]:
    """Drive one schedule with a seeded uniform policy until quiescence."""
    rng = random.Random(policy_seed)
    steps = 0
    while True:
        choices = cfg.enabled_transitions()
        if not choices:
            return cfg, cfg.trace
        cfg = cfg.apply(rng.choice(choices))
        steps += 1
        if steps > max_steps:
            raise EngineError(f"no quiescence after {max_steps} steps")


def replay(cfg: GlobalConfig, choices: Iterable[tuple]) -> GlobalConfig:
    """Re-apply a recorded schedule; raises StaleChoice on divergence."""
    for ch in choices:
        cfg = cfg.apply(tuple(ch))
    return cfg
