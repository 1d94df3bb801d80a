"""Intra-context big-step machine.

Runs one activation's statement inside a single context until it produces a
synchronization label: a call to another context, a nested event dispatch, or
a return from the outermost frame.  Silent statements (assignments, field
updates, branches, bounded loops) are folded into one step.

Everything here is pure: configurations go in, new configurations come out,
so any number of exploration workers can step disjoint configs concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from .lang import (AddOwnership, Assign, AssignWaiting, AsyncCall, Binary,
                   Children, EmitMark, EventCall, Expr, ForChildren, If, Lit,
                   OwnField, OwnFieldSet, Record, RecordField, RecordLit,
                   RecordSet, RemoveOwnership, Repeat, Return, SelfRef, Seq,
                   Size, Skip, Stmt, SyncCall, Unary, Value, Var, copy_value,
                   seq, INT_MAX, INT_MIN)


class EvalError(Exception):
    """Runtime fault inside an event; the engine aborts the issuing event."""


class AccessViolation(EvalError):
    """Write attempted under readonly access; static-check escape."""


class StuckError(Exception):
    """Engine misuse: stepping a configuration blocked on waiting/emit."""


class NoWaitingPlaceholder(Exception):
    pass


@dataclass(frozen=True)
class Label:
    """Synchronization labels the inter-context machine consumes."""
    kind: str                      # 'ret' | 'synch' | 'asynch' | 'event'
    target: Optional[str] = None   # callee context id
    method: Optional[str] = None
    args: tuple[Value, ...] = ()
    am: Optional[str] = None       # callee's declared access mode
    value: Value = None            # return payload for 'ret'

    def __repr__(self) -> str:
        if self.kind == "ret":
            return f"ret({self.value!r})"
        return f"{self.kind}({self.target}.{self.method}{list(self.args)!r}, {self.am})"


@dataclass(frozen=True)
class IntraConfig:
    """One activation's view: (store, genv, lenv frames, stmt, access mode).

    `store` is the context's mutable field state, `genv` its context-ref
    bindings, `lenv` a tuple of call frames (vars -> values).  The executing
    context id and a children snapshot come along so `this` and
    `children[...]` evaluate without reaching back into the engine.
    """
    store: tuple[tuple[str, Value], ...]
    genv: tuple[tuple[str, Value], ...]
    lenv: tuple[tuple[tuple[str, Value], ...], ...]
    stmt: Stmt
    access_mode: str
    self_id: str = ""
    children: tuple[tuple[str, str], ...] = ()  # (child id, class) snapshot

    @classmethod
    def make(cls, store: dict, genv: dict, locals_: dict, stmt: Stmt,
             access_mode: str, self_id: str = "",
             children: tuple[tuple[str, str], ...] = ()) -> "IntraConfig":
        return cls(tuple(sorted(store.items())), tuple(sorted(genv.items())),
                   (tuple(sorted(locals_.items())),), stmt, access_mode,
                   self_id, children)

    def store_dict(self) -> dict:
        return dict(self.store)

    def top_frame(self) -> dict:
        return dict(self.lenv[-1])

    def with_frame(self, frame: dict) -> "IntraConfig":
        lenv = self.lenv[:-1] + (tuple(sorted(frame.items())),)
        return replace(self, lenv=lenv)


# --------------------------------------------------------------------------
# Expression evaluation
# --------------------------------------------------------------------------

def _check_int(v: int) -> int:
    if not (INT_MIN <= v <= INT_MAX):
        raise EvalError(f"integer overflow: {v}")
    return v


def _trunc_div(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return q if (a < 0) == (b < 0) else -q


def eval_expr(cfg: IntraConfig, e: Expr) -> Value:
    """Pure expression evaluation against (store, genv, lenv)."""
    if isinstance(e, Lit):
        return e.value
    if isinstance(e, Var):
        frame = dict(cfg.lenv[-1])
        if e.name in frame:
            return frame[e.name]
        raise EvalError(f"unbound variable {e.name!r}")
    if isinstance(e, SelfRef):
        return cfg.self_id
    if isinstance(e, OwnField):
        store = dict(cfg.store)
        if e.name in store:
            return store[e.name]
        genv = dict(cfg.genv)
        if e.name in genv:
            return genv[e.name]
        raise EvalError(f"context has no field {e.name!r}")
    if isinstance(e, RecordField):
        base = eval_expr(cfg, e.base)
        if not isinstance(base, Record):
            raise EvalError(f"field read on non-record value {base!r}")
        if not base.has(e.name):
            raise EvalError(f"record has no field {e.name!r}")
        return base.get(e.name)
    if isinstance(e, RecordLit):
        return Record.of({k: eval_expr(cfg, v) for k, v in e.entries})
    if isinstance(e, Children):
        return tuple(cid for cid, cls in cfg.children if cls == e.class_name)
    if isinstance(e, Size):
        v = eval_expr(cfg, e.arg)
        if isinstance(v, tuple):
            return len(v)
        if isinstance(v, Record):
            return len(v.entries)
        raise EvalError(f"size() of non-collection value {v!r}")
    if isinstance(e, Unary):
        v = eval_expr(cfg, e.arg)
        if e.op == "-":
            if isinstance(v, bool) or not isinstance(v, int):
                raise EvalError("unary '-' expects an integer")
            return _check_int(-v)
        if e.op == "!":
            if not isinstance(v, bool):
                raise EvalError("'!' expects a boolean")
            return not v
    if isinstance(e, Binary):
        return _eval_binary(cfg, e)
    raise EvalError(f"cannot evaluate {e!r}")


def _eval_binary(cfg: IntraConfig, e: Binary) -> Value:
    op = e.op
    lv = eval_expr(cfg, e.left)
    if op in ("&&", "||"):
        if not isinstance(lv, bool):
            raise EvalError(f"{op} expects booleans")
        if op == "&&" and not lv:
            return False
        if op == "||" and lv:
            return True
        rv = eval_expr(cfg, e.right)
        if not isinstance(rv, bool):
            raise EvalError(f"{op} expects booleans")
        return rv
    rv = eval_expr(cfg, e.right)
    if op in ("==", "!="):
        same = lv == rv and isinstance(lv, bool) == isinstance(rv, bool)
        return same if op == "==" else not same
    int_ok = (isinstance(lv, int) and not isinstance(lv, bool)
              and isinstance(rv, int) and not isinstance(rv, bool))
    if not int_ok:
        raise EvalError(f"{op} expects integers, got {lv!r} and {rv!r}")
    if op == "+":
        return _check_int(lv + rv)
    if op == "-":
        return _check_int(lv - rv)
    if op == "*":
        return _check_int(lv * rv)
    if op == "/":
        if rv == 0:
            raise EvalError("division by zero")
        return _check_int(_trunc_div(lv, rv))
    if op == "%":
        if rv == 0:
            raise EvalError("modulo by zero")
        return _check_int(lv - _trunc_div(lv, rv) * rv)
    if op == "<":
        return lv < rv
    if op == "<=":
        return lv <= rv
    if op == ">":
        return lv > rv
    if op == ">=":
        return lv >= rv
    raise EvalError(f"unknown operator {op}")


# --------------------------------------------------------------------------
# Big-step execution
# --------------------------------------------------------------------------

def _head(s: Stmt) -> Stmt:
    while isinstance(s, Seq):
        s = s.first
    return s


def _pop_head(s: Stmt, repl: Stmt) -> Stmt:
    """Replace the head statement of a Seq spine with `repl`."""
    if isinstance(s, Seq):
        return seq(_pop_head(s.first, repl), s.rest)
    return repl


def step_intra(cfg: IntraConfig) -> tuple[IntraConfig, Label]:
    """Run the maximal silent prefix, then return the first label.

    Synchronous calls leave a waiting placeholder behind; asynchronous calls
    and nested event dispatches leave an emit mark the engine clears once it
    has queued the request.  A return from the single remaining frame clears
    the local environment and yields the return label.
    """
    store = cfg.store_dict()
    frame = cfg.top_frame()
    stmt = cfg.stmt

    while True:
        head = _head(stmt)

        if isinstance(head, (AssignWaiting, EmitMark)):
            raise StuckError(f"blocked on runtime command {head!r}")

        if isinstance(head, Skip):
            if isinstance(stmt, Seq):
                stmt = _strip_skip(stmt)
                continue
            # Fully reduced with no return: treat as returning unit.
            head = Return(Lit(None))
            stmt = head

        snapshot = replace(cfg, store=tuple(sorted(store.items())),
                           lenv=cfg.lenv[:-1] + (tuple(sorted(frame.items())),),
                           stmt=stmt)

        if isinstance(head, Assign):
            frame[head.var] = eval_expr(snapshot, head.expr)
            stmt = _pop_head(stmt, Skip())
            continue

        if isinstance(head, OwnFieldSet):
            if cfg.access_mode != "ex":
                raise AccessViolation(f"field write to {head.name!r} under ro access")
            if head.name not in store:
                raise EvalError(f"context has no data field {head.name!r}")
            store[head.name] = eval_expr(snapshot, head.expr)
            stmt = _pop_head(stmt, Skip())
            continue

        if isinstance(head, RecordSet):
            if cfg.access_mode != "ex":
                raise AccessViolation(f"record write to {head.var}.{head.name} under ro access")
            base = frame.get(head.var)
            if not isinstance(base, Record):
                raise EvalError(f"{head.var!r} is not a record")
            frame[head.var] = base.set(head.name, eval_expr(snapshot, head.expr))
            stmt = _pop_head(stmt, Skip())
            continue

        if isinstance(head, If):
            cond = eval_expr(snapshot, head.cond)
            if not isinstance(cond, bool):
                raise EvalError("if condition must be a boolean")
            stmt = _pop_head(stmt, head.then if cond else head.orelse)
            continue

        if isinstance(head, Repeat):
            count = eval_expr(snapshot, head.count)
            if isinstance(count, bool) or not isinstance(count, int):
                raise EvalError("repeat count must be an integer")
            if count < 0:
                raise EvalError("repeat count must be non-negative")
            stmt = _pop_head(stmt, seq(*([head.body] * count)) if count else Skip())
            continue

        if isinstance(head, ForChildren):
            kids = [cid for cid, cls in cfg.children if cls == head.class_name]
            unrolled = [s for cid in kids
                        for s in (Assign(head.var, Lit(cid)), head.body)]
            stmt = _pop_head(stmt, seq(*unrolled) if unrolled else Skip())
            continue

        if isinstance(head, SyncCall):
            target = _ctx_value(snapshot, head.target)
            args = tuple(copy_value(eval_expr(snapshot, a)) for a in head.args)
            residual = _pop_head(stmt, AssignWaiting(head.var, target))
            out = _mk(cfg, store, frame, residual)
            return out, Label("synch", target, head.method, args, am=None)

        if isinstance(head, AsyncCall):
            target = _ctx_value(snapshot, head.target)
            args = tuple(copy_value(eval_expr(snapshot, a)) for a in head.args)
            residual = _pop_head(stmt, EmitMark())
            out = _mk(cfg, store, frame, residual)
            return out, Label("asynch", target, head.method, args, am=None)

        if isinstance(head, EventCall):
            target = _ctx_value(snapshot, head.target)
            args = tuple(copy_value(eval_expr(snapshot, a)) for a in head.args)
            residual = _pop_head(stmt, EmitMark())
            out = _mk(cfg, store, frame, residual)
            return out, Label("event", target, head.method, args)

        if isinstance(head, Return):
            value = copy_value(eval_expr(snapshot, head.expr))
            if len(cfg.lenv) != 1:
                # Cross-context calls always open a fresh activation, so the
                # frame list never grows past one entry.
                raise EvalError("return with nested call frames")
            out = replace(cfg, store=tuple(sorted(store.items())),
                          lenv=(), stmt=Skip())
            return out, Label("ret", value=value)

        if isinstance(head, (AddOwnership, RemoveOwnership)):
            # Ownership edits touch the shared graph; the engine applies them.
            if cfg.access_mode != "ex":
                raise AccessViolation("ownership change under ro access")
            out = _mk(cfg, store, frame, stmt)
            return out, Label("ownership")

        raise EvalError(f"cannot execute statement {head!r}")


def _strip_skip(s: Stmt) -> Stmt:
    if isinstance(s, Seq):
        first = _strip_skip(s.first) if isinstance(s.first, Seq) else s.first
        if isinstance(first, Skip):
            return s.rest
        return Seq(first, s.rest)
    return s


def _ctx_value(cfg: IntraConfig, e: Expr) -> str:
    v = eval_expr(cfg, e)
    if not isinstance(v, str):
        raise EvalError(f"call target is not a context reference: {v!r}")
    return v


def _mk(cfg: IntraConfig, store: dict, frame: dict, stmt: Stmt) -> IntraConfig:
    return replace(cfg, store=tuple(sorted(store.items())),
                   lenv=cfg.lenv[:-1] + (tuple(sorted(frame.items())),),
                   stmt=stmt)


def resume_with_return(cfg: IntraConfig, ctx: str, value: Value) -> IntraConfig:
    """Replace the unique waiting(ctx) placeholder with the returned value."""
    replaced = 0

    def sub(s: Stmt) -> Stmt:
        nonlocal replaced
        if isinstance(s, AssignWaiting) and s.ctx == ctx:
            replaced += 1
            return Assign(s.var, Lit(copy_value(value)))
        if isinstance(s, Seq):
            return Seq(sub(s.first), sub(s.rest))
        if isinstance(s, If):
            return If(s.cond, sub(s.then), sub(s.orelse))
        if isinstance(s, Repeat):
            return Repeat(s.count, sub(s.body))
        if isinstance(s, ForChildren):
            return ForChildren(s.var, s.class_name, sub(s.body))
        return s

    new_stmt = sub(cfg.stmt)
    if replaced == 0:
        raise NoWaitingPlaceholder(f"no waiting({ctx}) placeholder present")
    if replaced > 1:
        raise NoWaitingPlaceholder(f"multiple waiting({ctx}) placeholders present")
    return replace(cfg, stmt=new_stmt)


def clear_emit(cfg: IntraConfig) -> IntraConfig:
    """Erase the emit mark left by an asynch call once its request is queued."""
    head = _head(cfg.stmt)
    if not isinstance(head, EmitMark):
        raise StuckError("no emit mark at head")
    return replace(cfg, stmt=_pop_head(cfg.stmt, Skip()))


def head_stmt(cfg: IntraConfig) -> Stmt:
    return _head(cfg.stmt)
