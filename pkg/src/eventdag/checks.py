"""Static checks: class-level ownership acyclicity and readonly discipline.

The class check collects, per context class, the set of classes it can reach
through ref fields, `children[...]` iteration, and annotated call parameters,
then rejects any cycle in that constraint graph (self-ownership is allowed;
instance-level cycles are caught dynamically instead).

The readonly check rejects ro methods that write fields, modify ownership,
or call methods that are not themselves declared ro.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

from .graph import find_class_cycle
from .lang import (AddOwnership, AssignWaiting, AsyncCall, Children, ClassDecl,
                   Diagnostic, EmitMark, EventCall, Expr, ForChildren, If,
                   MethodDef, OwnFieldSet, Program, RecordSet, RemoveOwnership,
                   Repeat, Return, SelfRef, Seq, Stmt, SyncCall, Var)


@dataclass
class CheckResult:
    ok: bool
    diagnostics: list[Diagnostic]
    cycle: Optional[list[str]] = None  # class-name cycle witness, if any


def iter_stmts(s: Stmt) -> Iterator[Stmt]:
    yield s
    if isinstance(s, Seq):
        yield from iter_stmts(s.first)
        yield from iter_stmts(s.rest)
    elif isinstance(s, If):
        yield from iter_stmts(s.then)
        yield from iter_stmts(s.orelse)
    elif isinstance(s, (Repeat, ForChildren)):
        yield from iter_stmts(s.body)


def _iter_exprs_of(s: Stmt) -> Iterator[Expr]:
    for attr in ("expr", "cond", "count", "target", "parent", "child"):
        e = getattr(s, attr, None)
        if isinstance(e, Expr):
            yield from _iter_subexprs(e)
    for a in getattr(s, "args", ()):
        yield from _iter_subexprs(a)


def _iter_subexprs(e: Expr) -> Iterator[Expr]:
    yield e
    for attr in ("base", "arg", "left", "right"):
        sub = getattr(e, attr, None)
        if isinstance(sub, Expr):
            yield from _iter_subexprs(sub)
    for _, sub in getattr(e, "entries", ()):
        yield from _iter_subexprs(sub)


def class_effects(decl: ClassDecl) -> set[str]:
    """Context classes this class can reach: its ownership constraints."""
    out = {cls for _, cls in decl.ref_fields}
    for m in decl.methods:
        for p in m.params:
            if p.class_name:
                out.add(p.class_name)
        for s in iter_stmts(m.body):
            if isinstance(s, ForChildren):
                out.add(s.class_name)
            for e in _iter_exprs_of(s):
                if isinstance(e, Children):
                    out.add(e.class_name)
    return out


def check_class_dag(program: Program) -> CheckResult:
    """Accept iff the class ownership constraints are acyclic modulo self-loops."""
    constraints = {decl.name: class_effects(decl) for decl in program.classes}
    cycle = find_class_cycle(constraints)
    if cycle is None:
        return CheckResult(True, [])
    lines = {decl.name: decl.line for decl in program.classes}
    at = cycle[0]
    diag = Diagnostic(program.source_name, lines.get(at, 0), 1,
                      "ownership cycle between classes: " + " -> ".join(cycle + [at]))
    return CheckResult(False, [diag], cycle)


def _target_class(program: Program, decl: ClassDecl, method: MethodDef,
                  target: Expr, loop_classes: dict[str, str]) -> Optional[str]:
    """Static class of a call target expression, when inferable."""
    if isinstance(target, SelfRef):
        return decl.name
    if isinstance(target, Var):
        if target.name in loop_classes:
            return loop_classes[target.name]
        for p in method.params:
            if p.name == target.name:
                return p.class_name
        return None
    from .lang import OwnField
    if isinstance(target, OwnField):
        for fname, cls in decl.ref_fields:
            if fname == target.name:
                return cls
    return None


def _walk_calls(decl: ClassDecl, method: MethodDef):
    """Yield (stmt, loop_classes) for every call site, tracking loop vars."""

    def walk(s: Stmt, loops: dict[str, str]):
        if isinstance(s, Seq):
            yield from walk(s.first, loops)
            yield from walk(s.rest, loops)
        elif isinstance(s, If):
            yield from walk(s.then, loops)
            yield from walk(s.orelse, loops)
        elif isinstance(s, Repeat):
            yield from walk(s.body, loops)
        elif isinstance(s, ForChildren):
            yield from walk(s.body, {**loops, s.var: s.class_name})
        elif isinstance(s, (SyncCall, AsyncCall, EventCall)):
            yield s, loops

    yield from walk(method.body, {})


def check_readonly(program: Program) -> CheckResult:
    """Reject every ro method that writes state or calls a non-ro method."""
    diags: list[Diagnostic] = []
    src = program.source_name
    for decl in program.classes:
        for m in decl.methods:
            if not m.readonly:
                continue
            for s in iter_stmts(m.body):
                if isinstance(s, (OwnFieldSet, RecordSet)):
                    diags.append(Diagnostic(src, m.line, 1,
                                 f"ro method {decl.name}.{m.name} writes a field"))
                elif isinstance(s, (AddOwnership, RemoveOwnership)):
                    diags.append(Diagnostic(src, m.line, 1,
                                 f"ro method {decl.name}.{m.name} modifies ownership"))
            for call, loops in _walk_calls(decl, m):
                if isinstance(call, EventCall):
                    continue  # nested events run after commit, outside this event
                cls = _target_class(program, decl, m, call.target, loops)
                callee = program.method_def(cls, call.method) if cls else None
                if callee is not None and not callee.readonly:
                    diags.append(Diagnostic(src, m.line, 1,
                                 f"ro method {decl.name}.{m.name} calls "
                                 f"ex method {cls}.{call.method}"))
    return CheckResult(not diags, diags)


def check_wellformed(program: Program) -> CheckResult:
    """Structural checks: resolvable calls, void async targets, known classes."""
    diags: list[Diagnostic] = []
    src = program.source_name
    class_names = {d.name for d in program.classes}

    def returns_value(md: MethodDef) -> bool:
        return any(isinstance(s, Return) and not _is_unit_return(s)
                   for s in iter_stmts(md.body))

    def _is_unit_return(s: Return) -> bool:
        from .lang import Lit
        return isinstance(s.expr, Lit) and s.expr.value is None

    for decl in program.classes:
        for _, cls in decl.ref_fields:
            if cls not in class_names:
                diags.append(Diagnostic(src, decl.line, 1,
                             f"class {decl.name} references unknown class {cls}"))
        for m in decl.methods:
            for p in m.params:
                if p.class_name and p.class_name not in class_names:
                    diags.append(Diagnostic(src, m.line, 1,
                                 f"{decl.name}.{m.name}: unknown class {p.class_name}"))
            for s in iter_stmts(m.body):
                if isinstance(s, (AssignWaiting, EmitMark)):
                    diags.append(Diagnostic(src, m.line, 1,
                                 f"{decl.name}.{m.name}: runtime command in source"))
                if isinstance(s, ForChildren) and s.class_name not in class_names:
                    diags.append(Diagnostic(src, m.line, 1,
                                 f"{decl.name}.{m.name}: unknown class {s.class_name}"))
            for call, loops in _walk_calls(decl, m):
                cls = _target_class(program, decl, m, call.target, loops)
                if cls is None:
                    diags.append(Diagnostic(src, m.line, 1,
                                 f"{decl.name}.{m.name}: cannot infer the class of a "
                                 f"call target (annotate the parameter)"))
                    continue
                callee = program.method_def(cls, call.method)
                if callee is None:
                    diags.append(Diagnostic(src, m.line, 1,
                                 f"{decl.name}.{m.name}: no method {call.method} "
                                 f"on class {cls}"))
                elif isinstance(call, AsyncCall) and returns_value(callee):
                    diags.append(Diagnostic(src, m.line, 1,
                                 f"{decl.name}.{m.name}: async call to value-returning "
                                 f"method {cls}.{call.method}"))

    # graph spec sanity
    node_classes = dict(program.graph.nodes)
    for nid, cls in program.graph.nodes:
        if cls not in class_names:
            diags.append(Diagnostic(src, 0, 0, f"node {nid}: unknown class {cls}"))
    effects_by_class = {d.name: class_effects(d) for d in program.classes}
    for parent, child in program.graph.edges:
        bad = False
        for end in (parent, child):
            if end not in node_classes:
                diags.append(Diagnostic(src, 0, 0, f"edge references unknown node {end}"))
                bad = True
        if bad:
            continue
        pcls, ccls = node_classes[parent], node_classes[child]
        if ccls not in effects_by_class.get(pcls, set()):
            diags.append(Diagnostic(src, 0, 0,
                         f"edge {parent} -> {child}: class {pcls} does not "
                         f"declare ownership of {ccls}"))
    for owner, fieldname, target in program.graph.binds:
        if owner not in node_classes or target not in node_classes:
            diags.append(Diagnostic(src, 0, 0,
                         f"set {owner}.{fieldname}: unknown node"))
            continue
        decl = program.class_decl(node_classes[owner])
        refs = dict(decl.ref_fields) if decl else {}
        if fieldname not in refs:
            diags.append(Diagnostic(src, 0, 0,
                         f"set {owner}.{fieldname}: no such ref field"))
        elif node_classes[target] != refs[fieldname]:
            diags.append(Diagnostic(src, 0, 0,
                         f"set {owner}.{fieldname}: expects class {refs[fieldname]}"))
    for ev in program.script:
        if ev.target not in node_classes:
            diags.append(Diagnostic(src, ev.line, 1, f"event targets unknown node {ev.target}"))
        elif program.method_def(node_classes[ev.target], ev.method) is None:
            diags.append(Diagnostic(src, ev.line, 1,
                         f"event targets unknown method {ev.target}.{ev.method}"))
    return CheckResult(not diags, diags)


def check_program(program: Program) -> CheckResult:
    """All static checks a program must pass before execution."""
    parts = [check_wellformed(program), check_class_dag(program), check_readonly(program)]
    diags = [d for p in parts for d in p.diagnostics]
    cycle = next((p.cycle for p in parts if p.cycle), None)
    return CheckResult(not diags, diags, cycle)
