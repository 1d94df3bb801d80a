"""AST and value model for the scenario language.

Statements are kept in administrative normal form: calls never nest inside
expressions, the parser hoists them into fresh temporaries.  All nodes are
frozen, so residual statement trees can be shared freely between machine
snapshots and used as dict keys.

Values are 64-bit signed ints, bools, unit (None), context references
(plain id strings), records, and immutable lists (children snapshots).
Records are immutable; "mutating" a record field rebinds the variable to an
updated copy, which makes the pass-by-value deep-copy convention automatic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

INT_MIN = -(2**63)
INT_MAX = 2**63 - 1


@dataclass(frozen=True)
class Record:
    """Immutable field map; entries kept sorted by name."""
    entries: tuple[tuple[str, "Value"], ...]

    @classmethod
    def of(cls, mapping: dict[str, "Value"]) -> "Record":
        return cls(tuple(sorted(mapping.items())))

    def has(self, name: str) -> bool:
        return any(k == name for k, _ in self.entries)

    def get(self, name: str) -> "Value":
        for k, v in self.entries:
            if k == name:
                return v
        raise KeyError(name)

    def set(self, name: str, value: "Value") -> "Record":
        items = dict(self.entries)
        items[name] = value
        return Record.of(items)

    def fresh_copy(self) -> "Record":
        """New instance tree with equal content (call-boundary copy)."""
        return Record(tuple((k, v.fresh_copy() if isinstance(v, Record) else v)
                            for k, v in self.entries))

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v!r}" for k, v in self.entries)
        return "{" + inner + "}"


Value = Union[int, bool, None, str, Record, tuple]


def copy_value(v: Value) -> Value:
    return v.fresh_copy() if isinstance(v, Record) else v


def value_repr(v: Value) -> str:
    if v is None:
        return "unit"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return "[" + ", ".join(value_repr(x) for x in v) + "]"
    return repr(v) if isinstance(v, str) else str(v)


# --------------------------------------------------------------------------
# Expressions
# --------------------------------------------------------------------------

class Expr:
    __slots__ = ()


@dataclass(frozen=True)
class Lit(Expr):
    value: Value


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class SelfRef(Expr):
    """`this`: the executing context's id."""


@dataclass(frozen=True)
class OwnField(Expr):
    """`this.f`: read the executing context's own field (data or ref)."""
    name: str


@dataclass(frozen=True)
class RecordField(Expr):
    base: Expr
    name: str


@dataclass(frozen=True)
class RecordLit(Expr):
    entries: tuple[tuple[str, Expr], ...]


@dataclass(frozen=True)
class Children(Expr):
    """`children[Class]`: sorted snapshot of same-class child ids."""
    class_name: str


@dataclass(frozen=True)
class Size(Expr):
    arg: Expr


@dataclass(frozen=True)
class Unary(Expr):
    op: str  # '-' | '!'
    arg: Expr


@dataclass(frozen=True)
class Binary(Expr):
    op: str  # + - * / % == != < <= > >= && ||
    left: Expr
    right: Expr


# --------------------------------------------------------------------------
# Statements
# --------------------------------------------------------------------------

class Stmt:
    __slots__ = ()


@dataclass(frozen=True)
class Skip(Stmt):
    pass


@dataclass(frozen=True)
class Seq(Stmt):
    first: Stmt
    rest: Stmt


@dataclass(frozen=True)
class Assign(Stmt):
    var: str
    expr: Expr


@dataclass(frozen=True)
class OwnFieldSet(Stmt):
    """`this.f = e`: store write; exclusive access only."""
    name: str
    expr: Expr


@dataclass(frozen=True)
class RecordSet(Stmt):
    """`x.f = e` on a record-valued local; counts as a field write."""
    var: str
    name: str
    expr: Expr


@dataclass(frozen=True)
class SyncCall(Stmt):
    """`y = target.m(args)`; result bound to `var` ('_' discards)."""
    var: str
    target: Expr
    method: str
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class AsyncCall(Stmt):
    target: Expr
    method: str
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class EventCall(Stmt):
    """Nested event dispatch; runs after the creating event commits."""
    target: Expr
    method: str
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class Return(Stmt):
    expr: Expr


@dataclass(frozen=True)
class If(Stmt):
    cond: Expr
    then: Stmt
    orelse: Stmt


@dataclass(frozen=True)
class Repeat(Stmt):
    """Bounded loop; count evaluated once at entry."""
    count: Expr
    body: Stmt


@dataclass(frozen=True)
class ForChildren(Stmt):
    var: str
    class_name: str
    body: Stmt


@dataclass(frozen=True)
class AddOwnership(Stmt):
    parent: Expr
    child: Expr


@dataclass(frozen=True)
class RemoveOwnership(Stmt):
    parent: Expr
    child: Expr


# Runtime-only forms: never produced by the parser.

@dataclass(frozen=True)
class AssignWaiting(Stmt):
    """`y := waiting(ctx)` — blocks until the callee's return fills it in."""
    var: str
    ctx: str


@dataclass(frozen=True)
class EmitMark(Stmt):
    """`emit` — cleared by the engine once the request has been queued."""


def seq(*stmts: Stmt) -> Stmt:
    """Right-nested sequence; drops nothing, empty input is skip."""
    if not stmts:
        return Skip()
    out = stmts[-1]
    for s in reversed(stmts[:-1]):
        out = Seq(s, out)
    return out


def stmt_contains_waiting(s: Stmt, ctx: Optional[str] = None) -> int:
    """Number of waiting placeholders (for ctx, or any) inside a statement."""
    if isinstance(s, AssignWaiting):
        return 1 if ctx is None or s.ctx == ctx else 0
    if isinstance(s, Seq):
        return stmt_contains_waiting(s.first, ctx) + stmt_contains_waiting(s.rest, ctx)
    if isinstance(s, If):
        return stmt_contains_waiting(s.then, ctx) + stmt_contains_waiting(s.orelse, ctx)
    if isinstance(s, (Repeat, ForChildren)):
        return stmt_contains_waiting(s.body, ctx)
    return 0


# --------------------------------------------------------------------------
# Declarations
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Param:
    name: str
    class_name: Optional[str] = None  # set when the parameter carries contexts


@dataclass(frozen=True)
class MethodDef:
    name: str
    params: tuple[Param, ...]
    readonly: bool
    body: Stmt
    line: int = 0

    @property
    def access_mode(self) -> str:
        return "ro" if self.readonly else "ex"


@dataclass(frozen=True)
class ClassDecl:
    name: str
    data_fields: tuple[tuple[str, Value], ...]   # name -> default value
    ref_fields: tuple[tuple[str, str], ...]      # name -> context class
    methods: tuple[MethodDef, ...]
    line: int = 0

    def method(self, name: str) -> Optional[MethodDef]:
        for m in self.methods:
            if m.name == name:
                return m
        return None


@dataclass(frozen=True)
class GraphSpec:
    nodes: tuple[tuple[str, str], ...]           # (ctx id, class name)
    edges: tuple[tuple[str, str], ...]           # (parent, child)
    binds: tuple[tuple[str, str, str], ...]      # (ctx id, ref field, target id)


@dataclass(frozen=True)
class EventSpec:
    target: str
    method: str
    args: tuple[Value, ...]
    tick: int
    line: int = 0


@dataclass(frozen=True)
class Program:
    classes: tuple[ClassDecl, ...]
    graph: GraphSpec = GraphSpec((), (), ())
    script: tuple[EventSpec, ...] = ()
    source_name: str = "<memory>"

    def class_decl(self, name: str) -> Optional[ClassDecl]:
        for c in self.classes:
            if c.name == name:
                return c
        return None

    def method_def(self, class_name: str, method: str) -> Optional[MethodDef]:
        decl = self.class_decl(class_name)
        return decl.method(method) if decl else None


@dataclass(frozen=True)
class Diagnostic:
    """A located problem found by parsing or static checking."""
    source: str
    line: int
    col: int
    message: str

    def __str__(self) -> str:
        return f"{self.source}:{self.line}:{self.col}: {self.message}"


class LangError(Exception):
    pass


class SyntaxErr(LangError):
    def __init__(self, diag: Diagnostic):
        super().__init__(str(diag))
        self.diag = diag
