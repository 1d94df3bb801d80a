"""Recursive-descent parser for `.aeon` scenario files.

Surface grammar (semicolon-terminated statements, C-like expressions):

    class Room {
      field lights = 0;
      ref door: Door;
      ro method nr_players() { return size(children[Player]); }
      method set_lights(n) { this.lights = n; }
    }
    main {
      graph {
        node castle: Building;
        edge castle -> kings_room;
        set player1.treasure = treasure;
      }
      event player1.get_gold(50) @tick=1;
    }

Method calls are statements, never subexpressions; calls written inside an
expression are hoisted into fresh temporaries during parsing so that every
call sits alone on the right-hand side of an assignment.
"""

from __future__ import annotations

from typing import Optional

from .lang import (AddOwnership, Assign, AsyncCall, Binary, Children, ClassDecl,
                   Diagnostic, EventCall, EventSpec, Expr, ForChildren, GraphSpec,
                   If, Lit, MethodDef, OwnField, OwnFieldSet, Param, Program, Record,
                   RecordField, RecordLit, RecordSet, RemoveOwnership, Repeat,
                   Return, SelfRef, Seq, Size, Skip, Stmt, SyncCall, SyntaxErr,
                   Unary, Value, Var, seq)

KEYWORDS = {
    "class", "field", "ref", "method", "ro", "main", "graph", "node", "edge",
    "set", "event", "async", "var", "return", "if", "else", "repeat", "for",
    "in", "children", "size", "skip", "add_ownership", "remove_ownership",
    "this", "true", "false", "unit",
}

PUNCT = ["->", "&&", "||", "==", "!=", "<=", ">=", "@", "{", "}", "(", ")",
         "[", "]", ",", ";", ":", ".", "=", "<", ">", "+", "-", "*", "/",
         "%", "!"]


class Token:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind: str, text: str, line: int, col: int):
        self.kind = kind   # 'name' | 'int' | 'punct' | 'eof'
        self.text = text
        self.line = line
        self.col = col

    def __repr__(self) -> str:
        return f"Token({self.kind},{self.text!r}@{self.line}:{self.col})"


def tokenize(text: str, source: str) -> list[Token]:
    toks: list[Token] = []
    i, line, col = 0, 1, 1
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            toks.append(Token("int", text[i:j], line, col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            toks.append(Token("name", text[i:j], line, col))
            col += j - i
            i = j
            continue
        for p in PUNCT:
            if text.startswith(p, i):
                toks.append(Token("punct", p, line, col))
                i += len(p)
                col += len(p)
                break
        else:
            raise SyntaxErr(Diagnostic(source, line, col, f"unexpected character {ch!r}"))
    toks.append(Token("eof", "", line, col))
    return toks


class Parser:
    def __init__(self, text: str, source: str):
        self.source = source
        self.toks = tokenize(text, source)
        self.pos = 0
        self._tmp = 0

    # -- token helpers -------------------------------------------------

    def peek(self) -> Token:
        return self.toks[self.pos]

    def next(self) -> Token:
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def at(self, kind: str, text: Optional[str] = None) -> bool:
        t = self.peek()
        return t.kind == kind and (text is None or t.text == text)

    def at_name(self, text: str) -> bool:
        return self.at("name", text)

    def fail(self, expected: str) -> "SyntaxErr":
        t = self.peek()
        got = "end of file" if t.kind == "eof" else repr(t.text)
        return SyntaxErr(Diagnostic(self.source, t.line, t.col,
                                    f"expected {expected}, got {got}"))

    def expect(self, kind: str, text: Optional[str] = None) -> Token:
        if not self.at(kind, text):
            raise self.fail(text if text is not None else kind)
        return self.next()

    def expect_name(self) -> Token:
        t = self.peek()
        if t.kind != "name" or t.text in KEYWORDS:
            raise self.fail("identifier")
        return self.next()

    def fresh_tmp(self) -> str:
        self._tmp += 1
        return f"%t{self._tmp}"

    # -- program -------------------------------------------------------

    def parse_program(self) -> Program:
        classes: list[ClassDecl] = []
        graph = GraphSpec((), (), ())
        script: tuple[EventSpec, ...] = ()
        saw_main = False
        while not self.at("eof"):
            if self.at_name("class"):
                classes.append(self.parse_class())
            elif self.at_name("main"):
                if saw_main:
                    raise self.fail("at most one main block")
                saw_main = True
                graph, script = self.parse_main()
            else:
                raise self.fail("'class' or 'main'")
        return Program(tuple(classes), graph, script, self.source)

    def parse_class(self) -> ClassDecl:
        line = self.peek().line
        self.expect("name", "class")
        name = self.expect_name().text
        self.expect("punct", "{")
        data_fields: list[tuple[str, Value]] = []
        ref_fields: list[tuple[str, str]] = []
        methods: list[MethodDef] = []
        while not self.at("punct", "}"):
            if self.at_name("field"):
                self.next()
                fname = self.expect_name().text
                default: Value = 0
                if self.at("punct", "="):
                    self.next()
                    default = self.parse_literal()
                self.expect("punct", ";")
                data_fields.append((fname, default))
            elif self.at_name("ref"):
                self.next()
                fname = self.expect_name().text
                self.expect("punct", ":")
                cls = self.expect_name().text
                self.expect("punct", ";")
                ref_fields.append((fname, cls))
            elif self.at_name("ro") or self.at_name("method"):
                methods.append(self.parse_method())
            else:
                raise self.fail("'field', 'ref', 'method' or '}'")
        self.expect("punct", "}")
        return ClassDecl(name, tuple(data_fields), tuple(ref_fields),
                         tuple(methods), line)

    def parse_method(self) -> MethodDef:
        line = self.peek().line
        readonly = False
        if self.at_name("ro"):
            readonly = True
            self.next()
        self.expect("name", "method")
        name = self.expect_name().text
        self.expect("punct", "(")
        params: list[Param] = []
        while not self.at("punct", ")"):
            pname = self.expect_name().text
            cls = None
            if self.at("punct", ":"):
                self.next()
                cls = self.expect_name().text
            params.append(Param(pname, cls))
            if not self.at("punct", ")"):
                self.expect("punct", ",")
        self.expect("punct", ")")
        body = self.parse_block()
        # Every body ends in an explicit return so activations always
        # terminate with a return label.
        body = seq(body, Return(Lit(None)))
        return MethodDef(name, tuple(params), readonly, body, line)

    def parse_literal(self) -> Value:
        t = self.peek()
        if t.kind == "int":
            self.next()
            return int(t.text)
        if self.at("punct", "-"):
            self.next()
            t2 = self.expect("int")
            return -int(t2.text)
        if self.at_name("true"):
            self.next()
            return True
        if self.at_name("false"):
            self.next()
            return False
        if self.at_name("unit"):
            self.next()
            return None
        if self.at("punct", "{"):
            self.next()
            entries: dict[str, Value] = {}
            while not self.at("punct", "}"):
                k = self.expect_name().text
                self.expect("punct", ":")
                entries[k] = self.parse_literal()
                if not self.at("punct", "}"):
                    self.expect("punct", ",")
            self.expect("punct", "}")
            return Record.of(entries)
        raise self.fail("literal")

    # -- main block ------------------------------------------------------

    def parse_main(self) -> tuple[GraphSpec, tuple[EventSpec, ...]]:
        self.expect("name", "main")
        self.expect("punct", "{")
        nodes: list[tuple[str, str]] = []
        edges: list[tuple[str, str]] = []
        binds: list[tuple[str, str, str]] = []
        events: list[EventSpec] = []
        while not self.at("punct", "}"):
            if self.at_name("graph"):
                self.next()
                self.expect("punct", "{")
                while not self.at("punct", "}"):
                    if self.at_name("node"):
                        self.next()
                        nid = self.expect_name().text
                        self.expect("punct", ":")
                        cls = self.expect_name().text
                        self.expect("punct", ";")
                        nodes.append((nid, cls))
                    elif self.at_name("edge"):
                        self.next()
                        parent = self.expect_name().text
                        self.expect("punct", "->")
                        child = self.expect_name().text
                        self.expect("punct", ";")
                        edges.append((parent, child))
                    elif self.at_name("set"):
                        self.next()
                        owner = self.expect_name().text
                        self.expect("punct", ".")
                        fieldname = self.expect_name().text
                        self.expect("punct", "=")
                        target = self.expect_name().text
                        self.expect("punct", ";")
                        binds.append((owner, fieldname, target))
                    else:
                        raise self.fail("'node', 'edge', 'set' or '}'")
                self.expect("punct", "}")
            elif self.at_name("event"):
                line = self.peek().line
                self.next()
                target = self.expect_name().text
                self.expect("punct", ".")
                method = self.expect_name().text
                self.expect("punct", "(")
                args: list[Value] = []
                while not self.at("punct", ")"):
                    args.append(self.parse_literal())
                    if not self.at("punct", ")"):
                        self.expect("punct", ",")
                self.expect("punct", ")")
                tick = len(events)
                if self.at("punct", "@"):
                    self.next()
                    self.expect("name", "tick")
                    self.expect("punct", "=")
                    tick = int(self.expect("int").text)
                self.expect("punct", ";")
                events.append(EventSpec(target, method, tuple(args), tick, line))
            else:
                raise self.fail("'graph', 'event' or '}'")
        self.expect("punct", "}")
        events.sort(key=lambda e: e.tick)
        return GraphSpec(tuple(nodes), tuple(edges), tuple(binds)), tuple(events)

    # -- statements ------------------------------------------------------

    def parse_block(self) -> Stmt:
        self.expect("punct", "{")
        stmts: list[Stmt] = []
        while not self.at("punct", "}"):
            stmts.append(self.parse_stmt())
        self.expect("punct", "}")
        return seq(*stmts) if stmts else Skip()

    def parse_stmt(self) -> Stmt:
        t = self.peek()
        if t.kind == "name":
            handler = getattr(self, f"_stmt_{t.text}", None)
            if t.text in KEYWORDS and handler is not None:
                return handler()
        return self._stmt_assign_or_call()

    def _stmt_skip(self) -> Stmt:
        self.next()
        self.expect("punct", ";")
        return Skip()

    def _stmt_var(self) -> Stmt:
        self.next()
        name = self.expect_name().text
        self.expect("punct", "=")
        return self._finish_assignment(name)

    def _stmt_return(self) -> Stmt:
        self.next()
        if self.at("punct", ";"):
            self.next()
            return Return(Lit(None))
        pre, e = self.parse_expr_anf()
        self.expect("punct", ";")
        return seq(*pre, Return(e)) if pre else Return(e)

    def _stmt_if(self) -> Stmt:
        self.next()
        self.expect("punct", "(")
        pre, cond = self.parse_expr_anf()
        self.expect("punct", ")")
        then = self.parse_block()
        orelse: Stmt = Skip()
        if self.at_name("else"):
            self.next()
            orelse = self.parse_block()
        out: Stmt = If(cond, then, orelse)
        return seq(*pre, out) if pre else out

    def _stmt_repeat(self) -> Stmt:
        self.next()
        self.expect("punct", "(")
        pre, count = self.parse_expr_anf()
        self.expect("punct", ")")
        body = self.parse_block()
        out: Stmt = Repeat(count, body)
        return seq(*pre, out) if pre else out

    def _stmt_for(self) -> Stmt:
        self.next()
        var = self.expect_name().text
        self.expect("name", "in")
        self.expect("name", "children")
        self.expect("punct", "[")
        cls = self.expect_name().text
        self.expect("punct", "]")
        body = self.parse_block()
        return ForChildren(var, cls, body)

    def _stmt_async(self) -> Stmt:
        self.next()
        target, method, args, pre = self.parse_call_head()
        self.expect("punct", ";")
        return seq(*pre, AsyncCall(target, method, args))

    def _stmt_event(self) -> Stmt:
        self.next()
        target, method, args, pre = self.parse_call_head()
        self.expect("punct", ";")
        return seq(*pre, EventCall(target, method, args))

    def _stmt_add_ownership(self) -> Stmt:
        self.next()
        self.expect("punct", "(")
        pre1, parent = self.parse_expr_anf()
        self.expect("punct", ",")
        pre2, child = self.parse_expr_anf()
        self.expect("punct", ")")
        self.expect("punct", ";")
        return seq(*pre1, *pre2, AddOwnership(parent, child))

    def _stmt_remove_ownership(self) -> Stmt:
        self.next()
        self.expect("punct", "(")
        pre1, parent = self.parse_expr_anf()
        self.expect("punct", ",")
        pre2, child = self.parse_expr_anf()
        self.expect("punct", ")")
        self.expect("punct", ";")
        return seq(*pre1, *pre2, RemoveOwnership(parent, child))

    def _stmt_this(self) -> Stmt:
        # `this.f = e;`  or a call `this.m(...)` handled as assignment/call
        save = self.pos
        self.next()
        if self.at("punct", "."):
            self.next()
            name = self.expect_name().text
            if self.at("punct", "="):
                self.next()
                pre, e = self.parse_expr_anf()
                self.expect("punct", ";")
                return seq(*pre, OwnFieldSet(name, e))
        self.pos = save
        return self._stmt_assign_or_call()

    def _stmt_assign_or_call(self) -> Stmt:
        # Forms: `x = ...;` | `x.f = ...;` | `target.m(args);`
        save = self.pos
        if self.peek().kind == "name" and self.peek().text not in KEYWORDS:
            name = self.next().text
            if self.at("punct", "="):
                self.next()
                return self._finish_assignment(name)
            if self.at("punct", "."):
                self.next()
                fieldname = self.expect_name().text
                if self.at("punct", "="):
                    self.next()
                    pre, e = self.parse_expr_anf()
                    self.expect("punct", ";")
                    return seq(*pre, RecordSet(name, fieldname, e))
            self.pos = save
        # Bare call statement: sync call with discarded result.
        target, method, args, pre = self.parse_call_head()
        self.expect("punct", ";")
        return seq(*pre, SyncCall("_", target, method, args))

    def _finish_assignment(self, var: str) -> Stmt:
        pre, rhs, call = self.parse_rhs()
        self.expect("punct", ";")
        if call is not None:
            target, method, args = call
            return seq(*pre, SyncCall(var, target, method, args))
        assert rhs is not None
        return seq(*pre, Assign(var, rhs)) if pre else Assign(var, rhs)

    def parse_rhs(self):
        """RHS of an assignment: either a plain expression or a top-level call."""
        pre, e, call = self._expr_or_call(self._prec_levels)
        return pre, e, call

    def parse_call_head(self):
        pre, e, call = self._expr_or_call(self._prec_levels, require_call=True)
        if call is None:
            raise self.fail("method call")
        return call[0], call[1], call[2], pre

    # -- expressions -------------------------------------------------------
    #
    # parse_expr_anf returns (prelude_stmts, expr): any call encountered is
    # replaced by a fresh temporary and a SyncCall statement in the prelude.

    _prec_levels = [["||"], ["&&"], ["==", "!="], ["<", "<=", ">", ">="],
                    ["+", "-"], ["*", "/", "%"]]

    def parse_expr_anf(self) -> tuple[list[Stmt], Expr]:
        pre, e, call = self._expr_or_call(self._prec_levels)
        if call is not None:
            target, method, args = call
            tmp = self.fresh_tmp()
            pre = pre + [SyncCall(tmp, target, method, args)]
            e = Var(tmp)
        assert e is not None
        return pre, e

    def _expr_or_call(self, levels, require_call: bool = False):
        """Parse one expression level; a call at top level is kept symbolic."""
        if not levels:
            return self._unary_or_call(require_call)
        ops = levels[0]
        pre, left, call = self._expr_or_call(levels[1:], require_call)
        while self.at("punct") and self.peek().text in ops:
            op = self.next().text
            if call is not None:
                tmp = self.fresh_tmp()
                pre = pre + [SyncCall(tmp, *call)]
                left, call = Var(tmp), None
            pre2, right = self._anf_level(levels[1:])
            pre += pre2
            left = Binary(op, left, right)
        return pre, left, call

    def _anf_level(self, levels) -> tuple[list[Stmt], Expr]:
        pre, e, call = self._expr_or_call(levels)
        if call is not None:
            tmp = self.fresh_tmp()
            pre = pre + [SyncCall(tmp, *call)]
            e = Var(tmp)
        assert e is not None
        return pre, e

    def _unary_or_call(self, require_call: bool):
        if self.at("punct", "!") or self.at("punct", "-"):
            op = self.next().text
            pre, arg = self._anf_unary()
            return pre, Unary(op, arg), None
        return self._postfix_or_call(require_call)

    def _anf_unary(self) -> tuple[list[Stmt], Expr]:
        pre, e, call = self._unary_or_call(False)
        if call is not None:
            tmp = self.fresh_tmp()
            pre = pre + [SyncCall(tmp, *call)]
            e = Var(tmp)
        return pre, e

    def _postfix_or_call(self, require_call: bool):
        pre: list[Stmt] = []
        base = self._primary(pre)
        call = None
        while True:
            if self.at("punct", "."):
                save = self.pos
                self.next()
                name = self.expect_name().text
                if self.at("punct", "("):
                    if call is not None:
                        tmp = self.fresh_tmp()
                        pre.append(SyncCall(tmp, *call))
                        base = Var(tmp)
                    self.next()
                    args: list[Expr] = []
                    while not self.at("punct", ")"):
                        p2, a = self.parse_expr_anf()
                        pre += p2
                        args.append(a)
                        if not self.at("punct", ")"):
                            self.expect("punct", ",")
                    self.expect("punct", ")")
                    call = (base, name, tuple(args))
                    base = None
                    continue
                if self.at("punct", "=") or call is not None:
                    # leave `x.f =` for statement handling
                    self.pos = save
                    break
                if isinstance(base, SelfRef):
                    base = OwnField(name)
                else:
                    base = RecordField(base, name)
                continue
            break
        if require_call and call is None:
            raise self.fail("method call")
        return pre, base, call

    def _primary(self, pre: list[Stmt]) -> Expr:
        t = self.peek()
        if t.kind == "int":
            self.next()
            return Lit(int(t.text))
        if self.at_name("true"):
            self.next()
            return Lit(True)
        if self.at_name("false"):
            self.next()
            return Lit(False)
        if self.at_name("unit"):
            self.next()
            return Lit(None)
        if self.at_name("this"):
            self.next()
            return SelfRef()
        if self.at_name("children"):
            self.next()
            self.expect("punct", "[")
            cls = self.expect_name().text
            self.expect("punct", "]")
            return Children(cls)
        if self.at_name("size"):
            self.next()
            self.expect("punct", "(")
            p2, arg = self.parse_expr_anf()
            pre += p2
            self.expect("punct", ")")
            return Size(arg)
        if self.at("punct", "("):
            self.next()
            p2, e = self.parse_expr_anf()
            pre += p2
            self.expect("punct", ")")
            return e
        if self.at("punct", "{"):
            self.next()
            entries: list[tuple[str, Expr]] = []
            while not self.at("punct", "}"):
                k = self.expect_name().text
                self.expect("punct", ":")
                p2, v = self.parse_expr_anf()
                pre += p2
                entries.append((k, v))
                if not self.at("punct", "}"):
                    self.expect("punct", ",")
            self.expect("punct", "}")
            return RecordLit(tuple(entries))
        if t.kind == "name" and t.text not in KEYWORDS:
            self.next()
            return Var(t.text)
        raise self.fail("expression")


def parse_program(text: str, source: str = "<memory>") -> Program:
    """Parse scenario text; raises SyntaxErr with a located diagnostic."""
    return Parser(text, source).parse_program()
