"""Ownership DAG over context instances.

The graph stores directly-owned edges between contexts and keeps a cache of
each node's dominator: the least upper bound of the node together with every
context it shares descendants with.  Conflicting work on shared state is
serialized at that node, so the cache must stay exact across mutations.

Graphs are value-like: mutating operations return a new graph and never touch
the receiver.  All mutation happens on a single engine thread; snapshots may
be read concurrently from exploration workers.
"""

from __future__ import annotations

import json
from typing import Iterable, Iterator, Optional

ContextId = str

VIRTUAL_PREFIX = "~"

# Above this many dominator-affected nodes a mutation just recomputes the
# whole cache instead of chasing the affected set.
FULL_RECOMPUTE_THRESHOLD = 256


class GraphError(Exception):
    pass


class UnknownContextError(GraphError):
    def __init__(self, ctx: ContextId):
        super().__init__(f"unknown context: {ctx!r}")
        self.ctx = ctx


class CycleError(GraphError):
    def __init__(self, parent: ContextId, child: ContextId):
        super().__init__(f"edge {parent!r} -> {child!r} would create a cycle")
        self.parent = parent
        self.child = child


class MissingEdgeError(GraphError):
    def __init__(self, parent: ContextId, child: ContextId):
        super().__init__(f"no edge {parent!r} -> {child!r}")
        self.parent = parent
        self.child = child


def virtual_id(members: Iterable[ContextId]) -> ContextId:
    """Deterministic id for the synthesized ancestor of an unordered node set."""
    return VIRTUAL_PREFIX + "+".join(sorted(members))


class OwnershipGraph:
    """Immutable snapshot of the instance-level ownership DAG."""

    __slots__ = ("_classes", "_children", "_parents", "_virtual", "_dom_cache")

    def __init__(self) -> None:
        self._classes: dict[ContextId, Optional[str]] = {}
        self._children: dict[ContextId, tuple[ContextId, ...]] = {}
        self._parents: dict[ContextId, tuple[ContextId, ...]] = {}
        self._virtual: frozenset[ContextId] = frozenset()
        self._dom_cache: dict[ContextId, ContextId] = {}

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, nodes: Iterable[tuple[ContextId, Optional[str]]],
              edges: Iterable[tuple[ContextId, ContextId]]) -> "OwnershipGraph":
        g = cls()
        for cid, cls_name in nodes:
            g = g.add_node(cid, cls_name)
        for parent, child in edges:
            g = g.add_ownership(parent, child)
        return g

    def _copy(self) -> "OwnershipGraph":
        g = OwnershipGraph.__new__(OwnershipGraph)
        g._classes = dict(self._classes)
        g._children = dict(self._children)
        g._parents = dict(self._parents)
        g._virtual = self._virtual
        g._dom_cache = dict(self._dom_cache)
        return g

    def add_node(self, cid: ContextId, cls_name: Optional[str]) -> "OwnershipGraph":
        if cid in self._classes:
            raise GraphError(f"duplicate context id: {cid!r}")
        g = self._copy()
        g._classes[cid] = cls_name
        g._children[cid] = ()
        g._parents[cid] = ()
        g._dom_cache[cid] = cid
        return g

    # -- basic queries -----------------------------------------------------

    def __contains__(self, cid: ContextId) -> bool:
        return cid in self._classes

    def nodes(self) -> Iterator[ContextId]:
        return iter(sorted(self._classes))

    def real_nodes(self) -> Iterator[ContextId]:
        return (c for c in sorted(self._classes) if c not in self._virtual)

    def class_of(self, cid: ContextId) -> Optional[str]:
        self._require(cid)
        return self._classes[cid]

    @property
    def virtual_nodes(self) -> frozenset[ContextId]:
        return self._virtual

    def edges(self) -> list[tuple[ContextId, ContextId]]:
        return sorted((p, c) for p, kids in self._children.items() for c in kids)

    def _require(self, cid: ContextId) -> None:
        if cid not in self._classes:
            raise UnknownContextError(cid)

    def children(self, cid: ContextId) -> set[ContextId]:
        self._require(cid)
        return set(self._children[cid])

    def children_of_class(self, cid: ContextId, cls_name: str) -> list[ContextId]:
        """Sorted snapshot of cid's direct children of one class."""
        self._require(cid)
        return sorted(c for c in self._children[cid] if self._classes[c] == cls_name)

    def parents(self, cid: ContextId) -> set[ContextId]:
        self._require(cid)
        return set(self._parents[cid])

    def descendants(self, cid: ContextId) -> set[ContextId]:
        """Transitive closure of children; excludes cid itself."""
        self._require(cid)
        seen: set[ContextId] = set()
        stack = list(self._children[cid])
        while stack:
            c = stack.pop()
            if c not in seen:
                seen.add(c)
                stack.extend(self._children[c])
        seen.discard(cid)
        return seen

    def ancestors(self, cid: ContextId) -> set[ContextId]:
        self._require(cid)
        seen: set[ContextId] = set()
        stack = list(self._parents[cid])
        while stack:
            c = stack.pop()
            if c not in seen:
                seen.add(c)
                stack.extend(self._parents[c])
        seen.discard(cid)
        return seen

    def share(self, cid: ContextId) -> set[ContextId]:
        """Contexts that share a descendant with cid.

        Two clauses: owners whose direct children intersect desc(cid), and
        contexts incomparable to cid whose descendant sets intersect.
        """
        self._require(cid)
        desc_c = self.descendants(cid)
        out: set[ContextId] = set()
        for other in self._classes:
            if other == cid:
                continue
            if set(self._children[other]) & desc_c:
                out.add(other)
                continue
            desc_o = self.descendants(other)
            if desc_o & desc_c and other not in desc_c and cid not in desc_o:
                out.add(other)
        return out

    # -- lub / dominator ---------------------------------------------------

    def _minimal_common_ancestors(self, group: set[ContextId]) -> set[ContextId]:
        common: Optional[set[ContextId]] = None
        for x in group:
            up = self.ancestors(x) | {x}
            common = up if common is None else (common & up)
        assert common is not None
        return {u for u in common if not (self.descendants(u) & common)}

    def lub(self, group: Iterable[ContextId]) -> tuple[ContextId, "OwnershipGraph"]:
        """Least upper bound of a nonempty node set.

        Returns the lub node and the (possibly extended) graph: when several
        minimal common ancestors exist, or none at all, a single virtual
        ancestor owning the tied maxima is synthesized, memoized by its
        member set.
        """
        members = set(group)
        if not members:
            raise GraphError("lub of empty set")
        for x in members:
            self._require(x)
        if len(members) == 1:
            return next(iter(members)), self
        minimal = self._minimal_common_ancestors(members)
        if len(minimal) == 1:
            return next(iter(minimal)), self
        if not minimal:
            # No common ancestor: tie the maxima of the input set itself.
            minimal = {x for x in members
                       if not any(x in self.descendants(y) for y in members if y != x)}
        if len(minimal) == 1:
            return next(iter(minimal)), self
        vid = virtual_id(minimal)
        if vid in self._classes:
            return vid, self
        g = self._copy()
        g._classes[vid] = None
        g._children[vid] = tuple(sorted(minimal))
        g._parents[vid] = ()
        g._virtual = g._virtual | {vid}
        g._dom_cache = {}
        for m in sorted(minimal):
            g._parents[m] = tuple(sorted(set(g._parents[m]) | {vid}))
        g = g._saturate()
        return vid, g

    def _compute_dominator(self, cid: ContextId) -> tuple[ContextId, "OwnershipGraph"]:
        dom, g = self.lub(self.share(cid) | {cid})
        return dom, g

    def _saturate(self) -> "OwnershipGraph":
        """Fill the dominator cache, synthesizing virtual lub witnesses as needed."""
        g = self
        while True:
            missing = [c for c in sorted(g._classes) if c not in g._dom_cache]
            if not missing:
                return g
            for cid in missing:
                dom, g2 = g._compute_dominator(cid)
                if g2 is not g:
                    # New virtual node: caches were reset, start over.
                    g = g2
                    break
                g._dom_cache[cid] = dom
            else:
                return g

    def dominator(self, cid: ContextId) -> ContextId:
        self._require(cid)
        dom = self._dom_cache.get(cid)
        if dom is None:
            raise GraphError(f"dominator cache incomplete for {cid!r}; graph not saturated")
        return dom

    def saturated(self) -> "OwnershipGraph":
        """Public entry to complete the dominator cache after bulk construction."""
        return self._saturate()

    def dominator_from_scratch(self, cid: ContextId) -> ContextId:
        """Cache-free recomputation; oracle for cache-consistency checks."""
        dom, _ = self._compute_dominator(cid)
        return dom

    # -- mutation ----------------------------------------------------------

    def _dominator_affected(self, touched: set[ContextId]) -> set[ContextId]:
        closure: set[ContextId] = set()
        for t in touched:
            if t in self._classes:
                closure |= self.ancestors(t) | {t}
        affected = set(closure)
        for cid, dom in self._dom_cache.items():
            if dom in closure:
                affected.add(cid)
        return affected

    def _after_edge_change(self, old: "OwnershipGraph",
                           touched: set[ContextId]) -> "OwnershipGraph":
        affected = self._dominator_affected(touched) | old._dominator_affected(touched)
        if len(affected) > FULL_RECOMPUTE_THRESHOLD:
            self._dom_cache = {}
        else:
            for cid in affected:
                self._dom_cache.pop(cid, None)
        return self._saturate()

    def add_ownership(self, parent: ContextId, child: ContextId) -> "OwnershipGraph":
        """Add a directly-owned edge; rejects anything that would close a cycle."""
        self._require(parent)
        self._require(child)
        if parent == child:
            raise CycleError(parent, child)
        if child in self._children[parent]:
            raise GraphError(f"edge {parent!r} -> {child!r} already present")
        if parent in self.descendants(child):
            raise CycleError(parent, child)
        g = self._copy()
        g._children[parent] = tuple(sorted(set(g._children[parent]) | {child}))
        g._parents[child] = tuple(sorted(set(g._parents[child]) | {parent}))
        return g._after_edge_change(self, {parent, child})

    def remove_ownership(self, parent: ContextId, child: ContextId) -> "OwnershipGraph":
        """Drop an edge. Orphaned nodes stay in the graph."""
        self._require(parent)
        self._require(child)
        if child not in self._children[parent]:
            raise MissingEdgeError(parent, child)
        g = self._copy()
        g._children[parent] = tuple(c for c in g._children[parent] if c != child)
        g._parents[child] = tuple(p for p in g._parents[child] if p != parent)
        return g._after_edge_change(self, {parent, child})

    # -- integrity ---------------------------------------------------------

    def find_cycle(self) -> Optional[list[ContextId]]:
        """DFS cycle search over the instance edges; None on a proper DAG."""
        color: dict[ContextId, int] = {}
        stack: list[ContextId] = []

        def visit(node: ContextId) -> Optional[list[ContextId]]:
            color[node] = 1
            stack.append(node)
            for nxt in self._children[node]:
                st = color.get(nxt, 0)
                if st == 1:
                    return stack[stack.index(nxt):] + [nxt]
                if st == 0:
                    found = visit(nxt)
                    if found:
                        return found
            stack.pop()
            color[node] = 2
            return None

        for n in sorted(self._classes):
            if color.get(n, 0) == 0:
                found = visit(n)
                if found:
                    return found
        return None

    def check_cache(self) -> None:
        """Assert the dominator cache equals from-scratch recomputation."""
        for cid in self._classes:
            fresh = self.dominator_from_scratch(cid)
            cached = self._dom_cache.get(cid)
            if cached != fresh:
                raise AssertionError(
                    f"dominator cache stale for {cid!r}: cached={cached!r} fresh={fresh!r}")

    # -- serialization -----------------------------------------------------

    def dump_records(self) -> list[str]:
        """Line-delimited records: one per node {id, class}, one per edge."""
        lines = []
        for cid in sorted(self._classes):
            if cid in self._virtual:
                continue
            lines.append(json.dumps({"id": cid, "class": self._classes[cid]}))
        for parent, child in self.edges():
            if parent in self._virtual or child in self._virtual:
                continue
            lines.append(json.dumps({"parent": parent, "child": child}))
        return lines

    @classmethod
    def load_records(cls, lines: Iterable[str]) -> "OwnershipGraph":
        nodes: list[tuple[ContextId, Optional[str]]] = []
        edges: list[tuple[ContextId, ContextId]] = []
        for raw in lines:
            raw = raw.strip()
            if not raw:
                continue
            rec = json.loads(raw)
            if "id" in rec:
                nodes.append((rec["id"], rec.get("class")))
            elif "parent" in rec:
                edges.append((rec["parent"], rec["child"]))
            else:
                raise GraphError(f"unrecognized graph record: {raw!r}")
        return cls.build(nodes, edges)

    def canonical_key(self) -> tuple:
        return (tuple(sorted(self._classes.items())), tuple(self.edges()))

    def __repr__(self) -> str:
        return (f"OwnershipGraph({len(self._classes)} nodes, "
                f"{sum(len(v) for v in self._children.values())} edges)")


def find_class_cycle(constraints: dict[str, set[str]]) -> Optional[list[str]]:
    """Cycle in a class-level ownership constraint graph, ignoring self-loops.

    `constraints[owner]` is the set of class names owner may reach. Returns
    one cycle as a class-name list, or None when acyclic modulo reflexivity.
    """
    color: dict[str, int] = {}
    stack: list[str] = []

    def visit(node: str) -> Optional[list[str]]:
        color[node] = 1
        stack.append(node)
        for nxt in sorted(constraints.get(node, ())):
            if nxt == node:
                continue  # reflexive allowance
            st = color.get(nxt, 0)
            if st == 1:
                return stack[stack.index(nxt):]
            if st == 0:
                found = visit(nxt)
                if found:
                    return found
        stack.pop()
        color[node] = 2
        return None

    for name in sorted(constraints):
        if color.get(name, 0) == 0:
            found = visit(name)
            if found:
                return found
    return None
