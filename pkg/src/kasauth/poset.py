"""Finite partially ordered sets of security labels.

A poset is given by its Hasse diagram: a DAG of cover edges (parent, child)
where the parent dominates the child. Reachability along cover edges induces
the order; ``x <= y`` means a directed path runs from y down to x (or x == y).
Standard builders cover chains, powersets, interval posets, and products of
those, plus explicit node/edge posets from policy files.

Posets are immutable after construction and safe to share between threads.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Optional

logger = logging.getLogger(__name__)

POWERSET_CAP = 12
INTERVALS_CAP = 64

# Characters reserved by the label grammar and the wire/log formats.
_POINT_FORBIDDEN = set(" \t\r\n|'[](){},")


class PosetError(ValueError):
    """Malformed label, poset, or policy."""


class UnknownLabelError(PosetError):
    """A label was used with a poset that does not contain it."""


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Label:
    """A security label with a canonical, human-readable identifier.

    Kinds and their rendered ids:
      point      opaque named level            "3", "staff"
      interval   consecutive integer span      "[2,4]"
      set        finite set of integers        "{1,2}"
      pair       product-poset coordinates     "([1,3],2)"
      mirrored   time-release twin             "[2,4]'"

    The id is unique within a poset and stable under re-serialization;
    ``Label.parse`` inverts the rendering.
    """

    id: str
    kind: str
    data: tuple = ()

    @staticmethod
    def point(name: object) -> "Label":
        text = str(name)
        if not text or any(c in _POINT_FORBIDDEN for c in text):
            raise PosetError(f"invalid point label {text!r}")
        return Label(text, "point", (text,))

    @staticmethod
    def interval(lo: int, hi: int) -> "Label":
        if lo > hi:
            raise PosetError(f"interval [{lo},{hi}] has lo > hi")
        return Label(f"[{lo},{hi}]", "interval", (lo, hi))

    @staticmethod
    def subset(elems: Iterable[int]) -> "Label":
        members = tuple(sorted(set(int(e) for e in elems)))
        rendered = "{" + ",".join(str(e) for e in members) + "}"
        return Label(rendered, "set", members)

    @staticmethod
    def pair(left: "Label", right: "Label") -> "Label":
        return Label(f"({left.id},{right.id})", "pair", (left, right))

    @staticmethod
    def mirrored(inner: "Label") -> "Label":
        if inner.kind == "mirrored":
            raise PosetError(f"label {inner.id!r} is already mirrored")
        return Label(inner.id + "'", "mirrored", (inner,))

    @staticmethod
    def parse(text: str) -> "Label":
        t = text.strip()
        if not t:
            raise PosetError("empty label")
        if t.endswith("'"):
            return Label.mirrored(Label.parse(t[:-1]))
        if t.startswith("[") and t.endswith("]"):
            parts = t[1:-1].split(",")
            if len(parts) != 2:
                raise PosetError(f"bad interval label {text!r}")
            try:
                return Label.interval(int(parts[0]), int(parts[1]))
            except ValueError as exc:
                raise PosetError(f"bad interval label {text!r}") from exc
        if t.startswith("{") and t.endswith("}"):
            inner = t[1:-1].strip()
            try:
                elems = [int(p) for p in inner.split(",")] if inner else []
            except ValueError as exc:
                raise PosetError(f"bad set label {text!r}") from exc
            return Label.subset(elems)
        if t.startswith("(") and t.endswith(")"):
            left, right = _split_pair(t[1:-1], text)
            return Label.pair(Label.parse(left), Label.parse(right))
        return Label.point(t)

    @property
    def interval_bounds(self) -> tuple[int, int]:
        if self.kind != "interval":
            raise PosetError(f"label {self.id!r} is not an interval")
        return self.data  # type: ignore[return-value]

    @property
    def inner(self) -> "Label":
        if self.kind != "mirrored":
            raise PosetError(f"label {self.id!r} is not mirrored")
        return self.data[0]

    def __lt__(self, other: "Label") -> bool:
        return self.id < other.id

    def __str__(self) -> str:
        return self.id


def _split_pair(body: str, original: str) -> tuple[str, str]:
    """Split a pair body on its top-level comma."""
    depth = 0
    for i, ch in enumerate(body):
        if ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth -= 1
        elif ch == "," and depth == 0:
            return body[:i], body[i + 1:]
    raise PosetError(f"bad pair label {original!r}")


# ---------------------------------------------------------------------------
# Poset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    kind: str  # "cycle" | "not-reduced" | "duplicate-label"
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[Violation, ...] = ()

    @property
    def first(self) -> Optional[Violation]:
        return self.violations[0] if self.violations else None


class Poset:
    """A finite poset given by its Hasse diagram.

    Cover edges run (parent, child): the parent covers the child. The
    constructor tolerates cyclic or non-reduced edge sets so that
    ``validate`` can report on them; all builders produce valid posets.
    """

    def __init__(self, labels: Iterable[Label], cover_edges: Iterable[tuple[Label, Label]]):
        by_id: dict[str, Label] = {}
        for lab in sorted(set(labels)):
            clash = by_id.get(lab.id)
            if clash is not None and clash != lab:
                raise PosetError(f"conflicting labels share id {lab.id!r}")
            by_id[lab.id] = lab
        edges = sorted(set(cover_edges))
        children: dict[Label, list[Label]] = {lab: [] for lab in by_id.values()}
        parents: dict[Label, list[Label]] = {lab: [] for lab in by_id.values()}
        for parent, child in edges:
            if parent.id not in by_id or child.id not in by_id:
                missing = parent if parent.id not in by_id else child
                raise PosetError(f"cover edge references unknown label {missing.id!r}")
            if parent == child:
                raise PosetError(f"self-loop on label {parent.id!r}")
            children[parent].append(child)
            parents[child].append(parent)
        self._by_id = by_id
        self._edges = tuple(edges)
        self._children = {lab: tuple(kids) for lab, kids in children.items()}
        self._parents = {lab: tuple(ps) for lab, ps in parents.items()}
        self._acyclic, order = self._topological_order()
        self._down = self._down_sets(order) if self._acyclic else None

    # -- construction internals --------------------------------------------

    def _topological_order(self) -> tuple[bool, list[Label]]:
        indeg = {lab: len(self._parents[lab]) for lab in self._by_id.values()}
        queue = deque(sorted(lab for lab, d in indeg.items() if d == 0))
        order: list[Label] = []
        while queue:
            lab = queue.popleft()
            order.append(lab)
            for child in self._children[lab]:
                indeg[child] -= 1
                if indeg[child] == 0:
                    queue.append(child)
        return len(order) == len(self._by_id), order

    def _down_sets(self, topo: list[Label]) -> dict[Label, frozenset[Label]]:
        down: dict[Label, frozenset[Label]] = {}
        for lab in reversed(topo):  # children before parents
            acc: set[Label] = {lab}
            for child in self._children[lab]:
                acc |= down[child]
            down[lab] = frozenset(acc)
        return down

    def _reach_bfs(self, start: Label) -> frozenset[Label]:
        seen = {start}
        queue = deque([start])
        while queue:
            cur = queue.popleft()
            for child in self._children[cur]:
                if child not in seen:
                    seen.add(child)
                    queue.append(child)
        return frozenset(seen)

    # -- basic accessors -----------------------------------------------------

    @property
    def labels(self) -> tuple[Label, ...]:
        return tuple(self._by_id.values())

    @property
    def cover_edges(self) -> tuple[tuple[Label, Label], ...]:
        return self._edges

    def __len__(self) -> int:
        return len(self._by_id)

    def __iter__(self) -> Iterator[Label]:
        return iter(self._by_id.values())

    def __contains__(self, label: Label) -> bool:
        return self._by_id.get(label.id) == label

    def get(self, label_id: str) -> Label:
        try:
            return self._by_id[label_id]
        except KeyError:
            raise UnknownLabelError(f"unknown label {label_id!r}") from None

    def require(self, label: Label) -> Label:
        if label not in self:
            raise UnknownLabelError(f"unknown label {label.id!r}")
        return label

    def children(self, label: Label) -> tuple[Label, ...]:
        self.require(label)
        return self._children[label]

    def parents(self, label: Label) -> tuple[Label, ...]:
        self.require(label)
        return self._parents[label]

    def maximal_elements(self) -> tuple[Label, ...]:
        return tuple(lab for lab in self._by_id.values() if not self._parents[lab])

    def minimal_elements(self) -> tuple[Label, ...]:
        return tuple(lab for lab in self._by_id.values() if not self._children[lab])

    # -- order ---------------------------------------------------------------

    def down_set(self, label: Label) -> frozenset[Label]:
        """All labels dominated by ``label``, including itself."""
        self.require(label)
        if self._down is not None:
            return self._down[label]
        return self._reach_bfs(label)

    def leq(self, x: Label, y: Label) -> bool:
        """True iff x <= y: a cover path runs from y down to x, or x == y."""
        self.require(x)
        return x in self.down_set(y)

    def derivation_path(self, frm: Label, to: Label) -> Optional[tuple[Label, ...]]:
        """Shortest cover-edge path frm -> ... -> to, or None if to !<= frm.

        Ties break toward the lexicographically least successor id at each
        step, so paths (and hence derivation transcripts) are deterministic.
        """
        self.require(frm)
        self.require(to)
        if not self.leq(to, frm):
            return None
        dist = self._distances_to(to)
        path = [frm]
        cur = frm
        while cur != to:
            step = dist[cur] - 1
            nxt = min(c for c in self._children[cur] if dist.get(c) == step)
            path.append(nxt)
            cur = nxt
        return tuple(path)

    def _distances_to(self, target: Label) -> dict[Label, int]:
        """Cover-path length from each dominating label down to ``target``."""
        dist = {target: 0}
        queue = deque([target])
        while queue:
            cur = queue.popleft()
            for parent in self._parents[cur]:
                if parent not in dist:
                    dist[parent] = dist[cur] + 1
                    queue.append(parent)
        return dist

    def common_descendant_maxima(self, *labels: Label) -> tuple[Label, ...]:
        """Maximal elements of the common down-set, sorted by id."""
        if not labels:
            raise PosetError("need at least one label")
        common = self.down_set(labels[0])
        for lab in labels[1:]:
            common &= self.down_set(lab)
        maxima = [
            z for z in common
            if not any(z != above and z in self.down_set(above) for above in common)
        ]
        return tuple(sorted(maxima))

    def greatest_common_descendant(self, x: Label, y: Label) -> Optional[Label]:
        """One maximal common lower bound of x and y, or None.

        When the poset is not a lattice the maximal element may not be
        unique; the lexicographically least id wins and the ambiguity is
        logged.
        """
        maxima = self.common_descendant_maxima(x, y)
        if not maxima:
            return None
        if len(maxima) > 1:
            logger.warning(
                "common descendant of %s and %s is ambiguous: %s",
                x.id, y.id, ", ".join(m.id for m in maxima),
            )
        return maxima[0]

    # -- validation ------------------------------------------------------------

    def validate(self) -> ValidationReport:
        """Check acyclicity and transitive reduction; never raises."""
        violations: list[Violation] = []
        if not self._acyclic:
            on_cycle = sorted(
                lab.id for lab in self._by_id.values()
                if any(lab != d and lab in self._reach_bfs(d) and d in self._reach_bfs(lab)
                       for d in self._children[lab])
            )
            detail = ", ".join(on_cycle) if on_cycle else "cover graph has a directed cycle"
            violations.append(Violation("cycle", f"cycle through: {detail}"))
        else:
            for parent, child in self._edges:
                for sibling in self._children[parent]:
                    if sibling != child and child in self.down_set(sibling):
                        violations.append(Violation(
                            "not-reduced",
                            f"edge ({parent.id}, {child.id}) is implied via {sibling.id}",
                        ))
                        break
        return ValidationReport(ok=not violations, violations=tuple(violations))


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_chain(n: int) -> Poset:
    """The chain on labels 1..n, each k+1 covering k."""
    if n < 1:
        raise PosetError(f"chain size must be >= 1, got {n}")
    labels = [Label.point(k) for k in range(1, n + 1)]
    edges = [(Label.point(k + 1), Label.point(k)) for k in range(1, n)]
    return Poset(labels, edges)


def build_powerset(n: int) -> Poset:
    """All subsets of {1..n} ordered by inclusion."""
    if n < 0:
        raise PosetError(f"powerset size must be >= 0, got {n}")
    if n > POWERSET_CAP:
        raise PosetError(f"powerset size {n} exceeds cap {POWERSET_CAP}")
    subsets = [
        tuple(e for e in range(1, n + 1) if mask & (1 << (e - 1)))
        for mask in range(1 << n)
    ]
    labels = [Label.subset(s) for s in subsets]
    edges = []
    for s in subsets:
        for e in s:
            smaller = tuple(x for x in s if x != e)
            edges.append((Label.subset(s), Label.subset(smaller)))
    return Poset(labels, edges)


def build_intervals(n: int) -> Poset:
    """All intervals [i,j] within 1..n ordered by containment."""
    if n < 1:
        raise PosetError(f"interval poset size must be >= 1, got {n}")
    if n > INTERVALS_CAP:
        raise PosetError(f"interval poset size {n} exceeds cap {INTERVALS_CAP}")
    labels = [Label.interval(i, j) for i in range(1, n + 1) for j in range(i, n + 1)]
    edges = []
    for i in range(1, n + 1):
        for j in range(i + 1, n + 1):
            edges.append((Label.interval(i, j), Label.interval(i + 1, j)))
            edges.append((Label.interval(i, j), Label.interval(i, j - 1)))
    return Poset(labels, edges)


def product(p: Poset, q: Poset) -> Poset:
    """Componentwise-ordered product; covers change one coordinate by a cover."""
    labels = [Label.pair(a, b) for a in p for b in q]
    edges: list[tuple[Label, Label]] = []
    for a in p:
        for b in q:
            parent = Label.pair(a, b)
            for a_child in p.children(a):
                edges.append((parent, Label.pair(a_child, b)))
            for b_child in q.children(b):
                edges.append((parent, Label.pair(a, b_child)))
    return Poset(labels, edges)


_BUILDERS = {
    "chain": build_chain,
    "powerset": build_powerset,
    "intervals": build_intervals,
}


# ---------------------------------------------------------------------------
# Authentication policy and its file grammar
# ---------------------------------------------------------------------------

POLICY_OPTIONS = frozenset({"root_reserved", "derived_only"})


class PolicyParseError(PosetError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class AuthenticationPolicy:
    """A poset of labels plus the user and service labelling maps."""

    poset: Poset
    users: Mapping[str, Label]
    services: Mapping[str, Label]
    options: frozenset = frozenset()

    def __post_init__(self):
        for name, label in list(self.users.items()) + list(self.services.items()):
            if label not in self.poset:
                raise UnknownLabelError(f"{name!r} assigned unknown label {label.id!r}")

    def label_of_user(self, user_id: str) -> Label:
        try:
            return self.users[user_id]
        except KeyError:
            raise PosetError(f"unknown user {user_id!r}") from None

    def label_of_service(self, service_id: str) -> Label:
        try:
            return self.services[service_id]
        except KeyError:
            raise PosetError(f"unknown service {service_id!r}") from None


def parse_policy(text: str) -> AuthenticationPolicy:
    """Parse the line-oriented policy grammar.

    Lines (blank lines and ``#`` comments ignored)::

        poset chain 4 | poset powerset 2 | poset intervals 4
        poset product <builder> <n> <builder> <n>
        node <id>
        edge <parent-id> <child-id>
        user <id> <label>
        service <id> <label>
        option root_reserved | option derived_only

    Exactly one poset must be declared, either via one ``poset`` line or via
    ``node``/``edge`` lines. Unknown labels are rejected.
    """
    poset: Optional[Poset] = None
    nodes: dict[str, Label] = {}
    node_edges: list[tuple[str, str, int]] = []
    users: dict[str, tuple[str, int]] = {}
    services: dict[str, tuple[str, int]] = {}
    options: set[str] = set()

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        keyword = parts[0]
        if keyword == "poset":
            if poset is not None or nodes:
                raise PolicyParseError(line_no, "poset already declared")
            poset = _parse_poset_spec(parts[1:], line_no)
        elif keyword == "node":
            if poset is not None:
                raise PolicyParseError(line_no, "cannot mix node lines with a poset line")
            if len(parts) != 2:
                raise PolicyParseError(line_no, "usage: node <id>")
            label = _parse_label(parts[1], line_no)
            if label.id in nodes:
                raise PolicyParseError(line_no, f"duplicate node {label.id!r}")
            nodes[label.id] = label
        elif keyword == "edge":
            if len(parts) != 3:
                raise PolicyParseError(line_no, "usage: edge <parent> <child>")
            node_edges.append((parts[1], parts[2], line_no))
        elif keyword == "user":
            if len(parts) != 3:
                raise PolicyParseError(line_no, "usage: user <id> <label>")
            users[parts[1]] = (parts[2], line_no)
        elif keyword == "service":
            if len(parts) != 3:
                raise PolicyParseError(line_no, "usage: service <id> <label>")
            services[parts[1]] = (parts[2], line_no)
        elif keyword == "option":
            if len(parts) != 2 or parts[1] not in POLICY_OPTIONS:
                allowed = ", ".join(sorted(POLICY_OPTIONS))
                raise PolicyParseError(line_no, f"option must be one of: {allowed}")
            options.add(parts[1])
        else:
            raise PolicyParseError(line_no, f"unknown directive {keyword!r}")

    if poset is None:
        if not nodes:
            raise PolicyParseError(0, "no poset declared")
        edges = []
        for parent_id, child_id, line_no in node_edges:
            parent = _resolve_node(nodes, parent_id, line_no)
            child = _resolve_node(nodes, child_id, line_no)
            edges.append((parent, child))
        poset = Poset(nodes.values(), edges)
    elif node_edges:
        raise PolicyParseError(node_edges[0][2], "cannot mix edge lines with a poset line")

    def resolve(assignments: dict[str, tuple[str, int]]) -> dict[str, Label]:
        out: dict[str, Label] = {}
        for name, (label_text, line_no) in assignments.items():
            label = _parse_label(label_text, line_no)
            try:
                out[name] = poset.get(label.id)
            except UnknownLabelError:
                raise PolicyParseError(line_no, f"unknown label {label.id!r}") from None
        return out

    return AuthenticationPolicy(
        poset=poset,
        users=resolve(users),
        services=resolve(services),
        options=frozenset(options),
    )


def _parse_label(text: str, line_no: int) -> Label:
    try:
        return Label.parse(text)
    except PosetError as exc:
        raise PolicyParseError(line_no, str(exc)) from None


def _resolve_node(nodes: dict[str, Label], node_id: str, line_no: int) -> Label:
    label = _parse_label(node_id, line_no)
    if label.id not in nodes:
        raise PolicyParseError(line_no, f"unknown label {label.id!r}")
    return nodes[label.id]


def _parse_poset_spec(parts: list[str], line_no: int) -> Poset:
    if len(parts) == 2 and parts[0] in _BUILDERS:
        try:
            size = int(parts[1])
        except ValueError:
            raise PolicyParseError(line_no, f"bad size {parts[1]!r}") from None
        try:
            return _BUILDERS[parts[0]](size)
        except PosetError as exc:
            raise PolicyParseError(line_no, str(exc)) from None
    if len(parts) == 5 and parts[0] == "product":
        left = _parse_poset_spec(parts[1:3], line_no)
        right = _parse_poset_spec(parts[3:5], line_no)
        return product(left, right)
    raise PolicyParseError(
        line_no,
        "usage: poset chain|powerset|intervals <n> or poset product <builder> <n> <builder> <n>",
    )
