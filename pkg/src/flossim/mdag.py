"""Missing-data DAG engine.

Directed acyclic graphs over named random variables, each annotated with a
visibility: fully observed at the server, subject to missingness (in which
case a fully observed indicator variable must be designated), or fully
hidden.  The engine answers three kinds of queries:

* exhaustive enumeration of simple paths between two vertices,
* d-separation of two vertex sets given a conditioning set, decided by a
  linear-time reachability walk (Bayes-ball style),
* MCAR / MAR / MNAR classification of a missingness indicator against a
  target variable, derived from the two d-separation queries.

Graphs are immutable after construction; descendant closures are computed
once up front, so concurrent reads need no synchronization.

Two graphs used throughout the library ship as package data under
``graphs/``: the gradient-missingness graph (opt-out driven by the private
features and outcomes themselves) and the shadow-variable graph (opt-out
mediated by reported satisfaction, with a shadow covariate).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Iterable

__all__ = [
    "Visibility",
    "VariableNode",
    "MDag",
    "Path",
    "MissingnessClass",
    "GraphError",
    "CycleError",
    "UnknownVertexError",
    "DuplicateVertexError",
    "PathLimitError",
    "GraphParseError",
    "build_mdag",
    "enumerate_paths",
    "path_is_open",
    "find_open_path",
    "d_separated",
    "classify_missingness",
    "check_shadow_conditions",
    "parse_graph_text",
    "load_graph_file",
    "to_graph_text",
    "gradient_missingness_graph",
    "shadow_variable_graph",
    "MAX_PATH_ENUM_VERTICES",
]

# Path enumeration is factorial in the worst case; refuse beyond this size.
MAX_PATH_ENUM_VERTICES = 12


class GraphError(ValueError):
    """Invalid graph structure or invalid graph query."""


class CycleError(GraphError):
    """The edge relation contains a directed cycle."""


class UnknownVertexError(GraphError):
    """A name does not refer to a declared vertex."""


class DuplicateVertexError(GraphError):
    """Two vertex declarations share one name."""


class PathLimitError(GraphError):
    """Graph exceeds the supported size for exhaustive path enumeration."""


class GraphParseError(GraphError):
    """Malformed graph specification text."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class Visibility(Enum):
    OBSERVED = "observed"
    MISSING = "missing"
    HIDDEN = "hidden"


class MissingnessClass(Enum):
    MCAR = "MCAR"
    MAR = "MAR"
    MNAR = "MNAR"


@dataclass(frozen=True)
class VariableNode:
    """A named random variable with a server-side visibility annotation.

    Variables marked ``MISSING`` must designate the fully observed indicator
    variable that records whether their value arrived.
    """

    name: str
    visibility: Visibility = Visibility.OBSERVED
    indicator: str | None = None


@dataclass(frozen=True)
class Path:
    """A simple path: vertices plus the orientation of each step.

    ``forward[i]`` is True when the i-th edge is directed
    ``vertices[i] -> vertices[i + 1]``.
    """

    vertices: tuple[str, ...]
    forward: tuple[bool, ...]

    def __str__(self) -> str:
        parts = [self.vertices[0]]
        for fwd, v in zip(self.forward, self.vertices[1:]):
            parts.append("->" if fwd else "<-")
            parts.append(v)
        return " ".join(parts)

    def colliders(self) -> tuple[str, ...]:
        """Interior vertices whose adjacent path edges both point into them."""
        out = []
        for i in range(1, len(self.vertices) - 1):
            if self.forward[i - 1] and not self.forward[i]:
                out.append(self.vertices[i])
        return tuple(out)


class MDag:
    """Immutable missing-data DAG.

    Construction validates name uniqueness, edge endpoints, absence of
    self-loops and duplicate edges, acyclicity (via topological sort), and
    that every ``MISSING`` variable designates a declared indicator.
    """

    def __init__(
        self,
        vertices: Iterable[VariableNode],
        edges: Iterable[tuple[str, str]],
        deterministic_edges: Iterable[tuple[str, str]] = (),
    ):
        self._nodes: dict[str, VariableNode] = {}
        for node in vertices:
            if node.name in self._nodes:
                raise DuplicateVertexError(f"duplicate vertex name {node.name!r}")
            self._nodes[node.name] = node

        parents: dict[str, list[str]] = {name: [] for name in self._nodes}
        children: dict[str, list[str]] = {name: [] for name in self._nodes}
        seen: set[tuple[str, str]] = set()
        edge_list: list[tuple[str, str]] = []
        for parent, child in edges:
            for endpoint in (parent, child):
                if endpoint not in self._nodes:
                    raise UnknownVertexError(f"edge endpoint {endpoint!r} is not a declared vertex")
            if parent == child:
                raise GraphError(f"self-loop on {parent!r}")
            if (parent, child) in seen:
                raise GraphError(f"duplicate edge {parent!r} -> {child!r}")
            seen.add((parent, child))
            edge_list.append((parent, child))
            parents[child].append(parent)
            children[parent].append(child)
        self._edges = tuple(edge_list)
        self._parents = {name: tuple(sorted(ps)) for name, ps in parents.items()}
        self._children = {name: tuple(sorted(cs)) for name, cs in children.items()}

        det = frozenset(deterministic_edges)
        unknown_det = det - seen
        if unknown_det:
            raise GraphError(f"deterministic tag on undeclared edge(s): {sorted(unknown_det)}")
        self._deterministic = det

        for node in self._nodes.values():
            if node.visibility is Visibility.MISSING:
                if node.indicator is None:
                    raise GraphError(f"missing variable {node.name!r} has no designated indicator")
                if node.indicator not in self._nodes:
                    raise UnknownVertexError(
                        f"indicator {node.indicator!r} of {node.name!r} is not a declared vertex"
                    )

        self._topo = self._topological_order()
        self._descendants = self._descendant_closure()
        # Undirected adjacency used by path enumeration, sorted for
        # deterministic traversal order.
        adj: dict[str, list[tuple[str, bool]]] = {name: [] for name in self._nodes}
        for parent, child in self._edges:
            adj[parent].append((child, True))
            adj[child].append((parent, False))
        self._adjacency = {name: tuple(sorted(nbrs)) for name, nbrs in adj.items()}

    # -- construction helpers -------------------------------------------------

    def _topological_order(self) -> tuple[str, ...]:
        in_deg = {name: len(self._parents[name]) for name in self._nodes}
        frontier = [name for name in self._nodes if in_deg[name] == 0]
        order: list[str] = []
        while frontier:
            v = frontier.pop()
            order.append(v)
            for child in self._children[v]:
                in_deg[child] -= 1
                if in_deg[child] == 0:
                    frontier.append(child)
        if len(order) != len(self._nodes):
            cyclic = sorted(name for name, d in in_deg.items() if d > 0)
            raise CycleError(f"directed cycle through {cyclic}")
        return tuple(order)

    def _descendant_closure(self) -> dict[str, frozenset[str]]:
        closure: dict[str, frozenset[str]] = {}
        for v in reversed(self._topo):
            acc: set[str] = set()
            for child in self._children[v]:
                acc.add(child)
                acc |= closure[child]
            closure[v] = frozenset(acc)
        return closure

    # -- read-only accessors ---------------------------------------------------

    def __len__(self) -> int:
        return len(self._nodes)

    def __contains__(self, name: str) -> bool:
        return name in self._nodes

    @property
    def vertex_names(self) -> tuple[str, ...]:
        return tuple(self._nodes)

    @property
    def vertices(self) -> tuple[VariableNode, ...]:
        return tuple(self._nodes.values())

    @property
    def edges(self) -> tuple[tuple[str, str], ...]:
        return self._edges

    @property
    def deterministic_edges(self) -> frozenset[tuple[str, str]]:
        return self._deterministic

    def node(self, name: str) -> VariableNode:
        self._require(name)
        return self._nodes[name]

    def visibility(self, name: str) -> Visibility:
        return self.node(name).visibility

    def parents(self, name: str) -> tuple[str, ...]:
        self._require(name)
        return self._parents[name]

    def children(self, name: str) -> tuple[str, ...]:
        self._require(name)
        return self._children[name]

    def descendants(self, name: str) -> frozenset[str]:
        """Strict descendants (the vertex itself is excluded)."""
        self._require(name)
        return self._descendants[name]

    def observed_names(self) -> frozenset[str]:
        return frozenset(
            n for n, node in self._nodes.items() if node.visibility is Visibility.OBSERVED
        )

    def _require(self, name: str) -> None:
        if name not in self._nodes:
            raise UnknownVertexError(f"unknown vertex {name!r}")

    def _ancestral_closure(self, names: frozenset[str]) -> frozenset[str]:
        """The set plus every vertex with a directed path into it."""
        out = set(names)
        stack = list(names)
        while stack:
            v = stack.pop()
            for p in self._parents[v]:
                if p not in out:
                    out.add(p)
                    stack.append(p)
        return frozenset(out)


def build_mdag(
    vertex_specs: Iterable[VariableNode],
    edge_specs: Iterable[tuple[str, str]],
    deterministic_edges: Iterable[tuple[str, str]] = (),
) -> MDag:
    """Validate and construct an :class:`MDag`."""
    return MDag(vertex_specs, edge_specs, deterministic_edges)


def enumerate_paths(g: MDag, a: str, b: str) -> list[Path]:
    """All simple paths between ``a`` and ``b``, ignoring edge direction.

    Each path visits every vertex (hence every edge) at most once.  The
    enumeration is exhaustive; graphs larger than
    ``MAX_PATH_ENUM_VERTICES`` vertices are refused because the number of
    simple paths grows factorially.
    """
    g._require(a)
    g._require(b)
    if a == b:
        raise GraphError("path endpoints must differ")
    if len(g) > MAX_PATH_ENUM_VERTICES:
        raise PathLimitError(
            f"graph has {len(g)} vertices; path enumeration supports at most "
            f"{MAX_PATH_ENUM_VERTICES}"
        )

    found: list[Path] = []

    def walk(v: str, vertices: list[str], forward: list[bool], on_path: set[str]) -> None:
        for w, fwd in g._adjacency[v]:
            if w in on_path:
                continue
            if w == b:
                found.append(Path(tuple(vertices + [w]), tuple(forward + [fwd])))
                continue
            on_path.add(w)
            walk(w, vertices + [w], forward + [fwd], on_path)
            on_path.remove(w)

    walk(a, [a], [], {a})
    found.sort(key=lambda p: (len(p.vertices), str(p)))
    return found


def path_is_open(g: MDag, path: Path, conditioning: Iterable[str]) -> bool:
    """Whether a path is open given a conditioning set.

    Open means every collider on the path is in the conditioning set or has
    a descendant in it, and every non-collider is outside it.
    """
    cond = frozenset(conditioning)
    for name in cond:
        g._require(name)
    for i in range(1, len(path.vertices) - 1):
        v = path.vertices[i]
        is_collider = path.forward[i - 1] and not path.forward[i]
        if is_collider:
            if v not in cond and not (g.descendants(v) & cond):
                return False
        elif v in cond:
            return False
    return True


def find_open_path(
    g: MDag,
    a: Iterable[str],
    b: Iterable[str],
    c: Iterable[str],
) -> Path | None:
    """First open path between the two sets, or None.  Enumeration-based,
    so subject to the same size bound as :func:`enumerate_paths`."""
    cond = frozenset(c)
    for x in sorted(frozenset(a)):
        for y in sorted(frozenset(b)):
            for path in enumerate_paths(g, x, y):
                if path_is_open(g, path, cond):
                    return path
    return None


def d_separated(
    g: MDag,
    a: Iterable[str],
    b: Iterable[str],
    c: Iterable[str] = frozenset(),
) -> bool:
    """Whether vertex sets ``a`` and ``b`` are d-separated given ``c``.

    Decided by a reachability walk over (vertex, arrival direction) states
    rather than path enumeration, so it runs in time linear in the graph
    size.  The walk spreads from ``a``; reaching any vertex of ``b`` along
    an open route refutes separation.
    """
    a, b, c = frozenset(a), frozenset(b), frozenset(c)
    for name in a | b | c:
        g._require(name)
    if a & b or a & c or b & c:
        raise GraphError("query sets must be pairwise disjoint")
    if not a or not b:
        return True

    # Vertices that are in c or have a descendant in c: exactly the ones at
    # which a collider is passable.
    collider_open = g._ancestral_closure(c)

    FROM_CHILD, FROM_PARENT = 0, 1
    agenda: list[tuple[str, int]] = [(v, FROM_CHILD) for v in sorted(a)]
    seen = set(agenda)
    while agenda:
        v, how = agenda.pop()
        if v in b:
            return False
        moves: list[tuple[str, int]] = []
        if how == FROM_CHILD:
            # Arrival edge points out of v: v is a non-collider on any
            # continuation, passable only when unconditioned.
            if v not in c:
                moves.extend((p, FROM_CHILD) for p in g.parents(v))
                moves.extend((ch, FROM_PARENT) for ch in g.children(v))
        else:
            # Arrival edge points into v: continuing to a parent makes v a
            # collider; continuing to a child makes it a chain vertex.
            if v in collider_open:
                moves.extend((p, FROM_CHILD) for p in g.parents(v))
            if v not in c:
                moves.extend((ch, FROM_PARENT) for ch in g.children(v))
        for m in moves:
            if m not in seen:
                seen.add(m)
                agenda.append(m)
    return True


def classify_missingness(
    g: MDag,
    indicator: str,
    target: str,
    observed: Iterable[str] = frozenset(),
) -> MissingnessClass:
    """Classify the missingness mechanism of ``target`` recorded by ``indicator``.

    MCAR when the indicator is d-separated from the target outright, MAR
    when separation requires conditioning on the given observed covariates,
    MNAR otherwise.
    """
    obs = frozenset(observed)
    if g.visibility(target) is not Visibility.MISSING:
        raise GraphError(f"target {target!r} is not marked missing")
    if g.visibility(indicator) is not Visibility.OBSERVED:
        raise GraphError(f"indicator {indicator!r} is not fully observed")
    bad = [n for n in sorted(obs) if g.visibility(n) is not Visibility.OBSERVED]
    if bad:
        raise GraphError(f"conditioning variables must be fully observed, got {bad}")
    if indicator in obs or target in obs:
        raise GraphError("observed set must not contain the indicator or the target")

    if d_separated(g, {indicator}, {target}, frozenset()):
        return MissingnessClass.MCAR
    if d_separated(g, {indicator}, {target}, obs):
        return MissingnessClass.MAR
    return MissingnessClass.MNAR


def check_shadow_conditions(
    g: MDag,
    z: str,
    r: str,
    s: str,
    d_rest: Iterable[str],
) -> tuple[bool, bool]:
    """Evaluate the two shadow-variable requirements for ``z``.

    Returns ``(relevance, exclusion)``: relevance holds when ``z`` is NOT
    d-separated from the satisfaction variable ``s`` given the indicator
    ``r`` and the remaining covariates, and exclusion holds when ``z`` IS
    d-separated from ``r`` given ``s`` and the remaining covariates.
    """
    rest = frozenset(d_rest)
    relevance = not d_separated(g, {z}, {s}, rest | {r})
    exclusion = d_separated(g, {z}, {r}, rest | {s})
    return relevance, exclusion


# -- graph specification files ----------------------------------------------
#
# Line-oriented format, one directive per line, '#' starts a comment:
#
#   vertex <name> <observed|missing|hidden> [indicator]
#   edge <parent> <child> [deterministic]
#
# The indicator token is required for vertices declared missing.  The
# 'deterministic' tag marks edges realized by a deterministic function of
# the parent (it does not affect separation queries).


def parse_graph_text(text: str) -> MDag:
    """Parse the line-oriented graph format. Raises GraphParseError with the
    offending line number on malformed input."""
    vertices: list[VariableNode] = []
    edges: list[tuple[str, str]] = []
    det: list[tuple[str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        kind = tokens[0]
        if kind == "vertex":
            if len(tokens) not in (3, 4):
                raise GraphParseError(lineno, f"expected 'vertex <name> <visibility> [indicator]', got {raw!r}")
            name, vis_token = tokens[1], tokens[2]
            try:
                vis = Visibility(vis_token)
            except ValueError:
                raise GraphParseError(
                    lineno, f"unknown visibility {vis_token!r} (expected observed, missing, or hidden)"
                ) from None
            indicator = tokens[3] if len(tokens) == 4 else None
            if indicator is not None and vis is not Visibility.MISSING:
                raise GraphParseError(lineno, "indicator column is only valid for missing vertices")
            vertices.append(VariableNode(name, vis, indicator))
        elif kind == "edge":
            if len(tokens) not in (3, 4):
                raise GraphParseError(lineno, f"expected 'edge <parent> <child> [deterministic]', got {raw!r}")
            if len(tokens) == 4 and tokens[3] != "deterministic":
                raise GraphParseError(lineno, f"unknown edge tag {tokens[3]!r}")
            pair = (tokens[1], tokens[2])
            edges.append(pair)
            if len(tokens) == 4:
                det.append(pair)
        else:
            raise GraphParseError(lineno, f"unknown directive {kind!r}")
    try:
        return build_mdag(vertices, edges, det)
    except GraphError as exc:
        raise GraphParseError(0, str(exc)) from exc


def load_graph_file(path) -> MDag:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_graph_text(fh.read())


def to_graph_text(g: MDag) -> str:
    """Serialize a graph back into the specification format."""
    lines = []
    for node in g.vertices:
        line = f"vertex {node.name} {node.visibility.value}"
        if node.indicator is not None:
            line += f" {node.indicator}"
        lines.append(line)
    for parent, child in g.edges:
        line = f"edge {parent} {child}"
        if (parent, child) in g.deterministic_edges:
            line += " deterministic"
        lines.append(line)
    return "\n".join(lines) + "\n"


def _packaged_graph(filename: str) -> MDag:
    text = resources.files(__package__).joinpath("graphs", filename).read_text(encoding="utf-8")
    return parse_graph_text(text)


def gradient_missingness_graph() -> MDag:
    """The bundled graph in which opt-out depends on the private data
    directly, making the uploaded gradients MNAR."""
    return _packaged_graph("gradient_missingness.graph")


def shadow_variable_graph() -> MDag:
    """The bundled graph in which opt-out is mediated by satisfaction and a
    shadow covariate enables propensity estimation."""
    return _packaged_graph("shadow_variable.graph")
