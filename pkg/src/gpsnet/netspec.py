"""Declarative data model for dilated-convolution DAGs.

A GraphSpec lists typed nodes, role-tagged edges (horizontal = within a
branch, vertical = from the previous branch) and gate attachments. The
canonical builders produce the parallel pyramid (ASPP), the dense
cascade (DenseASPP) and the two-dimensional gated grid, all over 3x3
dilated convolutions with same-size padding. Serialization is canonical
JSON: sorted keys, no floats, byte-deterministic.
"""

from __future__ import annotations

import heapq
import json
import warnings
from dataclasses import dataclass, field, replace

NODE_KINDS = ("entrance", "squeeze1x1", "atrous3x3", "excite1x1",
              "gate_merge", "sum_merge", "concat_merge", "exit")
CONV_KINDS = ("squeeze1x1", "atrous3x3", "excite1x1")
MERGE_KINDS = ("gate_merge", "sum_merge", "concat_merge")
EDGE_ROLES = ("horizontal", "vertical")

# dilation grids of the reference four-branch configurations
UNTUNED_GRID = ((1, 1), (12, 12), (24, 24), (36, 36))
TUNED_GRID = ((1, 3), (11, 13), (23, 29), (33, 37))
ASPP_RATES = (1, 12, 24, 36)


class SpecError(ValueError):
    """Malformed or invalid graph specification."""


class SpecParseError(SpecError):
    """Input bytes could not be parsed into a GraphSpec."""


@dataclass(frozen=True)
class NodeSpec:
    id: str
    kind: str
    kernel: int | None = None        # conv kinds only
    dilation: int | None = None      # atrous3x3 only
    in_ch: int | None = None         # conv kinds; entrance carries out_ch
    out_ch: int | None = None
    branch_index: int | None = None
    layer_index: int | None = None


@dataclass(frozen=True)
class EdgeSpec:
    from_id: str
    to_id: str
    role: str = "horizontal"


@dataclass(frozen=True)
class GateSpec:
    merge_id: str
    vertical_id: str
    horizontal_id: str


@dataclass(frozen=True)
class GraphSpec:
    name: str
    nodes: tuple[NodeSpec, ...]
    edges: tuple[EdgeSpec, ...]
    gates: tuple[GateSpec, ...] = ()

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def incoming(self, node_id: str) -> list[EdgeSpec]:
        return [e for e in self.edges if e.to_id == node_id]

    def outgoing(self, node_id: str) -> list[EdgeSpec]:
        return [e for e in self.edges if e.from_id == node_id]


# ---------------------------------------------------------------------------
# traversal

def topological_order(g: GraphSpec) -> list[str]:
    """Kahn's algorithm with an id-ordered ready heap; unique and stable."""
    indeg = {n.id: 0 for n in g.nodes}
    succ: dict[str, list[str]] = {n.id: [] for n in g.nodes}
    for e in g.edges:
        if e.from_id not in indeg or e.to_id not in indeg:
            raise SpecError(f"edge {e.from_id}->{e.to_id} references unknown node")
        indeg[e.to_id] += 1
        succ[e.from_id].append(e.to_id)
    ready = [nid for nid, d in sorted(indeg.items()) if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for nxt in succ[nid]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(ready, nxt)
    if len(order) != len(g.nodes):
        raise SpecError("graph contains a cycle")
    return order


def node_widths(g: GraphSpec) -> dict[str, int]:
    """Channel width at every node output, propagated from the entrance."""
    widths: dict[str, int] = {}
    nodes = {n.id: n for n in g.nodes}
    for nid in topological_order(g):
        n = nodes[nid]
        ins = [widths[e.from_id] for e in g.incoming(nid)]
        if n.kind == "entrance":
            if n.out_ch is None:
                raise SpecError(f"entrance {nid} has no declared width")
            widths[nid] = n.out_ch
        elif n.kind in CONV_KINDS:
            if len(set(ins)) > 1:
                raise SpecError(f"conv {nid} has mixed-width inputs {ins}")
            widths[nid] = n.out_ch
        elif n.kind == "concat_merge":
            widths[nid] = sum(ins)
        elif n.kind in ("sum_merge", "gate_merge"):
            if len(set(ins)) > 1:
                raise SpecError(f"merge {nid} has mixed-width inputs {ins}")
            widths[nid] = ins[0] if ins else 0
        elif n.kind == "exit":
            widths[nid] = ins[0] if ins else 0
    return widths


def longest_dilation_path(g: GraphSpec) -> int:
    """Max dilation-weighted path sum from any entrance to any exit-feeding
    node; the receptive-field side of a k=3 graph is twice this plus one."""
    reach: dict[str, int] = {}
    nodes = {n.id: n for n in g.nodes}
    best = 0
    for nid in topological_order(g):
        n = nodes[nid]
        ins = [reach[e.from_id] for e in g.incoming(nid)]
        base = max(ins) if ins else 0
        reach[nid] = base + (n.dilation if n.kind == "atrous3x3" else 0)
        if n.kind == "exit":
            best = max(best, reach[nid])
    return best


# ---------------------------------------------------------------------------
# validation

def validate(g: GraphSpec) -> list[str]:
    """Structural checks; returns a list of violations (empty = ok)."""
    violations: list[str] = []
    ids = [n.id for n in g.nodes]
    if not ids:
        return ["graph has no nodes"]
    if len(set(ids)) != len(ids):
        violations.append("duplicate node ids")
    nodes = {n.id: n for n in g.nodes}

    for n in g.nodes:
        if n.kind not in NODE_KINDS:
            violations.append(f"node {n.id}: unknown kind {n.kind!r}")
            continue
        if n.kind == "atrous3x3":
            if n.kernel != 3:
                violations.append(f"node {n.id}: atrous3x3 must have kernel 3")
            if n.dilation is None or n.dilation < 1:
                violations.append(f"node {n.id}: atrous3x3 needs a positive dilation")
        elif n.kind in ("squeeze1x1", "excite1x1"):
            if n.kernel != 1:
                violations.append(f"node {n.id}: {n.kind} must have kernel 1")
        if n.kind != "atrous3x3" and n.dilation is not None:
            violations.append(f"node {n.id}: dilation only valid on atrous3x3")
        if n.kind in CONV_KINDS and (not n.in_ch or not n.out_ch):
            violations.append(f"node {n.id}: conv node needs in_ch/out_ch")

    for e in g.edges:
        if e.from_id not in nodes or e.to_id not in nodes:
            violations.append(f"edge {e.from_id}->{e.to_id}: unknown endpoint")
        if e.role not in EDGE_ROLES:
            violations.append(f"edge {e.from_id}->{e.to_id}: bad role {e.role!r}")
    if violations:
        return violations

    try:
        topological_order(g)
    except SpecError as exc:
        violations.append(str(exc))
        return violations

    entrances = [n for n in g.nodes if n.kind == "entrance"]
    exits = [n for n in g.nodes if n.kind == "exit"]
    if not entrances:
        violations.append("graph has no entrance")
    if not exits:
        violations.append("graph has no exit")

    for n in g.nodes:
        ins = g.incoming(n.id)
        outs = g.outgoing(n.id)
        if n.kind != "entrance" and not ins:
            violations.append(f"node {n.id}: no incoming edge")
        if n.kind == "entrance" and ins:
            violations.append(f"entrance {n.id} must not have incoming edges")
        if n.kind != "exit" and not outs:
            violations.append(f"node {n.id}: no outgoing edge")
        if n.kind == "gate_merge":
            roles = sorted(e.role for e in ins)
            if roles != ["horizontal", "vertical"]:
                violations.append(f"gate arity: {n.id} needs exactly one horizontal "
                                  f"and one vertical input, got {roles}")

    gate_ids = {gt.merge_id for gt in g.gates}
    merge_ids = {n.id for n in g.nodes if n.kind == "gate_merge"}
    for missing in sorted(merge_ids - gate_ids):
        violations.append(f"gate_merge {missing} has no gate attachment")
    for extra in sorted(gate_ids - merge_ids):
        violations.append(f"gate attachment on non-gate node {extra}")
    for gt in g.gates:
        ins = {(e.role, e.from_id) for e in g.incoming(gt.merge_id)}
        if gt.merge_id in merge_ids:
            if ("vertical", gt.vertical_id) not in ins or \
                    ("horizontal", gt.horizontal_id) not in ins:
                violations.append(f"gate on {gt.merge_id}: attachment ids do not "
                                  "match the merge's edges")
    if violations:
        return violations

    try:
        node_widths(g)
    except SpecError as exc:
        violations.append(str(exc))
    return violations


def validate_or_raise(g: GraphSpec) -> GraphSpec:
    violations = validate(g)
    if violations:
        raise SpecError("invalid graph: " + "; ".join(violations))
    return g


# ---------------------------------------------------------------------------
# canonical builders

def _conv_node(nid: str, kind: str, in_ch: int, out_ch: int, b: int, l: int,
               dilation: int | None = None) -> NodeSpec:
    kernel = 3 if kind == "atrous3x3" else 1
    return NodeSpec(id=nid, kind=kind, kernel=kernel, dilation=dilation,
                    in_ch=in_ch, out_ch=out_ch, branch_index=b, layer_index=l)


def build_aspp(dilations, in_ch: int, branch_ch: int) -> GraphSpec:
    """Parallel dilated 3x3 branches from one entrance into a concat."""
    dilations = list(dilations)
    if not dilations or any(r < 1 for r in dilations):
        raise SpecError("dilations must be a non-empty list of positive rates")
    if len(set(dilations)) != len(dilations):
        warnings.warn("duplicate dilation rates: union sample counting degenerates")
    nodes = [NodeSpec(id="input", kind="entrance", out_ch=in_ch)]
    edges = []
    for b, r in enumerate(dilations, start=1):
        nid = f"b{b}.conv"
        nodes.append(_conv_node(nid, "atrous3x3", in_ch, branch_ch, b, 1, dilation=r))
        edges.append(EdgeSpec("input", nid, "horizontal"))
        edges.append(EdgeSpec(nid, "concat", "horizontal"))
    nodes.append(NodeSpec(id="concat", kind="concat_merge"))
    nodes.append(NodeSpec(id="output", kind="exit"))
    edges.append(EdgeSpec("concat", "output", "horizontal"))
    return validate_or_raise(GraphSpec(name="aspp", nodes=tuple(nodes),
                                       edges=tuple(edges)))


def build_denseaspp(dilations, in_ch: int, growth_ch: int) -> GraphSpec:
    """Dense cascade: layer l convolves the concat of the entrance and all
    previous layer outputs; the exit unions every layer output."""
    dilations = list(dilations)
    if not dilations or any(r < 1 for r in dilations):
        raise SpecError("dilations must be a non-empty list of positive rates")
    if dilations != sorted(dilations):
        warnings.warn("dilations not ascending: sorted for the dense cascade")
        dilations = sorted(dilations)
    nodes = [NodeSpec(id="input", kind="entrance", out_ch=in_ch)]
    edges = []
    prev_convs: list[str] = []
    for l, r in enumerate(dilations, start=1):
        cid = f"l{l}.conv"
        width = in_ch + (l - 1) * growth_ch
        if prev_convs:
            mid = f"l{l}.concat"
            nodes.append(NodeSpec(id=mid, kind="concat_merge",
                                  branch_index=None, layer_index=l))
            edges.append(EdgeSpec("input", mid, "horizontal"))
            for p in prev_convs:
                edges.append(EdgeSpec(p, mid, "vertical"))
            src = mid
        else:
            src = "input"
        nodes.append(_conv_node(cid, "atrous3x3", width, growth_ch, l, l, dilation=r))
        edges.append(EdgeSpec(src, cid, "horizontal"))
        edges.append(EdgeSpec(cid, "union", "horizontal"))
        prev_convs.append(cid)
    nodes.append(NodeSpec(id="union", kind="concat_merge"))
    nodes.append(NodeSpec(id="output", kind="exit"))
    edges.append(EdgeSpec("union", "output", "horizontal"))
    return validate_or_raise(GraphSpec(name="denseaspp", nodes=tuple(nodes),
                                       edges=tuple(edges)))


def build_supernet(dilation_grid, in_ch: int, bottleneck_ch: int, out_ch: int,
                   gated: bool) -> GraphSpec:
    """Two-dimensional grid of bottlenecked branches.

    Per branch b: squeeze1x1 -> atrous3x3(r_b1) -> atrous3x3(r_b2) ->
    excite1x1. For b > 1 the input of conv (b, l) merges its horizontal
    predecessor with the output of conv (b-1, l); merges are gates when
    `gated`, elementwise sums otherwise. Branch 1 is horizontal only.
    """
    grid = [tuple(pair) for pair in dilation_grid]
    if not grid:
        raise SpecError("dilation grid must be non-empty")
    for pair in grid:
        if len(pair) != 2 or any(r < 1 for r in pair):
            raise SpecError(f"bad dilation pair {pair}")
    nodes = [NodeSpec(id="input", kind="entrance", out_ch=in_ch)]
    edges = []
    gates = []
    merge_kind = "gate_merge" if gated else "sum_merge"
    for b, (r1, r2) in enumerate(grid, start=1):
        sq = f"b{b}.squeeze"
        nodes.append(_conv_node(sq, "squeeze1x1", in_ch, bottleneck_ch, b, 0))
        edges.append(EdgeSpec("input", sq, "horizontal"))
        horiz = sq
        for l, r in enumerate((r1, r2), start=1):
            cid = f"b{b}.conv{l}"
            if b > 1:
                mid = f"b{b}.merge{l}"
                vert = f"b{b - 1}.conv{l}"
                nodes.append(NodeSpec(id=mid, kind=merge_kind,
                                      branch_index=b, layer_index=l))
                edges.append(EdgeSpec(horiz, mid, "horizontal"))
                edges.append(EdgeSpec(vert, mid, "vertical"))
                if gated:
                    gates.append(GateSpec(merge_id=mid, vertical_id=vert,
                                          horizontal_id=horiz))
                src = mid
            else:
                src = horiz
            nodes.append(_conv_node(cid, "atrous3x3", bottleneck_ch, bottleneck_ch,
                                    b, l, dilation=r))
            edges.append(EdgeSpec(src, cid, "horizontal"))
            horiz = cid
        ex = f"b{b}.excite"
        nodes.append(_conv_node(ex, "excite1x1", bottleneck_ch, out_ch, b, 3))
        edges.append(EdgeSpec(horiz, ex, "horizontal"))
        edges.append(EdgeSpec(ex, "concat", "horizontal"))
    nodes.append(NodeSpec(id="concat", kind="concat_merge"))
    nodes.append(NodeSpec(id="output", kind="exit"))
    edges.append(EdgeSpec("concat", "output", "horizontal"))
    name = ("gps" if gated else "supernet")
    return validate_or_raise(GraphSpec(name=name, nodes=tuple(nodes),
                                       edges=tuple(edges), gates=tuple(gates)))


# ---------------------------------------------------------------------------
# serialization (canonical JSON)

_NODE_FIELDS = ("id", "kind", "kernel", "dilation", "in_ch", "out_ch",
                "branch_index", "layer_index")


def _node_to_obj(n: NodeSpec) -> dict:
    return {k: getattr(n, k) for k in _NODE_FIELDS if getattr(n, k) is not None}


def serialize(g: GraphSpec) -> bytes:
    """Canonical byte-deterministic encoding: sorted keys, two-space indent."""
    obj = {
        "name": g.name,
        "nodes": [_node_to_obj(n) for n in g.nodes],
        "edges": [{"from": e.from_id, "to": e.to_id, "role": e.role}
                  for e in g.edges],
        "gates": [{"merge": gt.merge_id, "vertical": gt.vertical_id,
                   "horizontal": gt.horizontal_id} for gt in g.gates],
    }
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


def parse(data: bytes | str) -> GraphSpec:
    """Parse and validate a serialized graph; raises SpecParseError with the
    offending node/edge location on malformed input."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SpecParseError(f"not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise SpecParseError("top level must be an object")
    name = obj.get("name")
    if not isinstance(name, str) or not name:
        raise SpecParseError("missing or empty 'name'")

    nodes = []
    for i, raw in enumerate(obj.get("nodes", [])):
        if not isinstance(raw, dict) or "id" not in raw or "kind" not in raw:
            raise SpecParseError(f"nodes[{i}]: need at least 'id' and 'kind'")
        extra = set(raw) - set(_NODE_FIELDS)
        if extra:
            raise SpecParseError(f"nodes[{i}] ({raw.get('id')}): unknown fields {sorted(extra)}")
        nodes.append(NodeSpec(**{k: raw.get(k) for k in _NODE_FIELDS}))
    edges = []
    for i, raw in enumerate(obj.get("edges", [])):
        try:
            edges.append(EdgeSpec(from_id=raw["from"], to_id=raw["to"],
                                  role=raw.get("role", "horizontal")))
        except (TypeError, KeyError):
            raise SpecParseError(f"edges[{i}]: need 'from' and 'to'") from None
    gates = []
    for i, raw in enumerate(obj.get("gates", [])):
        try:
            gates.append(GateSpec(merge_id=raw["merge"], vertical_id=raw["vertical"],
                                  horizontal_id=raw["horizontal"]))
        except (TypeError, KeyError):
            raise SpecParseError(f"gates[{i}]: need 'merge', 'vertical', 'horizontal'") from None

    g = GraphSpec(name=name, nodes=tuple(nodes), edges=tuple(edges), gates=tuple(gates))
    violations = validate(g)
    if violations:
        raise SpecParseError("invalid graph: " + "; ".join(violations))
    return g
