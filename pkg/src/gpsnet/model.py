"""Runtime realization of graph specs: gated merges, bottlenecked
branches, the full multi-branch model, and exact parameter counting.

Every conv node expands to conv -> batch norm -> ReLU. A gate merge
projects each of its two inputs to a single-channel soft mask, compares
the two masks through a 1x1 conv block, and mixes the inputs as
``O = Mv' * Xv + Mh' * Xh`` with per-position channel broadcast. Masks
are ReLU-terminated, hence non-negative, and are surfaced for
inspection on every forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import netspec
from .netspec import GraphSpec, SpecError, node_widths, topological_order
from .tensor import (BatchNormParams, ConvParams, Param, ShapeError, Tensor4,
                     add, batchnorm, concat_channels, conv2d, mul_channel_broadcast,
                     relu, split_channels)


@dataclass
class ConvBlock:
    """conv -> batch norm -> ReLU."""

    conv: ConvParams
    bn: BatchNormParams

    @classmethod
    def create(cls, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
               dilation: int = 1, name: str = "") -> "ConvBlock":
        return cls(conv=ConvParams.create(in_ch, out_ch, kernel, rng,
                                          dilation=dilation, name=name),
                   bn=BatchNormParams.create(out_ch, name=f"{name}.bn"))

    def apply(self, x: Tensor4, update_running: bool = True) -> Tensor4:
        return relu(batchnorm(conv2d(x, self.conv), self.bn, update_running))

    def params(self) -> list[Param]:
        return self.conv.params() + self.bn.params()

    def set_mode(self, mode: str) -> None:
        self.bn.mode = mode


@dataclass
class GateParams:
    """One gate: two single-channel projections and a two-channel comparison."""

    proj_v: ConvBlock          # C -> 1
    proj_h: ConvBlock          # C -> 1
    cmp: ConvBlock             # 2 -> 2

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator, name: str = "") -> "GateParams":
        return cls(proj_v=ConvBlock.create(channels, 1, 1, rng, name=f"{name}.proj_v"),
                   proj_h=ConvBlock.create(channels, 1, 1, rng, name=f"{name}.proj_h"),
                   cmp=ConvBlock.create(2, 2, 1, rng, name=f"{name}.cmp"))

    def params(self) -> list[Param]:
        return self.proj_v.params() + self.proj_h.params() + self.cmp.params()

    def set_mode(self, mode: str) -> None:
        for blk in (self.proj_v, self.proj_h, self.cmp):
            blk.set_mode(mode)


def gate_forward(gate: GateParams, x_v: Tensor4, x_h: Tensor4,
                 update_running: bool = True) -> tuple[Tensor4, Tensor4, Tensor4]:
    """Mix a (vertical, horizontal) feature pair through predicted soft masks.

    Returns the mixed features O plus the two emitted masks, each of
    shape (n, 1, h, w) and non-negative.
    """
    if x_v.shape != x_h.shape:
        raise ShapeError(f"gate inputs differ: {x_v.shape} vs {x_h.shape}")
    m_v = gate.proj_v.apply(x_v, update_running)
    m_h = gate.proj_h.apply(x_h, update_running)
    m_c = concat_channels([m_v, m_h])
    m_prime = gate.cmp.apply(m_c, update_running)
    m_v2, m_h2 = split_channels(m_prime, [1, 1])
    out = add(mul_channel_broadcast(x_v, m_v2), mul_channel_broadcast(x_h, m_h2))
    return out, m_v2, m_h2


def force_gate_masks(gate: GateParams, v_value: float, h_value: float) -> None:
    """Pin the emitted masks to constants regardless of input.

    Zeroing the comparison conv and routing its bias through a
    zero-gain batch norm makes both masks exact constants in train and
    eval mode; (1, 1) turns the gate into a plain elementwise sum.
    """
    gate.cmp.conv.weight.data[:] = 0.0
    gate.cmp.conv.bias.data[:] = (v_value, h_value)
    gate.cmp.bn.gamma.data[:] = 0.0
    gate.cmp.bn.beta.data[:] = (v_value, h_value)


# ---------------------------------------------------------------------------
# generic graph runtime


class GraphRuntime:
    """Executes a validated GraphSpec over the tensor engine.

    Nodes are evaluated in the deterministic topological order; conv
    kinds apply their ConvBlock, sum/gate merges combine the vertical
    and horizontal inputs, concat merges stack inputs in edge order.
    """

    def __init__(self, graph: GraphSpec, seed: int = 0):
        netspec.validate_or_raise(graph)
        self.graph = graph
        self.order = topological_order(graph)
        self.widths = node_widths(graph)
        self._nodes = {n.id: n for n in graph.nodes}
        rng = np.random.default_rng(seed)
        self.blocks: dict[str, ConvBlock] = {}
        self.gates: dict[str, GateParams] = {}
        gate_by_merge = {gt.merge_id: gt for gt in graph.gates}
        for nid in self.order:
            n = self._nodes[nid]
            if n.kind in netspec.CONV_KINDS:
                ins = graph.incoming(nid)
                if len(ins) != 1:
                    raise SpecError(f"conv node {nid} needs exactly one input")
                self.blocks[nid] = ConvBlock.create(
                    n.in_ch, n.out_ch, n.kernel, rng,
                    dilation=n.dilation or 1, name=nid)
            elif n.kind == "gate_merge":
                width = self.widths[gate_by_merge[nid].horizontal_id]
                self.gates[nid] = GateParams.create(width, rng, name=nid)
        exits = [n for n in graph.nodes if n.kind == "exit"]
        for ex in exits:
            if len(graph.incoming(ex.id)) != 1:
                raise SpecError(f"exit {ex.id} needs exactly one input")
        self.exit_id = exits[0].id
        self.entrance_ids = [n.id for n in graph.nodes if n.kind == "entrance"]

    def set_mode(self, mode: str) -> None:
        for blk in self.blocks.values():
            blk.set_mode(mode)
        for gate in self.gates.values():
            gate.set_mode(mode)

    def _merge_inputs(self, nid: str, values: dict[str, Tensor4]) -> list[Tensor4]:
        return [values[e.from_id] for e in self.graph.incoming(nid)]

    def forward(self, x: Tensor4, train: bool = False, update_running: bool = True
                ) -> tuple[Tensor4, dict[str, tuple[Tensor4, Tensor4]]]:
        self.set_mode("train" if train else "eval")
        values: dict[str, Tensor4] = {}
        masks: dict[str, tuple[Tensor4, Tensor4]] = {}
        for nid in self.order:
            n = self._nodes[nid]
            if n.kind == "entrance":
                if x.channels != n.out_ch:
                    raise ShapeError(f"entrance {nid} expects {n.out_ch} channels, "
                                     f"got {x.channels}")
                values[nid] = x
            elif n.kind in netspec.CONV_KINDS:
                src = self.graph.incoming(nid)[0].from_id
                values[nid] = self.blocks[nid].apply(values[src], update_running)
            elif n.kind == "sum_merge":
                ins = self._ordered_pair(nid, values)
                out = ins[0]
                for t in ins[1:]:
                    out = add(out, t)
                values[nid] = out
            elif n.kind == "gate_merge":
                edges = {e.role: e.from_id for e in self.graph.incoming(nid)}
                out, m_v, m_h = gate_forward(self.gates[nid],
                                             values[edges["vertical"]],
                                             values[edges["horizontal"]],
                                             update_running)
                values[nid] = out
                masks[nid] = (m_v, m_h)
            elif n.kind == "concat_merge":
                values[nid] = concat_channels(self._merge_inputs(nid, values)) \
                    if len(self.graph.incoming(nid)) > 1 \
                    else self._merge_inputs(nid, values)[0]
            elif n.kind == "exit":
                values[nid] = self._merge_inputs(nid, values)[0]
        return values[self.exit_id], masks

    def _ordered_pair(self, nid: str, values: dict[str, Tensor4]) -> list[Tensor4]:
        # vertical first to mirror the gate's mixing order
        ins = self.graph.incoming(nid)
        order = sorted(range(len(ins)), key=lambda i: (ins[i].role != "vertical", i))
        return [values[ins[i].from_id] for i in order]

    def named_params(self) -> list[tuple[str, Param]]:
        out = []
        for nid in self.order:
            if nid in self.blocks:
                blk = self.blocks[nid]
                out += [(f"{nid}.weight", blk.conv.weight), (f"{nid}.bias", blk.conv.bias),
                        (f"{nid}.bn.gamma", blk.bn.gamma), (f"{nid}.bn.beta", blk.bn.beta)]
            if nid in self.gates:
                gate = self.gates[nid]
                for part, blk in (("proj_v", gate.proj_v), ("proj_h", gate.proj_h),
                                  ("cmp", gate.cmp)):
                    out += [(f"{nid}.{part}.weight", blk.conv.weight),
                            (f"{nid}.{part}.bias", blk.conv.bias),
                            (f"{nid}.{part}.bn.gamma", blk.bn.gamma),
                            (f"{nid}.{part}.bn.beta", blk.bn.beta)]
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for nid in self.order:
            if nid in self.blocks:
                blk = self.blocks[nid]
                out += [(f"{nid}.bn.running_mean", blk.bn.running_mean),
                        (f"{nid}.bn.running_var", blk.bn.running_var)]
            if nid in self.gates:
                gate = self.gates[nid]
                for part, blk in (("proj_v", gate.proj_v), ("proj_h", gate.proj_h),
                                  ("cmp", gate.cmp)):
                    out += [(f"{nid}.{part}.bn.running_mean", blk.bn.running_mean),
                            (f"{nid}.{part}.bn.running_var", blk.bn.running_var)]
        return out

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]


# ---------------------------------------------------------------------------
# branch view and full model


@dataclass
class BranchParams:
    """The four conv blocks of one bottlenecked branch."""

    squeeze: ConvBlock
    conv_a: ConvBlock
    conv_b: ConvBlock
    excite: ConvBlock


def branch_forward(branch: BranchParams, entrance: Tensor4,
                   vertical_feeds: dict[int, Tensor4 | None] | None = None,
                   gates: dict[int, GateParams | None] | None = None,
                   update_running: bool = True
                   ) -> tuple[Tensor4, dict[int, Tensor4], dict[int, tuple[Tensor4, Tensor4]]]:
    """Run one branch: squeeze -> [merge, conv_a] -> [merge, conv_b] -> excite.

    `vertical_feeds[l]` is the previous branch's layer-l conv output (or
    None for the first branch); a gate at layer l mixes it with the
    horizontal path, otherwise the two are summed. Returns the branch
    output, the per-layer conv outputs for feeding the next branch, and
    any emitted gate masks.
    """
    vertical_feeds = vertical_feeds or {}
    gates = gates or {}
    h = branch.squeeze.apply(entrance, update_running)
    intermediates: dict[int, Tensor4] = {}
    masks: dict[int, tuple[Tensor4, Tensor4]] = {}
    for l, block in ((1, branch.conv_a), (2, branch.conv_b)):
        feed = vertical_feeds.get(l)
        gate = gates.get(l)
        if gate is not None:
            if feed is None:
                raise SpecError(f"gate at layer {l} has no vertical feed")
            h, m_v, m_h = gate_forward(gate, feed, h, update_running)
            masks[l] = (m_v, m_h)
        elif feed is not None:
            h = add(feed, h)
        h = block.apply(h, update_running)
        intermediates[l] = h
    out = branch.excite.apply(h, update_running)
    return out, intermediates, masks


class SuperNetModel:
    """Multi-branch gated model: a graph runtime plus the fusing 1x1 conv."""

    def __init__(self, graph: GraphSpec, head_ch: int, seed: int = 0):
        self.runtime = GraphRuntime(graph, seed=seed)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        fuse_in = self.runtime.widths[self.runtime.exit_id]
        self.fuse = ConvBlock.create(fuse_in, head_ch, 1, rng, name="fuse")
        self.head_ch = head_ch

    @property
    def graph(self) -> GraphSpec:
        return self.runtime.graph

    @property
    def gates(self) -> dict[str, GateParams]:
        return self.runtime.gates

    def branches(self) -> list[BranchParams]:
        """Group the runtime's conv blocks into per-branch views."""
        by_branch: dict[int, dict[str, ConvBlock]] = {}
        for n in self.graph.nodes:
            if n.kind in netspec.CONV_KINDS and n.branch_index is not None:
                slot = {"squeeze1x1": "squeeze", "excite1x1": "excite"}.get(n.kind)
                if slot is None:
                    slot = "conv_a" if n.layer_index == 1 else "conv_b"
                by_branch.setdefault(n.branch_index, {})[slot] = self.runtime.blocks[n.id]
        return [BranchParams(**by_branch[b]) for b in sorted(by_branch)]

    def forward(self, x: Tensor4, train: bool = False, update_running: bool = True
                ) -> tuple[Tensor4, dict[str, tuple[Tensor4, Tensor4]]]:
        feats, masks = self.runtime.forward(x, train=train,
                                            update_running=update_running)
        self.fuse.set_mode("train" if train else "eval")
        return self.fuse.apply(feats, update_running), masks

    def named_params(self) -> list[tuple[str, Param]]:
        out = self.runtime.named_params()
        out += [("fuse.weight", self.fuse.conv.weight), ("fuse.bias", self.fuse.conv.bias),
                ("fuse.bn.gamma", self.fuse.bn.gamma), ("fuse.bn.beta", self.fuse.bn.beta)]
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = self.runtime.named_buffers()
        out += [("fuse.bn.running_mean", self.fuse.bn.running_mean),
                ("fuse.bn.running_var", self.fuse.bn.running_var)]
        return out

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params())


def supernet_forward(model: SuperNetModel, x: Tensor4, train: bool = False,
                     update_running: bool = True
                     ) -> tuple[Tensor4, dict[str, tuple[Tensor4, Tensor4]]]:
    return model.forward(x, train=train, update_running=update_running)


# ---------------------------------------------------------------------------
# parameter counting


def _conv_count(in_ch: int, out_ch: int, kernel: int,
                include_bias: bool, include_bn: bool) -> int:
    n = in_ch * out_ch * kernel * kernel
    if include_bias:
        n += out_ch
    if include_bn:
        n += 2 * out_ch
    return n


def gate_param_count(channels: int, include_bias: bool = True,
                     include_bn: bool = True) -> int:
    return (2 * _conv_count(channels, 1, 1, include_bias, include_bn)
            + _conv_count(2, 2, 1, include_bias, include_bn))


def param_breakdown(graph: GraphSpec, include_bias: bool = True,
                    include_bn: bool = True) -> dict[str, int]:
    """Exact per-node (and per-gate) parameter counts for a graph."""
    widths = node_widths(graph)
    out: dict[str, int] = {}
    for n in graph.nodes:
        if n.kind in netspec.CONV_KINDS:
            out[n.id] = _conv_count(n.in_ch, n.out_ch, n.kernel,
                                    include_bias, include_bn)
    for gt in graph.gates:
        out[f"gate:{gt.merge_id}"] = gate_param_count(widths[gt.horizontal_id],
                                                      include_bias, include_bn)
    return out


def count_params(graph_or_model, include_bias: bool = True,
                 include_bn: bool = True) -> int:
    """Exact parameter count of a GraphSpec (given its channel config) or a
    built model (which adds the fuse block)."""
    if isinstance(graph_or_model, SuperNetModel):
        return graph_or_model.num_params()
    return sum(param_breakdown(graph_or_model, include_bias, include_bn).values())
