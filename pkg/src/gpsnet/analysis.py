"""Static receptive-field and sample-rate analysis over graph specs.

Closed forms cover the single dilated conv, the parallel pyramid with
distinct rates, serial chains, and the offset-range formula for
deformable sampling. A brute-force enumerator walks any GraphSpec and
computes the exact set of input offsets each exit and each branch can
see: entrances start at {(0,0)}, a 3x3 conv with dilation r takes the
Minkowski sum with {-r,0,r}^2, 1x1 convs and gates pass sets through
(gates reweight features, they never restrict static support), and
merges take the union of their inputs. The enumerator is the oracle the
closed forms are checked against, and the report reproduces the
standard method-comparison table (RF side, SR, parameter count).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import netspec
from .model import GraphRuntime, count_params, force_gate_masks
from .netspec import (ASPP_RATES, GraphSpec, TUNED_GRID, UNTUNED_GRID,
                      longest_dilation_path, topological_order)
from .tensor import ConfigError, Tensor4


@dataclass(frozen=True)
class SamplePositionSet:
    """Set of integer (dx, dy) input offsets reachable from one output
    position, with its bounding box (min_x, max_x, min_y, max_y)."""

    offsets: frozenset
    bbox: tuple[int, int, int, int]

    @classmethod
    def from_offsets(cls, offsets) -> "SamplePositionSet":
        offs = frozenset((int(x), int(y)) for x, y in offsets)
        if not offs:
            raise ValueError("empty sample position set")
        xs = [o[0] for o in offs]
        ys = [o[1] for o in offs]
        return cls(offsets=offs, bbox=(min(xs), max(xs), min(ys), max(ys)))

    @property
    def count(self) -> int:
        return len(self.offsets)

    @property
    def side(self) -> int:
        min_x, max_x, min_y, max_y = self.bbox
        return max(max_x - min_x, max_y - min_y) + 1

    def sorted_offsets(self) -> list[tuple[int, int]]:
        return sorted(self.offsets, key=lambda o: (o[1], o[0]))


@dataclass
class RfSrResult:
    """One method's receptive-field side, area, sample count and rate."""

    method: str
    rf_side: int
    rf_area: int
    sample_count: int
    sr: float | None
    params: int | None = None
    degenerate: bool = False
    note: str = ""


# ---------------------------------------------------------------------------
# closed forms


def rf_sr_atrous(k: int, r: int) -> RfSrResult:
    """Single dilated conv: side r*k - r + 1, k*k samples."""
    if k % 2 == 0:
        raise ConfigError("even kernels are unsupported")
    if r < 1:
        raise ConfigError("dilation must be positive")
    side = r * k - r + 1
    return RfSrResult(method="atrous", rf_side=side, rf_area=side * side,
                      sample_count=k * k, sr=(k * k) / (side * side))


def rf_sr_aspp(k: int, rates) -> RfSrResult:
    """Parallel branches: side from the largest rate; with pairwise
    distinct rates the branches share only the center tap, giving
    B*k^2 - B + 1 samples. Duplicate rates invalidate the closed-form
    count, in which case the enumerated count is reported."""
    rates = list(rates)
    if not rates or any(r < 1 for r in rates):
        raise ConfigError("rates must be non-empty and positive")
    if k % 2 == 0:
        raise ConfigError("even kernels are unsupported")
    b = len(rates)
    side = max(rates) * (k - 1) + 1
    if len(set(rates)) == len(rates):
        count = b * k * k - b + 1
        note = ""
    else:
        if k != 3:
            raise ConfigError("enumeration fallback needs k == 3")
        g = netspec.build_aspp(sorted(set(rates)), in_ch=1, branch_ch=1)
        count = enumerate_samples(g).exit.count
        note = "duplicate rates: closed-form count invalid, reporting enumeration"
    return RfSrResult(method="aspp", rf_side=side, rf_area=side * side,
                      sample_count=count, sr=count / (side * side), note=note)


def _serial_1d(chain) -> set[int]:
    pts = {0}
    for k, r in chain:
        taps = [r * (j - (k - 1) // 2) for j in range(k)]
        pts = {p + t for p in pts for t in taps}
    return pts


def rf_sr_serial(chain) -> RfSrResult:
    """Cascade of dilated convs: side is one plus the sum of r*(k-1);
    the sample set is the iterated Minkowski sum of the tap patterns,
    which factors into a 1-D sum squared."""
    chain = [tuple(c) for c in chain]
    if not chain:
        return RfSrResult(method="serial", rf_side=1, rf_area=1,
                          sample_count=1, sr=1.0)
    for k, r in chain:
        if k % 2 == 0:
            raise ConfigError("even kernels are unsupported")
        if r < 1:
            raise ConfigError("dilation must be positive")
    side = sum(r * (k - 1) for k, r in chain) + 1
    count_1d = len(_serial_1d(chain))
    count = count_1d * count_1d
    return RfSrResult(method="serial", rf_side=side, rf_area=side * side,
                      sample_count=count, sr=count / (side * side))


def rf_sr_dcn(offsets, k: int) -> RfSrResult:
    """Offset-range formula, kept verbatim: RF is the product of the x
    and y ranges with no +1 term, so a regular 3x3 grid scores 4 and
    coincident offsets degenerate to RF 0 (flagged, SR undefined)."""
    offsets = [tuple(o) for o in offsets]
    if not offsets:
        raise ConfigError("offset list must be non-empty")
    xs = [o[0] for o in offsets]
    ys = [o[1] for o in offsets]
    rf = (max(xs) - min(xs)) * (max(ys) - min(ys))
    if rf == 0:
        return RfSrResult(method="dcn", rf_side=0, rf_area=0,
                          sample_count=len(set(offsets)), sr=None, degenerate=True,
                          note="all offsets span a zero range: RF 0, SR undefined")
    return RfSrResult(method="dcn", rf_side=rf, rf_area=rf,
                      sample_count=len(set(offsets)), sr=(k * k) / rf,
                      note="range product convention (no +1), differs from the "
                           "side-length convention of the other formulas")


# ---------------------------------------------------------------------------
# brute-force enumerator


@dataclass
class EnumerationResult:
    exit: SamplePositionSet
    branches: dict[int, SamplePositionSet]
    nodes: dict[str, SamplePositionSet]


def _dilate_grid(grid: np.ndarray, r: int) -> np.ndarray:
    out = np.zeros_like(grid)
    n = grid.shape[0]
    for dy in (-r, 0, r):
        for dx in (-r, 0, r):
            ys = slice(max(0, dy), n + min(0, dy))
            xs = slice(max(0, dx), n + min(0, dx))
            ys_src = slice(max(0, -dy), n + min(0, -dy))
            xs_src = slice(max(0, -dx), n + min(0, -dx))
            out[ys, xs] |= grid[ys_src, xs_src]
    return out


def _grid_to_set(grid: np.ndarray, center: int) -> SamplePositionSet:
    ys, xs = np.nonzero(grid)
    return SamplePositionSet.from_offsets(
        (int(x) - center, int(y) - center) for y, x in zip(ys, xs))


def enumerate_samples(g: GraphSpec) -> EnumerationResult:
    """Exact sample-position sets at every node, each branch, and the exit."""
    netspec.validate_or_raise(g)
    nodes = {n.id: n for n in g.nodes}
    for n in g.nodes:
        if n.kind in netspec.CONV_KINDS and n.kernel not in (1, 3):
            raise ConfigError(f"node {n.id}: kernel {n.kernel} unsupported")
    bound = longest_dilation_path(g)
    size = 2 * bound + 1
    grids: dict[str, np.ndarray] = {}
    order = topological_order(g)
    for nid in order:
        n = nodes[nid]
        ins = [grids[e.from_id] for e in g.incoming(nid)]
        if n.kind == "entrance":
            grid = np.zeros((size, size), dtype=bool)
            grid[bound, bound] = True
        elif n.kind == "atrous3x3":
            grid = _dilate_grid(ins[0], n.dilation)
        elif len(ins) == 1:
            grid = ins[0]
        else:
            grid = ins[0].copy()
            for other in ins[1:]:
                grid |= other
        grids[nid] = grid

    node_sets = {nid: _grid_to_set(grids[nid], bound) for nid in order}
    exit_id = next(n.id for n in g.nodes if n.kind == "exit")

    branch_last: dict[int, str] = {}
    for nid in order:
        b = nodes[nid].branch_index
        if b is not None:
            branch_last[b] = nid
    branches = {b: node_sets[nid] for b, nid in sorted(branch_last.items())}
    return EnumerationResult(exit=node_sets[exit_id], branches=branches,
                             nodes=node_sets)


def rf_sr_gps(g: GraphSpec) -> RfSrResult:
    """Multi-branch result: RF side is the largest per-branch bounding
    box; SR divides the global union count by that side squared."""
    enum = enumerate_samples(g)
    sides = [sps.side for sps in enum.branches.values()] or [enum.exit.side]
    side = max(sides)
    count = enum.exit.count
    return RfSrResult(method=g.name, rf_side=side, rf_area=side * side,
                      sample_count=count, sr=count / (side * side))


# ---------------------------------------------------------------------------
# runtime cross-check


def impulse_support(g: GraphSpec, in_ch: int | None = None) -> SamplePositionSet:
    """Nonzero support of the runtime impulse response of the graph,
    built with all-ones conv weights, zero biases, pass-through batch
    norm (eval mode) and unit gates. Independent of the enumerator; used
    to tie the static analysis to the execution engine."""
    if in_ch is not None:
        entr = [dataclasses.replace(n, out_ch=in_ch) if n.kind == "entrance" else n
                for n in g.nodes]
        g = dataclasses.replace(g, nodes=tuple(entr))
    rt = GraphRuntime(g, seed=0)
    for blk in rt.blocks.values():
        blk.conv.weight.data[:] = 1.0
        blk.conv.bias.data[:] = 0.0
        blk.bn.gamma.data[:] = 1.0
        blk.bn.beta.data[:] = 0.0
        blk.bn.running_mean[:] = 0.0
        blk.bn.running_var[:] = 1.0
    for gate in rt.gates.values():
        force_gate_masks(gate, 1.0, 1.0)
    bound = longest_dilation_path(g)
    size = 2 * bound + 1
    width = rt.widths[rt.entrance_ids[0]]
    x = np.zeros((1, width, size, size))
    x[:, :, bound, bound] = 1.0
    out, _ = rt.forward(Tensor4(x), train=False)
    support = (np.abs(out.data) > 0).any(axis=(0, 1))
    ys, xs = np.nonzero(support)
    return SamplePositionSet.from_offsets(
        (int(cx) - bound, int(cy) - bound) for cy, cx in zip(ys, xs))


# ---------------------------------------------------------------------------
# builtin configurations and the comparison report

BUILTIN_NAMES = ("aspp", "denseaspp", "supernet-untuned", "supernet-tuned",
                 "gps-untuned", "gps-tuned")

# channel widths used for the parameter column of the comparison table;
# the grid bottleneck width is the best fit to the reference counts
TABLE_IN_CH = 2048
TABLE_BRANCH_CH = 256
TABLE_BOTTLENECK_CH = 238
TABLE_OUT_CH = 256

# reference (rf_side, sr, params in millions) for delta reporting
REFERENCE_STATS = {
    "aspp": (73, 0.006, 18.9),
    "denseaspp": (147, 0.070, 25.6),
    "supernet-untuned": (219, 0.125, 6.29),
    "gps-untuned": (219, 0.125, 6.3),
    "gps-tuned": (199, 0.843, 6.3),
}


def builtin_graph(name: str, *, in_ch: int = TABLE_IN_CH,
                  branch_ch: int = TABLE_BRANCH_CH,
                  bottleneck_ch: int = TABLE_BOTTLENECK_CH,
                  out_ch: int = TABLE_OUT_CH) -> GraphSpec:
    """Construct one of the named reference graphs."""
    if name == "aspp":
        g = netspec.build_aspp(ASPP_RATES, in_ch, branch_ch)
    elif name == "denseaspp":
        g = netspec.build_denseaspp(ASPP_RATES, in_ch, branch_ch)
    elif name in ("supernet-untuned", "supernet-tuned", "gps-untuned", "gps-tuned"):
        grid = UNTUNED_GRID if name.endswith("untuned") else TUNED_GRID
        gated = name.startswith("gps")
        g = netspec.build_supernet(grid, in_ch, bottleneck_ch, out_ch, gated=gated)
    else:
        raise netspec.SpecError(f"unknown builtin {name!r}; choose from {BUILTIN_NAMES}")
    return dataclasses.replace(g, name=name)


def _dilation_setting(g: GraphSpec) -> str:
    convs = [n for n in g.nodes if n.kind == "atrous3x3"]
    by_branch: dict[int, list[tuple[int, int]]] = {}
    for n in convs:
        by_branch.setdefault(n.branch_index or 0, []).append(
            (n.layer_index or 0, n.dilation))
    per_branch = [[r for _, r in sorted(v)] for _, v in sorted(by_branch.items())]
    if all(len(v) == 1 for v in per_branch):
        return "{" + ",".join(str(v[0]) for v in per_branch) + "}"
    return "{" + ",".join("(" + ",".join(map(str, v)) + ")" for v in per_branch) + "}"


@dataclass
class ReportRow:
    method: str
    dilations: str
    rf_side: int
    rf_area: int
    sample_count: int
    sr: float
    params: int
    per_branch_sides: list[int]
    per_branch_counts: list[int]
    closed_form_side: int
    closed_form_count: int | None
    closed_form_delta: dict
    reference: dict | None


@dataclass
class AnalysisReport:
    rows: list[ReportRow]
    params_note: str = "weights only (no bias, no batch-norm affine)"

    def to_json(self) -> str:
        obj = {"params_note": self.params_note,
               "rows": [dataclasses.asdict(r) for r in self.rows]}
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        lines = [
            "method             dilations                          RF    SR      samples  params",
            "-" * 96,
        ]
        for r in self.rows:
            params_m = f"{r.params / 1e6:.3g}M"
            lines.append(f"{r.method:<18} {r.dilations:<34} {r.rf_side:<5} "
                         f"{r.sr:<7.3f} {r.sample_count:<8} {params_m} ({r.params})")
            d = r.closed_form_delta
            extras = [f"closed-form side {r.closed_form_side} (delta {d['side']})"]
            if r.closed_form_count is not None:
                extras.append(f"closed-form count {r.closed_form_count} "
                              f"(delta {d['count']})")
            if r.reference is not None:
                ref = r.reference
                extras.append(f"reference RF {ref['rf_side']} (delta {ref['rf_side_delta']:+d}), "
                              f"SR {ref['sr']:.3f} (delta {ref['sr_delta']:+.3f}), "
                              f"params {ref['params_m']}M (delta {ref['params_m_delta']:+.2f}M)")
            if r.per_branch_sides:
                extras.append("per-branch sides " + ",".join(map(str, r.per_branch_sides)))
            for e in extras:
                lines.append(f"    {e}")
        lines.append("-" * 96)
        lines.append(f"params: {self.params_note}")
        return "\n".join(lines) + "\n"


def _closed_form_for(g: GraphSpec) -> tuple[int, int | None]:
    """Closed-form RF side (always derivable from the longest dilation
    path) and sample count where a formula exists for the family."""
    side = 2 * longest_dilation_path(g) + 1
    convs = [n for n in g.nodes if n.kind == "atrous3x3"]
    entr = {n.id for n in g.nodes if n.kind == "entrance"}
    count: int | None = None
    if convs and all(e.from_id in entr for c in convs for e in g.incoming(c.id)):
        rates = [c.dilation for c in convs]
        if len(set(rates)) == len(rates):
            count = rf_sr_aspp(3, rates).sample_count
    elif convs and _is_serial_chain(g):
        count = rf_sr_serial([(c.kernel, c.dilation)
                              for c in sorted(convs, key=lambda n: n.layer_index or 0)
                              ]).sample_count
    return side, count


def _is_serial_chain(g: GraphSpec) -> bool:
    convs = [n for n in g.nodes if n.kind == "atrous3x3"]
    return all(len(g.incoming(c.id)) == 1 and len(g.outgoing(c.id)) == 1
               for c in convs) and not any(n.kind == "concat_merge" and
                                           len(g.incoming(n.id)) > 1 for n in g.nodes)


def analysis_report(graphs) -> AnalysisReport:
    """Build the method-comparison report: one row per graph with
    enumerated RF/SR, parameter counts, closed-form deltas, and deltas
    against the known reference stats for builtin names."""
    rows = []
    for g in graphs:
        res = rf_sr_gps(g)
        enum = enumerate_samples(g)
        params = count_params(g, include_bias=False, include_bn=False)
        cf_side, cf_count = _closed_form_for(g)
        delta = {"side": res.rf_side - cf_side,
                 "count": None if cf_count is None else res.sample_count - cf_count}
        reference = None
        if g.name in REFERENCE_STATS:
            ref_side, ref_sr, ref_pm = REFERENCE_STATS[g.name]
            reference = {
                "rf_side": ref_side, "sr": ref_sr, "params_m": ref_pm,
                "rf_side_delta": res.rf_side - ref_side,
                "sr_delta": round(res.sr - ref_sr, 6),
                "params_m_delta": round(params / 1e6 - ref_pm, 4),
            }
        rows.append(ReportRow(
            method=g.name, dilations=_dilation_setting(g),
            rf_side=res.rf_side, rf_area=res.rf_area,
            sample_count=res.sample_count, sr=res.sr, params=params,
            per_branch_sides=[s.side for _, s in sorted(enum.branches.items())],
            per_branch_counts=[s.count for _, s in sorted(enum.branches.items())],
            closed_form_side=cf_side, closed_form_count=cf_count,
            closed_form_delta=delta, reference=reference))
    return AnalysisReport(rows=rows)


# ---------------------------------------------------------------------------
# sample-position renders


def samples_csv(sps: SamplePositionSet) -> bytes:
    lines = ["dx,dy"] + [f"{x},{y}" for x, y in sps.sorted_offsets()]
    return ("\n".join(lines) + "\n").encode("ascii")


def samples_pgm(sps: SamplePositionSet) -> bytes:
    """Plain (P2) graymap of the offset set on a centered square grid."""
    min_x, max_x, min_y, max_y = sps.bbox
    half = max(abs(min_x), abs(max_x), abs(min_y), abs(max_y))
    side = 2 * half + 1
    rows = []
    offs = sps.offsets
    for y in range(-half, half + 1):
        rows.append(" ".join("255" if (x, y) in offs else "0"
                             for x in range(-half, half + 1)))
    header = f"P2\n{side} {side}\n255\n"
    return (header + "\n".join(rows) + "\n").encode("ascii")
