"""Multi-scale decoders as explicit DAGs.

Three topologies over the same node grid idea: the dense nested-skip
decoder (``unetpp``), the full-scale aggregation decoder (``unet3p``), and
the pruned hybrid (``roadsegv2``) that keeps only adjacent/first same-scale
edges plus full inter-scale edges into each row's final node.  Graph
construction, execution, and analytic parameter/MAC accounting are kept
separate so the cost comparisons are exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ContractError

TOPOLOGY_KINDS = ("roadsegv2", "unetpp", "unet3p")
BLOCK_KINDS = ("basic", "depthwise-separable")
# mirrors the published comparison: the pruned decoder runs separable
# blocks, the two baselines run basic ones
DEFAULT_BLOCK = {"roadsegv2": "depthwise-separable", "unetpp": "basic",
                 "unet3p": "basic"}

SAME_SCALE = "same-scale"
UPSAMPLE = "upsample"
DOWNSAMPLE = "downsample"


@dataclass(frozen=True)
class Edge:
    src: tuple
    dst: tuple
    kind: str


@dataclass(frozen=True)
class ConvBlockSpec:
    """Analytic cost model of one node block (normalization not included)."""

    kind: str
    cin: int
    cout: int
    kernel: int = 3

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ContractError(f"unknown block kind {self.kind!r}")
        if self.cin < 1 or self.cout < 1:
            raise ContractError("channel counts must be positive")

    def param_count(self) -> int:
        k2 = self.kernel * self.kernel
        if self.kind == "basic":
            return self.cin * self.cout * k2 + self.cout
        return self.cin * k2 + self.cin + self.cin * self.cout + self.cout

    def mac_count(self, h: int, w: int) -> int:
        k2 = self.kernel * self.kernel
        if self.kind == "basic":
            return self.cin * self.cout * k2 * h * w
        return (self.cin * k2 + self.cin * self.cout) * h * w


@dataclass
class DecoderGraph:
    kind: str
    levels: int
    channels: tuple
    nodes: frozenset
    edges: tuple
    block_kind: str
    output_node: tuple

    def incoming(self, node):
        return [e for e in self.edges if e.dst == node]

    def input_nodes(self):
        return sorted(n for n in self.nodes if n[1] == 0 and not self.incoming(n))

    def compute_nodes(self):
        """Non-input nodes in deterministic topological order."""
        order = topological_order(self)
        return [n for n in order if self.incoming(n)]

    def node_in_channels(self, node) -> int:
        return sum(self.channels[e.src[0]] for e in self.incoming(node))


def topological_order(graph: DecoderGraph):
    """Kahn's algorithm with sorted tie-breaking; rejects cycles."""
    indeg = {n: 0 for n in graph.nodes}
    out = {n: [] for n in graph.nodes}
    for e in graph.edges:
        indeg[e.dst] += 1
        out[e.src].append(e.dst)
    ready = sorted(n for n, d in indeg.items() if d == 0)
    order = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        for nxt in out[node]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                ready.append(nxt)
        ready.sort()
    if len(order) != len(graph.nodes):
        raise ContractError("decoder graph contains a cycle")
    return order


def _edge(src, dst):
    if src[0] == dst[0]:
        return Edge(src, dst, SAME_SCALE)
    return Edge(src, dst, UPSAMPLE if src[0] > dst[0] else DOWNSAMPLE)


def _unetpp_edges(k):
    edges = []
    for i in range(k):
        for j in range(1, k - i):
            for jp in range(j):
                edges.append(_edge((i, jp), (i, j)))
            edges.append(_edge((i + 1, j - 1), (i, j)))
    return edges


def _roadsegv2_edges(k, all_columns=False):
    edges = set()
    for i in range(k):
        last = k - 1 - i
        for j in range(1, last + 1):
            edges.add(_edge((i, j - 1), (i, j)))
            edges.add(_edge((i, 0), (i, j)))
            edges.add(_edge((i + 1, j - 1), (i, j)))
        columns = range(1, last + 1) if all_columns else ([last] if last >= 1 else [])
        for j in columns:
            for ip in range(i):                      # shallower rows: first nodes
                edges.add(_edge((ip, 0), (i, j)))
            for ip in range(i + 1, k):               # deeper rows: final nodes
                edges.add(_edge((ip, k - 1 - ip), (i, j)))
    return sorted(edges, key=lambda e: (e.dst, e.src, e.kind))


def _unet3p_edges(k):
    edges = []
    for i in range(k - 1):
        edges.append(_edge((i, 0), (i, 1)))
        for ip in range(i):
            edges.append(_edge((ip, 0), (i, 1)))
        for ip in range(i + 1, k - 1):
            edges.append(_edge((ip, 1), (i, 1)))
        edges.append(_edge((k - 1, 0), (i, 1)))
    return edges


def build_topology(kind: str, k: int, channels, block_kind: str = None,
                   all_columns: bool = False) -> DecoderGraph:
    """Construct one of the three decoder graphs for ``k`` scale rows."""
    if kind not in TOPOLOGY_KINDS:
        raise ContractError(f"unknown topology {kind!r}; choose from {TOPOLOGY_KINDS}")
    if k < 2:
        raise ContractError(f"need at least 2 levels, got {k}")
    channels = tuple(int(c) for c in channels)
    if len(channels) != k or any(c < 1 for c in channels):
        raise ContractError(f"need {k} positive channel counts, got {channels}")
    if block_kind is None:
        block_kind = DEFAULT_BLOCK[kind]
    if block_kind not in BLOCK_KINDS:
        raise ContractError(f"unknown block kind {block_kind!r}")

    if kind == "unetpp":
        edges = _unetpp_edges(k)
        output = (0, k - 1)
    elif kind == "roadsegv2":
        edges = _roadsegv2_edges(k, all_columns)
        output = (0, k - 1)
    else:
        edges = _unet3p_edges(k)
        output = (0, 1)

    nodes = {e.src for e in edges} | {e.dst for e in edges}
    nodes.update((i, 0) for i in range(k))
    graph = DecoderGraph(kind, k, channels, frozenset(nodes), tuple(edges),
                         block_kind, output)
    for e in graph.edges:
        if e.kind == UPSAMPLE and not e.src[0] > e.dst[0]:
            raise ContractError(f"upsample edge {e} must come from a deeper row")
        if e.kind == DOWNSAMPLE and not e.src[0] < e.dst[0]:
            raise ContractError(f"downsample edge {e} must come from a shallower row")
    topological_order(graph)  # raises on cycles
    return graph


class _DSBlock(nn.Module):
    def __init__(self, cin, cout, rng):
        self.dw = nn.Conv2d(cin, cin, 3, rng, depthwise=True)
        self.pw = nn.Conv2d(cin, cout, 1, rng)
        self.bn = nn.BatchNorm2d(cout)

    def __call__(self, x, training=False):
        return nn.relu(self.bn(self.pw(self.dw(x)), training))


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, rng):
        self.conv = nn.Conv2d(cin, cout, 3, rng)
        self.bn = nn.BatchNorm2d(cout)

    def __call__(self, x, training=False):
        return nn.relu(self.bn(self.conv(x), training))


class DecoderParams(nn.Module):
    """Learnable state for one graph: a block per compute node plus the
    probability head on the output node."""

    def __init__(self, graph: DecoderGraph, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.graph = graph
        self.node_order = graph.compute_nodes()
        make = _DSBlock if graph.block_kind == "depthwise-separable" else _BasicBlock
        self.blocks = [make(graph.node_in_channels(n), graph.channels[n[0]], rng)
                       for n in self.node_order]
        self.head = nn.Conv2d(graph.channels[graph.output_node[0]], 1, 1, rng)

    def block_for(self, node):
        return self.blocks[self.node_order.index(node)]


def _resample(x, src_row, dst_row):
    if src_row == dst_row:
        return x
    if src_row > dst_row:
        return nn.upsample_bilinear(x, 2 ** (src_row - dst_row))
    return nn.maxpool2d(x, 2 ** (dst_row - src_row))


def decode(graph: DecoderGraph, fused, params: DecoderParams,
           training: bool = False) -> nn.Tensor:
    """Run the graph over per-level feature maps; returns (1,H0,W0)
    freespace probabilities at the level-0 resolution."""
    if len(fused) != graph.levels:
        raise ContractError(f"need {graph.levels} feature maps, got {len(fused)}")
    fused = [nn.as_tensor(f) for f in fused]
    c0, h0, w0 = fused[0].shape
    for i, f in enumerate(fused):
        expect = (graph.channels[i], h0 >> i, w0 >> i)
        if f.shape != expect or (h0 >> i) << i != h0 or (w0 >> i) << i != w0:
            raise ContractError(
                f"level {i} must be dyadic {expect}, got {f.shape}")

    values = {(i, 0): fused[i] for i in range(graph.levels)}
    for node in params.node_order:
        parts = [_resample(values[e.src], e.src[0], node[0])
                 for e in graph.incoming(node)]
        stacked = nn.concat_channels(parts) if len(parts) > 1 else parts[0]
        values[node] = params.block_for(node)(stacked, training)
    return nn.sigmoid(params.head(values[graph.output_node]))


@dataclass
class CostReport:
    params: int
    macs: int
    per_node: dict = field(default_factory=dict)

    def as_text(self):
        lines = [f"{'node':>8}  {'params':>10}  {'macs':>12}"]
        for node, (p, m) in sorted(self.per_node.items(), key=lambda kv: str(kv[0])):
            lines.append(f"{str(node):>8}  {p:>10}  {m:>12}")
        lines.append(f"{'total':>8}  {self.params:>10}  {self.macs:>12}")
        return "\n".join(lines)


def cost_report(graph: DecoderGraph, input_size) -> CostReport:
    """Exact learnable-parameter and multiply-accumulate counts.

    ``input_size`` is the level-0 feature resolution; deeper rows are
    dyadically smaller.  Node blocks include their normalization's two
    per-channel parameters; resampling edges are free.
    """
    h0, w0 = input_size
    total_p = total_m = 0
    per_node = {}
    for node in graph.compute_nodes():
        cin = graph.node_in_channels(node)
        cout = graph.channels[node[0]]
        spec = ConvBlockSpec(graph.block_kind, cin, cout)
        h, w = h0 >> node[0], w0 >> node[0]
        p = spec.param_count() + 2 * cout
        m = spec.mac_count(h, w)
        per_node[node] = (p, m)
        total_p += p
        total_m += m
    head_c = graph.channels[graph.output_node[0]]
    total_p += head_c + 1
    total_m += head_c * h0 * w0
    per_node["head"] = (head_c + 1, head_c * h0 * w0)
    return CostReport(total_p, total_m, per_node)
