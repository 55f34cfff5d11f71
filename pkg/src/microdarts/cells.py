"""Cell search space: per-edge mixed operations and genotype derivation.

A cell takes the outputs of the two previous cells, runs N intermediate
nodes (each summing one mixed-operation edge from every earlier state),
and concatenates the intermediate nodes as its output. Normal cells keep
the spatial size; reduction cells stride the edges leaving the two inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .tensor import (
    Tensor,
    add,
    add_n,
    backward,
    concat_channels,
    mul,
    softmax,
    sub,
    take,
    vector_max,
)

__all__ = [
    "WEIGHTING_MODES",
    "AlphaTable",
    "Genotype",
    "InvariantError",
    "MixedEdge",
    "SearchCell",
    "SearchNetwork",
    "FixedNetwork",
    "edge_coefficients",
    "edge_coefficient_values",
    "derive_genotype",
    "maxw_argmax_report",
    "darts_v2_genotype",
    "n_edges",
]

WEIGHTING_MODES = ("scalar", "max-w")

GENOTYPE_SPACES = ("sharpdarts", "darts+ssc")


class InvariantError(AssertionError):
    """A checked mathematical invariant failed; implementation defect."""


def n_edges(nodes: int) -> int:
    """Mixed edges feeding ``nodes`` intermediate nodes: node j has j+2 inputs."""
    return sum(j + 2 for j in range(nodes))


def edge_coefficients(alpha: Tensor, mode: str) -> Tensor:
    """Architecture coefficients for one decision site.

    scalar: w = softmax(alpha).
    max-w:  c_i = 1 - max(w) + w_i, computed as (w - max(w)) + 1 so the
    argmax coefficient is exactly 1.0 in floating point. The max keeps its
    gradient path; the argmax branch cancels algebraically.
    """
    if alpha.size == 0:
        raise ValueError("empty alpha vector")
    w = softmax(alpha)
    if mode == "scalar":
        return w
    if mode == "max-w":
        return add(sub(w, vector_max(w)), Tensor(1.0))
    raise ValueError(f"unknown weighting mode {mode!r}, expected one of {WEIGHTING_MODES}")


def edge_coefficient_values(alpha_values: np.ndarray, mode: str) -> np.ndarray:
    """Graph-free coefficient computation for derivation and reports."""
    z = alpha_values - alpha_values.max()
    e = np.exp(z)
    w = e / e.sum()
    if mode == "scalar":
        return w
    if mode == "max-w":
        return (w - w.max()) + 1.0
    raise ValueError(f"unknown weighting mode {mode!r}, expected one of {WEIGHTING_MODES}")


class AlphaTable:
    """Architecture parameters: one alpha vector per (cell type, edge)."""

    def __init__(self, catalog=L.PRIMITIVES, nodes: int = 4, mode: str = "scalar",
                 rng=None, init_std: float = 1e-3):
        if mode not in WEIGHTING_MODES:
            raise ValueError(f"unknown weighting mode {mode!r}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.catalog = tuple(catalog)
        self.nodes = nodes
        self.mode = mode
        k = len(self.catalog)
        e = n_edges(nodes)
        self.normal = [Tensor(init_std * rng.standard_normal(k), requires_grad=True)
                       for _ in range(e)]
        self.reduce = [Tensor(init_std * rng.standard_normal(k), requires_grad=True)
                       for _ in range(e)]

    def tensors(self) -> list[Tensor]:
        return self.normal + self.reduce

    def to_dict(self) -> dict:
        return {
            "space": "cell",
            "catalog": list(self.catalog),
            "nodes": self.nodes,
            "mode": self.mode,
            "normal": [a.value.tolist() for a in self.normal],
            "reduce": [a.value.tolist() for a in self.reduce],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AlphaTable":
        table = cls(catalog=tuple(d["catalog"]), nodes=int(d["nodes"]), mode=d["mode"])
        for dest, rows in ((table.normal, d["normal"]), (table.reduce, d["reduce"])):
            if len(rows) != len(dest):
                raise ValueError(
                    f"alpha table has {len(rows)} edges, expected {len(dest)}"
                )
            for t, row in zip(dest, rows):
                row = np.asarray(row, dtype=np.float64)
                if row.shape != t.value.shape:
                    raise ValueError("alpha vector length does not match catalog size")
                t.value = row
        return table


# ---------------------------------------------------------------------------
# genotypes
# ---------------------------------------------------------------------------


@dataclass
class Genotype:
    """Discrete cell description: (primitive, source) pairs, two per node."""

    normal: list[tuple[str, int]]
    reduce: list[tuple[str, int]]
    space: str = "sharpdarts"

    def __post_init__(self):
        self.normal = [(str(p), int(s)) for p, s in self.normal]
        self.reduce = [(str(p), int(s)) for p, s in self.reduce]
        self.validate()

    @property
    def nodes(self) -> int:
        return len(self.normal) // 2

    def validate(self):
        if self.space not in GENOTYPE_SPACES:
            raise ValueError(f"unknown genotype space {self.space!r}")
        for name, entries in (("normal", self.normal), ("reduce", self.reduce)):
            if len(entries) % 2 or not entries:
                raise ValueError(f"{name} cell needs two entries per node")
            for idx, (prim, src) in enumerate(entries):
                node = idx // 2
                if prim == "none":
                    raise ValueError("genotype primitives must be non-none")
                if prim not in L.PRIMITIVES:
                    raise ValueError(f"unknown primitive {prim!r} in genotype")
                if not 0 <= src < node + 2:
                    raise ValueError(
                        f"{name} node {node} references source {src}, outside [0, {node + 2})"
                    )
        if len(self.normal) != len(self.reduce):
            raise ValueError("normal and reduce cells must have the same node count")

    def to_dict(self) -> dict:
        return {
            "normal": [[p, s] for p, s in self.normal],
            "reduce": [[p, s] for p, s in self.reduce],
            "space": self.space,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Genotype":
        return cls(normal=[tuple(e) for e in d["normal"]],
                   reduce=[tuple(e) for e in d["reduce"]],
                   space=d.get("space", "sharpdarts"))

    @classmethod
    def loads(cls, text: str) -> "Genotype":
        return cls.from_dict(json.loads(text))


def derive_genotype(table: AlphaTable) -> Genotype:
    """Discretize an alpha table.

    Per intermediate node, keep the two incoming edges with the largest
    max-over-non-none softmax weight; on each kept edge take the argmax
    non-none primitive. Ties break toward the lower index.
    """
    if table.nodes < 1:
        raise ValueError("alpha table has no intermediate nodes")
    none_idx = [i for i, p in enumerate(table.catalog) if p == "none"]
    keep = [i for i in range(len(table.catalog)) if i not in none_idx]
    if not keep:
        raise ValueError("catalog contains no non-none primitive")

    def discretize(alphas):
        entries = []
        offset = 0
        for node in range(table.nodes):
            fan_in = node + 2
            if fan_in < 2:
                raise ValueError(f"node {node} has fewer than 2 incoming edges")
            weights = [edge_coefficient_values(alphas[offset + i].value, "scalar")
                       for i in range(fan_in)]
            ranked = sorted(range(fan_in),
                            key=lambda i: (-max(weights[i][j] for j in keep), i))
            for i in sorted(ranked[:2]):
                best = max(keep, key=lambda j: (weights[i][j], -j))
                entries.append((table.catalog[best], i))
            offset += fan_in
        return entries

    return Genotype(normal=discretize(table.normal), reduce=discretize(table.reduce),
                    space="sharpdarts")


def darts_v2_genotype() -> Genotype:
    """The published DARTS (second-order) genotype, re-encoded with
    SharpSepConv-backed convolution primitives."""
    return Genotype(
        normal=[
            ("sep_conv_3x3", 0), ("sep_conv_3x3", 1),
            ("sep_conv_3x3", 0), ("sep_conv_3x3", 1),
            ("sep_conv_3x3", 1), ("skip_connect", 0),
            ("skip_connect", 0), ("dil_conv_3x3", 2),
        ],
        reduce=[
            ("max_pool_3x3", 0), ("max_pool_3x3", 1),
            ("skip_connect", 2), ("max_pool_3x3", 1),
            ("max_pool_3x3", 0), ("skip_connect", 2),
            ("skip_connect", 2), ("max_pool_3x3", 1),
        ],
        space="darts+ssc",
    )


# ---------------------------------------------------------------------------
# search supernet
# ---------------------------------------------------------------------------


class MixedEdge(L.Module):
    """All catalog primitives on one edge, combined by their coefficients."""

    def __init__(self, catalog, channels: int, stride: int, rng):
        super().__init__()
        self.ops = []
        for kind in catalog:
            op = L.build_primitive(kind, channels, stride, rng)
            if kind.endswith("pool_3x3"):
                # normalize pool outputs so their scale matches conv branches
                op = L.Sequential(op, L.BatchNorm2d(channels, affine=False))
            self.ops.append(op)

    def forward(self, x, coefficients: Tensor):
        return add_n([mul(op(x), take(coefficients, i))
                      for i, op in enumerate(self.ops)])


class SearchCell(L.Module):
    def __init__(self, nodes, c_pp, c_p, c, reduction, reduction_prev, catalog, rng):
        super().__init__()
        self.nodes = nodes
        self.reduction = reduction
        if reduction_prev:
            self.preprocess0 = L.FactorizedReduce(c_pp, c, rng)
        else:
            self.preprocess0 = L.ReLUConvBN(c_pp, c, 1, 1, 0, rng)
        self.preprocess1 = L.ReLUConvBN(c_p, c, 1, 1, 0, rng)
        self.edges = []
        for node in range(nodes):
            for src in range(node + 2):
                stride = 2 if reduction and src < 2 else 1
                self.edges.append(MixedEdge(catalog, c, stride, rng))

    def forward(self, s0, s1, coefficient_rows):
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        offset = 0
        for node in range(self.nodes):
            states.append(add_n([
                self.edges[offset + src](states[src], coefficient_rows[offset + src])
                for src in range(node + 2)
            ]))
            offset += node + 2
        return concat_channels(states[-self.nodes:])


def _macro_plan(cells: int, init_channels: int):
    """Reduction placement at thirds with channel doubling; rejects
    degenerate stacks and runaway widths."""
    if cells < 3:
        raise ValueError(f"need at least 3 cells, got {cells}")
    if init_channels < 1:
        raise ValueError(f"init_channels must be >= 1, got {init_channels}")
    reductions = {cells // 3, (2 * cells) // 3}
    plan = []
    c = init_channels
    for i in range(cells):
        reduction = i in reductions
        if reduction:
            c *= 2
        if c > 1 << 16:
            raise ValueError(f"channel count {c} overflows the 2^16 limit")
        plan.append((c, reduction))
    return plan


class SearchNetwork(L.Module):
    """Cell-stack supernet with architecture parameters held in an AlphaTable.

    ``parameters()`` returns network weights only; the alphas live in
    ``self.alphas`` and are optimized separately.
    """

    STEM_MULTIPLIER = 3

    def __init__(self, rng, in_channels=1, classes=2, init_channels=8, cells=3,
                 nodes=4, catalog=L.PRIMITIVES, mode="scalar"):
        super().__init__()
        plan = _macro_plan(cells, init_channels)
        self.cell_channels = [c for c, _ in plan]
        c_stem = self.STEM_MULTIPLIER * init_channels
        self.stem = L.Sequential(
            L.Conv2d(in_channels, c_stem, 3, rng, padding=1),
            L.BatchNorm2d(c_stem),
        )
        self.cells = []
        c_pp, c_p = c_stem, c_stem
        reduction_prev = False
        for c, reduction in plan:
            cell = SearchCell(nodes, c_pp, c_p, c, reduction, reduction_prev,
                              catalog, rng)
            self.cells.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, nodes * c
        self.global_pool = L.GlobalAvgPool()
        self.classifier = L.Linear(c_p, classes, rng)
        self.alphas = AlphaTable(catalog=catalog, nodes=nodes, mode=mode, rng=rng)

    def forward(self, x):
        mode = self.alphas.mode
        normal_rows = [edge_coefficients(a, mode) for a in self.alphas.normal]
        reduce_rows = [edge_coefficients(a, mode) for a in self.alphas.reduce]
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            rows = reduce_rows if cell.reduction else normal_rows
            s0, s1 = s1, cell(s0, s1, rows)
        return self.classifier(self.global_pool(s1))

    def genotype(self) -> Genotype:
        return derive_genotype(self.alphas)


class FixedCell(L.Module):
    """Discrete cell built from a genotype: two chosen edges per node."""

    def __init__(self, genotype_entries, c_pp, c_p, c, reduction, reduction_prev, rng):
        super().__init__()
        self.reduction = reduction
        self.nodes = len(genotype_entries) // 2
        if reduction_prev:
            self.preprocess0 = L.FactorizedReduce(c_pp, c, rng)
        else:
            self.preprocess0 = L.ReLUConvBN(c_pp, c, 1, 1, 0, rng)
        self.preprocess1 = L.ReLUConvBN(c_p, c, 1, 1, 0, rng)
        self.ops = []
        self.sources = []
        for prim, src in genotype_entries:
            stride = 2 if reduction and src < 2 else 1
            self.ops.append(L.build_primitive(prim, c, stride, rng))
            self.sources.append(src)

    def forward(self, s0, s1):
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        for node in range(self.nodes):
            a = self.ops[2 * node](states[self.sources[2 * node]])
            b = self.ops[2 * node + 1](states[self.sources[2 * node + 1]])
            states.append(add(a, b))
        return concat_channels(states[-self.nodes:])


class FixedNetwork(L.Module):
    """Discretized cell stack; contains no architecture parameters."""

    STEM_MULTIPLIER = 3

    def __init__(self, genotype: Genotype, rng, in_channels=1, classes=2,
                 init_channels=8, cells=3):
        super().__init__()
        genotype.validate()
        plan = _macro_plan(cells, init_channels)
        self.cell_channels = [c for c, _ in plan]
        nodes = genotype.nodes
        c_stem = self.STEM_MULTIPLIER * init_channels
        self.stem = L.Sequential(
            L.Conv2d(in_channels, c_stem, 3, rng, padding=1),
            L.BatchNorm2d(c_stem),
        )
        self.cells = []
        c_pp, c_p = c_stem, c_stem
        reduction_prev = False
        for c, reduction in plan:
            entries = genotype.reduce if reduction else genotype.normal
            cell = FixedCell(entries, c_pp, c_p, c, reduction, reduction_prev, rng)
            self.cells.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, nodes * c
        self.global_pool = L.GlobalAvgPool()
        self.classifier = L.Linear(c_p, classes, rng)

    def forward(self, x):
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1)
        return self.classifier(self.global_pool(s1))


# ---------------------------------------------------------------------------
# Max-W diagnostics
# ---------------------------------------------------------------------------


def maxw_argmax_report(alpha_values: np.ndarray) -> dict:
    """Verify the Max-W cancellation on one alpha vector.

    The coefficient at the argmax must equal 1.0 exactly and its gradient
    with respect to every alpha entry must vanish: the +w_i and -max(w)
    paths cancel. Raises :class:`InvariantError` on any violation.
    """
    alpha = Tensor(np.asarray(alpha_values, dtype=np.float64), requires_grad=True)
    coeff = edge_coefficients(alpha, "max-w")
    w = edge_coefficient_values(alpha.value, "scalar")
    idx = int(np.argmax(w))
    backward(take(coeff, idx))
    grad = alpha.grad.copy()
    values = coeff.value
    report = {
        "argmax": idx,
        "coefficient": float(values[idx]),
        "grad_linf": float(np.abs(grad).max()),
        "coefficients": values.tolist(),
    }
    if values[idx] != 1.0:
        raise InvariantError(f"argmax coefficient is {values[idx]!r}, expected exactly 1.0")
    if report["grad_linf"] > 1e-12:
        raise InvariantError(
            f"argmax coefficient has nonzero alpha gradient: {report['grad_linf']}"
        )
    if not ((values > 0.0) & (values <= 1.0)).all():
        raise InvariantError(f"coefficients outside (0, 1]: {values}")
    return report
