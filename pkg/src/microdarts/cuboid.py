"""HyperCuboid search space: differentiable grid search over a layered DAG.

The grid is an n-tuple (channel-scale pairs, normal depth, reduction
depth, primitives). Each searchable layer position holds one candidate
node per (scale pair, primitive) combination; nodes of consecutive layers
connect when the output scale of one matches the input scale of the next.
The number of architecture weights is the product of the tuple sizes.

Stages stack ``d_n`` layers and stride the last layer of each stage, so a
grid has ``d_r * d_n`` searchable layers. Same-scale node outputs merge by
summation during search; discrete models are single source-to-sink paths.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .cells import WEIGHTING_MODES, edge_coefficient_values, edge_coefficients
from .tensor import Tensor, add, concat_channels, global_avg_pool, mul, take

__all__ = [
    "HyperCuboidSpec",
    "CuboidWeights",
    "PathStep",
    "PathGenotype",
    "HyperCuboid",
    "PathNetwork",
    "extract_best_path",
    "enumerate_paths",
    "count_paths",
    "handmade_path",
    "build_path_net",
]


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class HyperCuboidSpec:
    """The n-tuple defining a grid: gamma pairs, depths, and the choice set."""

    pairs: tuple            # (input_scale, output_scale) channel pairs
    d_n: int                # layers per stage; the last one strides
    d_r: int                # number of stride-2 stages
    primitives: tuple       # catalog names selectable at each position

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((int(a), int(b)) for a, b in self.pairs))
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not self.pairs or self.d_n < 1 or self.d_r < 1 or not self.primitives:
            raise ValueError("gamma, d_n, d_r, and primitives must all be non-empty")
        for a, b in self.pairs:
            if not (_is_power_of_two(a) and _is_power_of_two(b)):
                raise ValueError(f"channel scales must be powers of two, got ({a}, {b})")
        for p in self.primitives:
            if p != "none" and p not in L.PRIMITIVES:
                raise ValueError(f"unknown primitive {p!r}")
        if len(set(self.pairs)) != len(self.pairs):
            raise ValueError("duplicate gamma pairs")

    @classmethod
    def from_scales(cls, scales, d_n, d_r, primitives) -> "HyperCuboidSpec":
        scales = sorted(int(s) for s in scales)
        pairs = tuple((a, b) for a in scales for b in scales)
        return cls(pairs=pairs, d_n=d_n, d_r=d_r, primitives=tuple(primitives))

    @property
    def alpha_count(self) -> int:
        return len(self.pairs) * self.d_n * self.d_r * len(self.primitives)

    @property
    def n_layers(self) -> int:
        return self.d_r * self.d_n

    @property
    def stem_scale(self) -> int:
        return min(a for a, _ in self.pairs)

    def positions(self):
        """(stage, layer, stride) for every searchable layer, in order."""
        for stage in range(self.d_r):
            for layer in range(self.d_n):
                yield stage, layer, 2 if layer == self.d_n - 1 else 1

    def reachable_nodes(self):
        """Per layer, the (gamma_index, prim_index) nodes fed by the stem.

        Raises when some layer has no live node, meaning no scale-compatible
        edge exists between consecutive layers.
        """
        live_per_layer = []
        in_scales = {self.stem_scale}
        for stage, layer, _ in self.positions():
            live = [(gi, pi)
                    for gi, (a, _) in enumerate(self.pairs) if a in in_scales
                    for pi in range(len(self.primitives))]
            if not live:
                raise ValueError(
                    f"no scale-compatible edge into stage {stage} layer {layer}"
                )
            live_per_layer.append(live)
            in_scales = {self.pairs[gi][1] for gi, _ in live}
        return live_per_layer

    def to_dict(self) -> dict:
        scales = sorted({s for pair in self.pairs for s in pair})
        product = tuple((a, b) for a in scales for b in scales)
        if product != self.pairs:
            raise ValueError("only full scale-product specs have a file form")
        return {
            "scales": scales,
            "d_n": self.d_n,
            "d_r": self.d_r,
            "primitives": list(self.primitives),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HyperCuboidSpec":
        return cls.from_scales(d["scales"], int(d["d_n"]), int(d["d_r"]),
                               d["primitives"])


class CuboidWeights:
    """One alpha per (gamma pair, layer, stage, primitive) coordinate.

    Softmax groups cover the |gamma| * |primitives| choices of one
    (stage, layer) position, making each layer a single decision site.
    Within a group, the flat index is gamma_index * n_primitives + prim_index.
    """

    def __init__(self, spec: HyperCuboidSpec, mode: str = "scalar", rng=None,
                 init_std: float = 1e-3):
        if mode not in WEIGHTING_MODES:
            raise ValueError(f"unknown weighting mode {mode!r}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.spec = spec
        self.mode = mode
        group = len(spec.pairs) * len(spec.primitives)
        self.groups = [Tensor(init_std * rng.standard_normal(group), requires_grad=True)
                       for _ in range(spec.n_layers)]

    @property
    def alpha_count(self) -> int:
        return sum(g.size for g in self.groups)

    def tensors(self) -> list[Tensor]:
        return list(self.groups)

    def group(self, stage: int, layer: int) -> Tensor:
        return self.groups[stage * self.spec.d_n + layer]

    def softmax_values(self) -> list[np.ndarray]:
        return [edge_coefficient_values(g.value, "scalar") for g in self.groups]

    def to_dict(self) -> dict:
        return {
            "space": "cuboid",
            "mode": self.mode,
            "spec": self.spec.to_dict(),
            "alpha": [g.value.tolist() for g in self.groups],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CuboidWeights":
        spec = HyperCuboidSpec.from_dict(d["spec"])
        weights = cls(spec, mode=d["mode"])
        rows = d["alpha"]
        if len(rows) != len(weights.groups):
            raise ValueError(f"snapshot has {len(rows)} groups, expected "
                             f"{len(weights.groups)}")
        for g, row in zip(weights.groups, rows):
            row = np.asarray(row, dtype=np.float64)
            if row.shape != g.value.shape:
                raise ValueError("alpha group length does not match the spec")
            g.value = row
        return weights


# ---------------------------------------------------------------------------
# path genotypes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathStep:
    stage: int
    layer: int
    c_in: int
    c_out: int
    primitive: str


@dataclass
class PathGenotype:
    """One source-to-sink choice sequence through the grid."""

    steps: list

    def __post_init__(self):
        self.steps = [s if isinstance(s, PathStep) else PathStep(**s) for s in self.steps]
        self.validate()

    def validate(self):
        if not self.steps:
            raise ValueError("empty path")
        per = self.layers_per_stage
        expect = [(s, l) for s in range(self.steps[-1].stage + 1) for l in range(per)]
        got = [(s.stage, s.layer) for s in self.steps]
        if got != expect:
            raise ValueError(f"path positions {got} do not cover every layer once")
        for prev, nxt in zip(self.steps, self.steps[1:]):
            if prev.c_out != nxt.c_in:
                raise ValueError(
                    f"scale break between {prev} and {nxt}: {prev.c_out} != {nxt.c_in}"
                )

    @property
    def layers_per_stage(self) -> int:
        per = [s.layer for s in self.steps if s.stage == 0]
        return max(per) + 1 if per else 0

    def to_dict(self) -> dict:
        return {"steps": [{"stage": s.stage, "layer": s.layer, "c_in": s.c_in,
                           "c_out": s.c_out, "primitive": s.primitive}
                          for s in self.steps]}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "PathGenotype":
        return cls(steps=d["steps"])

    @classmethod
    def loads(cls, text: str) -> "PathGenotype":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# supernet
# ---------------------------------------------------------------------------


def _node_layer(kind: str, c_in: int, c_out: int, stride: int, rng,
                search: bool) -> L.Module:
    """A grid node: primitive mapping c_in to c_out at the given stride.

    Channel-preserving primitives (pools, skip) get a 1x1 projection when
    the node changes scale, so every (gamma, primitive) node is buildable.
    During search, bare pools pick up a non-affine BN like cell edges do.
    """
    if kind == "none":
        return L.Zero(stride, out_channels=c_out)
    if kind in L.CONV_PRIMITIVES:
        kernel, dilation, c_mid, c_mid_mult = L.CONV_PRIMITIVES[kind]
        return L.SharpSepConv(c_in, c_out, rng, kernel=kernel, stride=stride,
                              dilation=dilation, c_mid=c_mid, c_mid_mult=c_mid_mult)
    if kind in ("avg_pool_3x3", "max_pool_3x3"):
        pool = L.AvgPool3x3(stride) if kind == "avg_pool_3x3" else L.MaxPool3x3(stride)
        if c_in != c_out:
            return L.Sequential(pool, L.ReLUConvBN(c_in, c_out, 1, 1, 0, rng))
        if search:
            return L.Sequential(pool, L.BatchNorm2d(c_out, affine=False))
        return pool
    if kind == "skip_connect":
        if stride == 2:
            return L.FactorizedReduce(c_in, c_out, rng)
        if c_in != c_out:
            return L.ReLUConvBN(c_in, c_out, 1, 1, 0, rng)
        return L.Identity()
    raise ValueError(f"unknown primitive kind {kind!r}")


class HyperCuboid(L.Module):
    """Grid supernet: weighted same-scale sums between layers.

    The stem maps the image to the smallest input scale; the head pools
    each surviving scale and classifies their concatenation.
    """

    def __init__(self, spec: HyperCuboidSpec, rng, in_channels=1, classes=2):
        super().__init__()
        self.spec = spec
        self.live = spec.reachable_nodes()
        self.stem = L.Sequential(
            L.Conv2d(in_channels, spec.stem_scale, 3, rng, padding=1),
            L.BatchNorm2d(spec.stem_scale),
        )
        self.nodes = {}
        n_prims = len(spec.primitives)
        for t, (stage, layer, stride) in enumerate(spec.positions()):
            for gi, pi in self.live[t]:
                c_in, c_out = spec.pairs[gi]
                self.nodes[(stage, layer, gi, pi)] = _node_layer(
                    spec.primitives[pi], c_in, c_out, stride, rng, search=True)
        self.final_scales = sorted({spec.pairs[gi][1] for gi, _ in self.live[-1]})
        self.global_pool = L.GlobalAvgPool()
        self.classifier = L.Linear(sum(self.final_scales), classes, rng)
        self._n_prims = n_prims

    def forward(self, x, weights: CuboidWeights):
        if weights.spec != self.spec:
            raise ValueError("weights were created for a different grid spec")
        current = {self.spec.stem_scale: self.stem(x)}
        for t, (stage, layer, _) in enumerate(self.spec.positions()):
            coeffs = edge_coefficients(weights.group(stage, layer), weights.mode)
            nxt = {}
            for gi, pi in self.live[t]:
                c_in, c_out = self.spec.pairs[gi]
                src = current.get(c_in)
                if src is None:
                    continue
                out = self.nodes[(stage, layer, gi, pi)](src)
                out = mul(out, take(coeffs, gi * self._n_prims + pi))
                nxt[c_out] = add(nxt[c_out], out) if c_out in nxt else out
            current = nxt
        feats = concat_channels([global_avg_pool(current[c])
                                 for c in self.final_scales])
        return self.classifier(feats)


# ---------------------------------------------------------------------------
# path extraction
# ---------------------------------------------------------------------------


def _scored_layers(weights: CuboidWeights):
    """Per layer: list of (coordinate, score) over live nodes; the score is
    the softmax weight. Max-W shifts every group by the same constant, so
    the best path is unchanged either way."""
    spec = weights.spec
    live = spec.reachable_nodes()
    w = weights.softmax_values()
    n_prims = len(spec.primitives)
    layers = []
    for t, (stage, layer, _) in enumerate(spec.positions()):
        group = w[stage * spec.d_n + layer]
        layers.append([((gi, pi), float(group[gi * n_prims + pi]))
                       for gi, pi in live[t]])
    return layers


def extract_best_path(weights: CuboidWeights) -> PathGenotype:
    """Maximum-total-score source-to-sink path by dynamic programming.

    Ties resolve to the lexicographically lowest coordinate sequence.
    """
    spec = weights.spec
    layers = _scored_layers(weights)
    if not layers:
        raise ValueError("empty grid")
    n = len(layers)
    # suffix[t][node] = best total score of a path starting at node
    suffix = [dict() for _ in range(n)]
    choice = [dict() for _ in range(n)]
    for t in range(n - 1, -1, -1):
        for (gi, pi), score in layers[t]:
            out_scale = spec.pairs[gi][1]
            if t == n - 1:
                suffix[t][(gi, pi)] = score
                continue
            best, best_node = None, None
            for (gj, pj), _ in layers[t + 1]:
                if spec.pairs[gj][0] != out_scale:
                    continue
                cand = suffix[t + 1][(gj, pj)]
                if best is None or cand > best:
                    best, best_node = cand, (gj, pj)
            if best is None:
                continue  # dead end; cannot reach the sink through this node
            suffix[t][(gi, pi)] = score + best
            choice[t][(gi, pi)] = best_node
    start_candidates = [(node, total) for node, total in suffix[0].items()]
    if not start_candidates:
        raise ValueError("no source-to-sink path exists")
    best_total = max(total for _, total in start_candidates)
    node = min(n for n, total in start_candidates if total == best_total)
    steps = []
    positions = list(spec.positions())
    for t in range(n):
        stage, layer, _ = positions[t]
        gi, pi = node
        a, b = spec.pairs[gi]
        steps.append(PathStep(stage, layer, a, b, spec.primitives[pi]))
        if t < n - 1:
            node = choice[t][node]
    return PathGenotype(steps=steps)


def count_paths(spec: HyperCuboidSpec) -> int:
    """Number of source-to-sink paths, by forward dynamic programming."""
    layers_live = spec.reachable_nodes()
    counts = {node: 1 for node in layers_live[0]}
    for t in range(1, len(layers_live)):
        nxt = {}
        for gi, pi in layers_live[t]:
            total = sum(c for (gj, _), c in counts.items()
                        if spec.pairs[gj][1] == spec.pairs[gi][0])
            if total:
                nxt[(gi, pi)] = total
        counts = nxt
    return sum(counts.values())


def enumerate_paths(weights: CuboidWeights, bound: int = 1000):
    """Exhaustive (path, score) list in lexicographic coordinate order.

    Serves as the oracle for :func:`extract_best_path`; refuses grids
    whose path count exceeds ``bound``.
    """
    spec = weights.spec
    total = count_paths(spec)
    if total > bound:
        raise ValueError(f"grid has {total} paths, over the bound of {bound}")
    layers = _scored_layers(weights)
    positions = list(spec.positions())
    results = []

    def walk(t, out_scale, prefix, score):
        if t == len(layers):
            steps = [PathStep(positions[i][0], positions[i][1],
                              spec.pairs[gi][0], spec.pairs[gi][1],
                              spec.primitives[pi])
                     for i, (gi, pi) in enumerate(prefix)]
            results.append((PathGenotype(steps=steps), score))
            return
        for (gi, pi), s in layers[t]:
            if spec.pairs[gi][0] != out_scale:
                continue
            walk(t + 1, spec.pairs[gi][1], prefix + [(gi, pi)], score + s)

    walk(0, spec.stem_scale, [], 0.0)
    return results


def handmade_path(spec: HyperCuboidSpec, start: int = 32, cap: int = 256) -> PathGenotype:
    """One-shot baseline: constant-width convolutions, output width doubling
    at every stride-2 layer up to the cap."""
    conv = next((p for p in spec.primitives if p in L.CONV_PRIMITIVES), None)
    if conv is None:
        raise ValueError("spec has no convolutional primitive for the baseline")
    pairs = set(spec.pairs)
    steps = []
    width = start
    for stage, layer, stride in spec.positions():
        out = min(width * 2, cap) if stride == 2 else width
        if (width, out) not in pairs:
            raise ValueError(f"scale pair ({width}, {out}) not available in gamma")
        steps.append(PathStep(stage, layer, width, out, conv))
        width = out
    return PathGenotype(steps=steps)


class PathNetwork(L.Module):
    """Discrete single-path model: stem, the chosen layers, pool, classify."""

    def __init__(self, path: PathGenotype, rng, in_channels=1, classes=2):
        super().__init__()
        path.validate()
        per_stage = path.layers_per_stage
        self.stem = L.Sequential(
            L.Conv2d(in_channels, path.steps[0].c_in, 3, rng, padding=1),
            L.BatchNorm2d(path.steps[0].c_in),
        )
        self.blocks = []
        for step in path.steps:
            stride = 2 if step.layer == per_stage - 1 else 1
            self.blocks.append(_node_layer(step.primitive, step.c_in, step.c_out,
                                           stride, rng, search=False))
        self.global_pool = L.GlobalAvgPool()
        self.classifier = L.Linear(path.steps[-1].c_out, classes, rng)

    def forward(self, x):
        h = self.stem(x)
        for block in self.blocks:
            h = block(h)
        return self.classifier(self.global_pool(h))


def build_path_net(path: PathGenotype, rng, in_channels=1, classes=2) -> PathNetwork:
    return PathNetwork(path, rng, in_channels=in_channels, classes=classes)
