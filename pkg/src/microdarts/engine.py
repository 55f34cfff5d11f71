"""First-order bilevel search, final training, and the bias diagnostic.

Each step takes one architecture update from a validation batch and one
weight update from a training batch. Gradient provenance is enforced by
tags: the alpha optimizer refuses gradients that did not come from a
validation pass, and vice versa.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from statistics import median

import numpy as np

from . import layers as L
from .cells import (
    AlphaTable,
    FixedNetwork,
    Genotype,
    SearchNetwork,
    derive_genotype,
)
from .cuboid import (
    CuboidWeights,
    HyperCuboid,
    HyperCuboidSpec,
    PathGenotype,
    build_path_net,
    extract_best_path,
)
from .data import Dataset
from .optim import SGD, Adam
from .schedules import SCHEDULE_KINDS, AnnealSpec, anneal
from .tensor import backward, cross_entropy, no_grad

__all__ = [
    "SearchConfig",
    "TrainConfig",
    "EpochRecord",
    "TrainReport",
    "DivergenceError",
    "bilevel_search",
    "train_final",
    "bias_report",
    "default_cuboid_spec",
]

SPACES = ("cell", "cuboid")


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; carries the epoch and step."""

    def __init__(self, epoch: int, step: int):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


def default_cuboid_spec() -> HyperCuboidSpec:
    """Toy grid with conv and pool choices over two channel scales."""
    return HyperCuboidSpec.from_scales(
        (4, 8), 2, 2, ("sep_conv_3x3", "max_pool_3x3"))


@dataclass
class SearchConfig:
    """Everything a bilevel run needs besides the dataset."""

    space: str = "cell"
    mode: str = "scalar"
    epochs: int = 8
    batch_size: int = 16
    seed: int = 0
    split: float = 0.5
    # weight optimizer (SGD with momentum under the annealed schedule)
    schedule_kind: str = "power"
    p: float = 2.0
    eta_max: float = 0.025
    eta_min: float = 1e-8
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    # architecture optimizer (Adam at a fixed rate)
    alpha_lr: float = 3e-4
    alpha_beta1: float = 0.5
    alpha_beta2: float = 0.999
    alpha_weight_decay: float = 1e-3
    # cell space
    cells: int = 3
    init_channels: int = 4
    nodes: int = 4
    catalog: tuple = L.PRIMITIVES
    # cuboid space
    cuboid: HyperCuboidSpec = field(default_factory=default_cuboid_spec)

    def __post_init__(self):
        if self.space not in SPACES:
            raise ValueError(f"unknown search space {self.space!r}")
        if self.mode not in ("scalar", "max-w"):
            raise ValueError(f"unknown weighting mode {self.mode!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.split < 1.0:
            raise ValueError(f"split must lie in (0, 1), got {self.split}")
        if self.schedule_kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.schedule_kind!r}")
        self.catalog = tuple(self.catalog)
        if isinstance(self.cuboid, dict):
            self.cuboid = HyperCuboidSpec.from_dict(self.cuboid)

    def anneal_spec(self) -> AnnealSpec:
        return AnnealSpec(p=self.p, eta_min=self.eta_min, eta_max=self.eta_max,
                          epochs=self.epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["catalog"] = list(self.catalog)
        d["cuboid"] = self.cuboid.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        d = dict(d)
        if "catalog" in d:
            d["catalog"] = tuple(d["catalog"])
        return cls(**d)


@dataclass
class TrainConfig:
    """Supervised training of a discretized model."""

    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    split: float = 0.5
    schedule_kind: str = "power"
    p: float = 2.0
    eta_max: float = 0.025
    eta_min: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 3e-4
    # cell-network shape (ignored for path models)
    cells: int = 3
    init_channels: int = 8

    def anneal_spec(self) -> AnnealSpec:
        return AnnealSpec(p=self.p, eta_min=self.eta_min, eta_max=self.eta_max,
                          epochs=self.epochs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float
    param_count: int
    snapshot: dict
    wall_time: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
            "lr": self.lr,
            "param_count": self.param_count,
            "snapshot": self.snapshot,
            "wall_time": self.wall_time,
        }


@dataclass
class TrainReport:
    space: str
    mode: str
    seed: int
    records: list

    @property
    def best_val_accuracy(self) -> float:
        return max(r.val_accuracy for r in self.records)

    def to_jsonl(self) -> str:
        import json

        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.records)

    @staticmethod
    def records_from_jsonl(text: str) -> list[dict]:
        import json

        return [json.loads(line) for line in text.splitlines() if line.strip()]


def _batch_indices(n: int, batch_size: int, rng) -> list[np.ndarray]:
    """Shuffled full batches; falls back to one whole-set batch if tiny."""
    perm = rng.permutation(n)
    steps = n // batch_size
    if steps == 0:
        return [perm]
    return [perm[i * batch_size : (i + 1) * batch_size] for i in range(steps)]


def _evaluate(forward, ds: Dataset, batch_size: int) -> tuple[float, float]:
    # larger eval batches amortize dispatch overhead; still deterministic
    step = min(len(ds), 4 * batch_size)
    total_loss, correct = 0.0, 0
    with no_grad():
        for start in range(0, len(ds), step):
            xb = ds.x[start : start + step]
            yb = ds.y[start : start + step]
            logits = forward(xb)
            total_loss += cross_entropy(logits, yb).item() * len(yb)
            correct += int((logits.value.argmax(axis=1) == yb).sum())
    return total_loss / len(ds), correct / len(ds)


class _CellSpace:
    def __init__(self, config: SearchConfig, dataset: Dataset, rng):
        self.config = config
        self.net = SearchNetwork(
            rng,
            in_channels=dataset.x.shape[1],
            classes=dataset.classes,
            init_channels=config.init_channels,
            cells=config.cells,
            nodes=config.nodes,
            catalog=config.catalog,
            mode=config.mode,
        )

    def forward(self, xb):
        from .tensor import Tensor

        return self.net(Tensor(xb))

    def weight_parameters(self):
        return self.net.parameters()

    def alpha_parameters(self):
        return self.net.alphas.tensors()

    def discretize(self):
        return derive_genotype(self.net.alphas)

    def discrete_param_count(self, geno) -> int:
        probe = FixedNetwork(geno, np.random.default_rng(0),
                             in_channels=1, classes=2,
                             init_channels=self.config.init_channels,
                             cells=self.config.cells)
        return L.param_count(probe)

    def weights_snapshot(self) -> dict:
        return self.net.alphas.to_dict()


class _CuboidSpace:
    def __init__(self, config: SearchConfig, dataset: Dataset, rng):
        self.config = config
        self.net = HyperCuboid(config.cuboid, rng,
                               in_channels=dataset.x.shape[1],
                               classes=dataset.classes)
        self.weights = CuboidWeights(config.cuboid, mode=config.mode, rng=rng)

    def forward(self, xb):
        from .tensor import Tensor

        return self.net(Tensor(xb), self.weights)

    def weight_parameters(self):
        return self.net.parameters()

    def alpha_parameters(self):
        return self.weights.tensors()

    def discretize(self):
        return extract_best_path(self.weights)

    def discrete_param_count(self, path) -> int:
        probe = build_path_net(path, np.random.default_rng(0),
                               in_channels=1, classes=2)
        return L.param_count(probe)

    def weights_snapshot(self) -> dict:
        return self.weights.to_dict()


def bilevel_search(config: SearchConfig, dataset: Dataset):
    """Alternating alpha/weight optimization on a disjoint train/val split.

    Returns ``(report, final, weights_snapshot)``: the per-epoch report,
    the final discretized Genotype or PathGenotype, and a serializable
    snapshot of the architecture parameters for later extraction.
    """
    seq = np.random.SeedSequence(config.seed)
    net_seq, shuffle_seq = seq.spawn(2)
    net_rng = np.random.default_rng(net_seq)
    shuffle_rng = np.random.default_rng(shuffle_seq)

    train, val = dataset.split(config.split)
    space = (_CellSpace if config.space == "cell" else _CuboidSpace)(
        config, dataset, net_rng)

    sched = config.anneal_spec()
    w_opt = SGD(space.weight_parameters(), lr=config.eta_max,
                momentum=config.w_momentum, weight_decay=config.w_weight_decay,
                expected_tag="train")
    a_opt = Adam(space.alpha_parameters(), lr=config.alpha_lr,
                 betas=(config.alpha_beta1, config.alpha_beta2),
                 weight_decay=config.alpha_weight_decay, expected_tag="val")

    records = []
    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = anneal(sched, epoch, config.schedule_kind)
        w_opt.lr = lr
        train_batches = _batch_indices(len(train), config.batch_size, shuffle_rng)
        val_batches = _batch_indices(len(val), config.batch_size, shuffle_rng)
        losses = []
        for step, (tb, vb) in enumerate(zip(train_batches, val_batches)):
            a_opt.zero_grad()
            val_loss = cross_entropy(space.forward(val.x[vb]), val.y[vb])
            if not np.isfinite(val_loss.item()):
                raise DivergenceError(epoch, step)
            backward(val_loss, tag="val")
            a_opt.step()

            w_opt.zero_grad()
            train_loss = cross_entropy(space.forward(train.x[tb]), train.y[tb])
            if not np.isfinite(train_loss.item()):
                raise DivergenceError(epoch, step)
            backward(train_loss, tag="train")
            w_opt.step()
            losses.append(train_loss.item())

        val_loss, val_acc = _evaluate(space.forward, val, config.batch_size)
        final = space.discretize()
        records.append(EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_loss=val_loss,
            val_accuracy=val_acc,
            lr=lr,
            param_count=space.discrete_param_count(final),
            snapshot=final.to_dict(),
            wall_time=time.perf_counter() - started,
        ))

    report = TrainReport(space=config.space, mode=config.mode, seed=config.seed,
                         records=records)
    return report, space.discretize(), space.weights_snapshot()


def train_final(model, dataset: Dataset, config: TrainConfig,
                in_channels: int | None = None):
    """Supervised training of a discretized genotype or path model.

    Returns ``(report, net)``; evaluation runs in eval mode, so batchnorm
    uses its running statistics.
    """
    seq = np.random.SeedSequence(config.seed)
    net_seq, shuffle_seq = seq.spawn(2)
    net_rng = np.random.default_rng(net_seq)
    shuffle_rng = np.random.default_rng(shuffle_seq)

    train, val = dataset.split(config.split)
    channels = dataset.x.shape[1] if in_channels is None else in_channels
    if isinstance(model, Genotype):
        net = FixedNetwork(model, net_rng, in_channels=channels,
                           classes=dataset.classes,
                           init_channels=config.init_channels, cells=config.cells)
        space_name = "cell"
    elif isinstance(model, PathGenotype):
        net = build_path_net(model, net_rng, in_channels=channels,
                             classes=dataset.classes)
        space_name = "cuboid"
    else:
        raise TypeError(f"cannot train a {type(model).__name__}")

    from .tensor import Tensor

    sched = config.anneal_spec()
    opt = SGD(net.parameters(), lr=config.eta_max, momentum=config.momentum,
              weight_decay=config.weight_decay)
    pc = L.param_count(net)
    snapshot = model.to_dict()

    records = []
    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = anneal(sched, epoch, config.schedule_kind)
        opt.lr = lr
        net.train()
        losses = []
        for step, tb in enumerate(_batch_indices(len(train), config.batch_size,
                                                 shuffle_rng)):
            opt.zero_grad()
            loss = cross_entropy(net(Tensor(train.x[tb])), train.y[tb])
            if not np.isfinite(loss.item()):
                raise DivergenceError(epoch, step)
            backward(loss)
            opt.step()
            losses.append(loss.item())
        net.eval()
        val_loss, val_acc = _evaluate(lambda xb: net(Tensor(xb)), val,
                                      config.batch_size)
        net.train()
        records.append(EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_loss=val_loss,
            val_accuracy=val_acc,
            lr=lr,
            param_count=pc,
            snapshot=snapshot,
            wall_time=time.perf_counter() - started,
        ))

    report = TrainReport(space=space_name, mode="final", seed=config.seed,
                         records=records)
    return report, net


# ---------------------------------------------------------------------------
# scalar vs Max-W bias diagnostic
# ---------------------------------------------------------------------------


def _snapshot_ops(snapshot: dict) -> list[str]:
    if "steps" in snapshot:
        return [s["primitive"] for s in snapshot["steps"]]
    return [p for p, _ in snapshot["normal"]] + [p for p, _ in snapshot["reduce"]]


def _records_of(report) -> list[dict]:
    if isinstance(report, TrainReport):
        return [r.to_dict() for r in report.records]
    return list(report)


def bias_report(scalar: dict, maxw: dict, epoch: int = 3) -> dict:
    """Compare discretized model sizes between the two weighting rules.

    ``scalar`` and ``maxw`` map seed to a TrainReport (or its record list)
    from paired runs. The direction statistic at ``epoch`` scores each
    seed 1.0 when Max-W picked the larger model, 0.5 on a tie, 0.0
    otherwise, and averages over seeds.
    """
    if sorted(scalar) != sorted(maxw):
        raise ValueError(
            f"unpaired seeds: scalar has {sorted(scalar)}, max-w has {sorted(maxw)}"
        )
    seeds = sorted(scalar)
    if len(seeds) < 2:
        raise ValueError(f"need at least 2 paired seeds, got {len(seeds)}")
    s_recs = {seed: _records_of(scalar[seed]) for seed in seeds}
    m_recs = {seed: _records_of(maxw[seed]) for seed in seeds}
    n_epochs = min(min(len(r) for r in s_recs.values()),
                   min(len(r) for r in m_recs.values()))
    if not 0 <= epoch < n_epochs:
        raise ValueError(f"epoch {epoch} outside the common range [0, {n_epochs})")

    def mode_stats(recs_by_seed, e):
        params = [recs_by_seed[seed][e]["param_count"] for seed in seeds]
        hist = {}
        for seed in seeds:
            for op in _snapshot_ops(recs_by_seed[seed][e]["snapshot"]):
                hist[op] = hist.get(op, 0) + 1
        return {"median_param_count": median(params),
                "param_counts": params,
                "op_histogram": dict(sorted(hist.items()))}

    per_epoch = []
    for e in range(n_epochs):
        per_epoch.append({
            "epoch": e,
            "scalar": mode_stats(s_recs, e),
            "max-w": mode_stats(m_recs, e),
        })

    scores = []
    for seed in seeds:
        sp = s_recs[seed][epoch]["param_count"]
        mp = m_recs[seed][epoch]["param_count"]
        scores.append(1.0 if mp > sp else 0.5 if mp == sp else 0.0)

    return {
        "epoch": epoch,
        "seeds": seeds,
        "direction_fraction": float(np.mean(scores)),
        "median_params": {
            "scalar": per_epoch[epoch]["scalar"]["median_param_count"],
            "max-w": per_epoch[epoch]["max-w"]["median_param_count"],
        },
        "per_epoch": per_epoch,
    }
