"""Dataset indexing, batch sampling, and the SGD training loop.

An index file lists one pose per line:

    label rmsd target_id cluster_id source receptor_path ligand_path [vina_rank [ligand_id]]

with `-` for absent rmsd or rank; ligand_id defaults to the ligand path
stem. Labels derive from pose RMSD: below 2 angstroms is positive, above 4
negative, and the band between is omitted from training (such records stay
in the index for scoring but never enter a batch).

Batches are class-balanced by construction: each class cycles its own
shuffled list of eligible records (reshuffled every time it wraps), and
every batch holds exactly half positives. Each drawn example is voxelized
fresh, with a random rotation/translation when augmentation is on, so the
network never sees the same grid twice.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evalkit, tensornet
from .errors import FormatError, TrainingDivergedError
from .gridgen import GridConfig, Transform, sample_transform, voxelize
from .moldata import AtomTypeScheme, Molecule, assign_types, parse_structure
from .configio import parse_bool, parse_key_values

POSITIVE_RMSD_MAX = 2.0
NEGATIVE_RMSD_MIN = 4.0


def label_pose(rmsd: float) -> str:
    """Map a pose RMSD to "positive", "negative", or "omitted"."""
    if rmsd < 0:
        raise ValueError(f"rmsd must be nonnegative, got {rmsd}")
    if rmsd < POSITIVE_RMSD_MAX:
        return "positive"
    if rmsd > NEGATIVE_RMSD_MIN:
        return "negative"
    return "omitted"


@dataclass(frozen=True)
class PoseRecord:
    label: int
    rmsd: float | None
    target_id: str
    cluster_id: str
    source: str
    receptor_ref: str
    ligand_ref: str
    vina_rank: int | None = None
    ligand_id: str = ""

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.rmsd is not None and self.rmsd < 0:
            raise ValueError(f"rmsd must be nonnegative, got {self.rmsd}")
        if not self.ligand_id:
            object.__setattr__(self, "ligand_id", Path(self.ligand_ref).stem)

    @property
    def training_class(self) -> str:
        """"positive"/"negative" for batch-eligible records, "omitted" for
        poses in the ambiguous RMSD band."""
        if self.rmsd is not None:
            return label_pose(self.rmsd)
        return "positive" if self.label == 1 else "negative"


@dataclass(frozen=True)
class DatasetIndex:
    records: tuple[PoseRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise ValueError("index has no records")

    def __len__(self):
        return len(self.records)

    def training_positions(self, cls: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.training_class == cls]

    def by_cluster(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for i, r in enumerate(self.records):
            out.setdefault(r.cluster_id, []).append(i)
        return out

    def by_target(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for i, r in enumerate(self.records):
            out.setdefault(r.target_id, []).append(i)
        return out

    def subset(self, positions) -> "DatasetIndex":
        return DatasetIndex(tuple(self.records[i] for i in positions))


def _parse_opt(token: str, conv, what: str, lineno: int):
    if token == "-":
        return None
    try:
        return conv(token)
    except ValueError:
        raise FormatError(f"line {lineno}: bad {what} {token!r}") from None


def parse_index(text: str) -> DatasetIndex:
    """Parse an index file; label/RMSD contradictions are an error."""
    records: list[PoseRecord] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if not 7 <= len(fields) <= 9:
            raise FormatError(f"line {lineno}: expected 7 to 9 fields, got {len(fields)}")
        if fields[0] not in ("0", "1"):
            raise FormatError(f"line {lineno}: label must be 0 or 1, got {fields[0]!r}")
        label = int(fields[0])
        rmsd = _parse_opt(fields[1], float, "rmsd", lineno)
        if rmsd is not None:
            if rmsd < 0:
                raise FormatError(f"line {lineno}: rmsd must be nonnegative, got {rmsd}")
            expected = label_pose(rmsd)
            if expected == "positive" and label != 1 or expected == "negative" and label != 0:
                raise FormatError(
                    f"line {lineno}: label {label} contradicts rmsd {rmsd}"
                )
        vina_rank = _parse_opt(fields[7], int, "vina_rank", lineno) if len(fields) > 7 else None
        ligand_id = fields[8] if len(fields) > 8 else ""
        records.append(
            PoseRecord(
                label=label,
                rmsd=rmsd,
                target_id=fields[2],
                cluster_id=fields[3],
                source=fields[4],
                receptor_ref=fields[5],
                ligand_ref=fields[6],
                vina_rank=vina_rank,
                ligand_id=ligand_id,
            )
        )
    if not records:
        raise FormatError("index contains no records")
    return DatasetIndex(tuple(records))


def format_index(index: DatasetIndex) -> str:
    lines = []
    for r in index.records:
        fields = [
            str(r.label),
            "-" if r.rmsd is None else f"{r.rmsd:.4f}",
            r.target_id,
            r.cluster_id,
            r.source,
            r.receptor_ref,
            r.ligand_ref,
            "-" if r.vina_rank is None else str(r.vina_rank),
            r.ligand_id,
        ]
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def make_folds(index: DatasetIndex, k: int = 3) -> list[list[int]]:
    """Split record positions into k folds without splitting any cluster.

    Clusters are placed largest first into the currently smallest fold, so
    fold sizes differ by at most the largest cluster. Deterministic: ties in
    cluster size break by first appearance, ties in fold size by fold index.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    clusters = index.by_cluster()
    if len(clusters) < k:
        raise ValueError(f"cannot make {k} folds from {len(clusters)} clusters")
    ordered = sorted(clusters.items(), key=lambda kv: -len(kv[1]))
    folds: list[list[int]] = [[] for _ in range(k)]
    for _, positions in ordered:
        smallest = min(range(k), key=lambda i: len(folds[i]))
        folds[smallest].extend(positions)
    for fold in folds:
        fold.sort()
    return folds


def fold_split(index: DatasetIndex, folds: list[list[int]],
               held: int) -> tuple[DatasetIndex, DatasetIndex]:
    """(train, test) indexes with fold `held` as the test side."""
    if not 0 <= held < len(folds):
        raise ValueError(f"fold {held} out of range for {len(folds)} folds")
    train = [i for f, members in enumerate(folds) if f != held for i in members]
    return index.subset(sorted(train)), index.subset(folds[held])


@dataclass(frozen=True)
class SolverConfig:
    """Optimization settings, file-loadable as key=value lines."""

    batch_size: int = 10
    base_lr: float = 0.01
    momentum: float = 0.9
    lr_policy: str = "inverse"
    power: float = 1.0
    gamma: float = 0.001
    weight_decay: float = 0.001
    dropout_ratio: float = 0.5
    iterations: int = 10000
    seed: int = 0
    max_translate: float = 2.0
    rotate: bool = True

    def __post_init__(self):
        if self.batch_size <= 0 or self.batch_size % 2:
            raise ValueError(f"batch_size must be a positive even number, got {self.batch_size}")
        if self.lr_policy != "inverse":
            raise ValueError(f"unsupported lr_policy {self.lr_policy!r}")
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0 <= self.dropout_ratio < 1:
            raise ValueError(f"dropout_ratio must be in [0, 1), got {self.dropout_ratio}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.max_translate < 0:
            raise ValueError(f"max_translate must be >= 0, got {self.max_translate}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


_SOLVER_FIELDS = {
    "batch_size": int,
    "base_lr": float,
    "momentum": float,
    "lr_policy": str,
    "power": float,
    "gamma": float,
    "weight_decay": float,
    "dropout_ratio": float,
    "iterations": int,
    "seed": int,
    "max_translate": float,
}


def parse_solver_config(text: str) -> SolverConfig:
    """Parse key=value solver settings; unknown keys are an error."""
    kwargs = {}
    for key, value in parse_key_values(text).items():
        if key == "rotate":
            kwargs[key] = parse_bool(value, key=key)
        elif key in _SOLVER_FIELDS:
            try:
                kwargs[key] = _SOLVER_FIELDS[key](value)
            except ValueError:
                raise FormatError(f"{key}: bad value {value!r}") from None
        else:
            raise FormatError(f"unknown solver key {key!r}")
    try:
        return SolverConfig(**kwargs)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def format_solver_config(config: SolverConfig) -> str:
    lines = []
    for name in SolverConfig.__dataclass_fields__:
        value = getattr(config, name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def lr_at(iteration: int, config: SolverConfig) -> float:
    """Inverse-decay schedule: base_lr * (1 + gamma * iteration) ** -power."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return config.base_lr * (1.0 + config.gamma * iteration) ** (-config.power)


def sgd_step(weights: tensornet.WeightSet, gradients: tensornet.WeightSet,
             velocity: tensornet.WeightSet, iteration: int, config: SolverConfig) -> None:
    """One momentum-SGD update, in place:

        v <- momentum * v - lr * (gradient + weight_decay * w)
        w <- w + v

    Biases (the "b" arrays) are exempt from weight decay. Raises
    TrainingDivergedError if any update would introduce non-finite values.
    """
    lr = lr_at(iteration, config)
    for i, key, w in weights.iter_params():
        g = gradients.layers[i][key]
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(iteration, f"gradient for layer {i} {key!r}")
        decay = 0.0 if key == "b" else config.weight_decay
        v = velocity.layers[i][key]
        v *= config.momentum
        v -= lr * (g + decay * w)
        w += v
        if not np.all(np.isfinite(w)):
            raise TrainingDivergedError(iteration, f"weights for layer {i} {key!r}")


class MoleculeStore:
    """Loads and caches typed molecules from disk.

    Paths ending in .gninatypes parse as the binary format; anything else
    parses as text. Receptor files are shared across many poses, so caching
    is by path.
    """

    def __init__(self, base_dir, scheme: AtomTypeScheme, radii=None):
        self.base_dir = Path(base_dir)
        self.scheme = scheme
        self.radii = radii
        self._cache: dict[tuple[str, str], Molecule] = {}

    def load(self, ref: str, role: str) -> Molecule:
        key = (ref, role)
        if key not in self._cache:
            path = self.base_dir / ref
            if not path.exists():
                raise FileNotFoundError(f"structure file {path} does not exist")
            if path.suffix == ".gninatypes":
                mol = parse_structure(path.read_bytes(), "gninatypes",
                                      name=path.stem, radii=self.radii)
            else:
                mol = parse_structure(path.read_text(), "text",
                                      name=path.stem, radii=self.radii)
            if mol.role != role:
                raise FormatError(f"{path}: expected a {role} structure, got {mol.role}")
            if mol.scheme != self.scheme.name:
                mol, _ = assign_types(mol, self.scheme)
            self._cache[key] = mol
        return self._cache[key]

    def __call__(self, record: PoseRecord):
        receptor = self.load(record.receptor_ref, "receptor")
        ligand = self.load(record.ligand_ref, "ligand")
        return receptor, ligand, ligand.typed_centroid()


class ComplexGridSource:
    """Turns index positions into voxel grids via a complex loader.

    `loader(record) -> (receptor, ligand, center)` supplies typed molecules;
    the source voxelizes them under one GridConfig with a caller-supplied
    rigid transform.
    """

    def __init__(self, index: DatasetIndex, grid_config: GridConfig, loader):
        self.index = index
        self.grid_config = grid_config
        self.loader = loader

    def render(self, position: int, transform: Transform | None = None) -> np.ndarray:
        record = self.index.records[position]
        receptor, ligand, center = self.loader(record)
        return voxelize(receptor, ligand, center, self.grid_config, transform).values


class ArrayGridSource:
    """Serves pre-voxelized grids; only the identity transform is valid."""

    def __init__(self, index: DatasetIndex, grids: np.ndarray):
        grids = np.asarray(grids)
        if grids.ndim != 5 or grids.shape[0] != len(index):
            raise ValueError(
                f"need (n_records, channels, n, n, n) grids, got {grids.shape} "
                f"for {len(index)} records"
            )
        self.index = index
        self.grids = grids

    def render(self, position: int, transform: Transform | None = None) -> np.ndarray:
        if transform is not None and (
            not np.array_equal(transform.quaternion, [1.0, 0.0, 0.0, 0.0])
            or np.any(transform.translation)
        ):
            raise ValueError("pre-voxelized grids cannot be re-posed; disable augmentation")
        return self.grids[position]


class BalancedSampler:
    """Draws class-balanced batches from an index.

    Each class cycles its own eligible records: shuffled, consumed in order,
    reshuffled at every wrap. A batch is batch_size/2 records per class in
    shuffled order, each voxelized with a freshly sampled transform when
    augmentation is on.
    """

    def __init__(self, index: DatasetIndex, source, solver: SolverConfig):
        self.index = index
        self.source = source
        self.solver = solver
        self._pools = {
            "positive": index.training_positions("positive"),
            "negative": index.training_positions("negative"),
        }
        for cls, pool in self._pools.items():
            if not pool:
                raise ValueError(f"index has no {cls} training examples")
        self._order: dict[str, list[int]] = {"positive": [], "negative": []}
        self._cursor = {"positive": 0, "negative": 0}

    def _next_position(self, cls: str, rng: np.random.Generator) -> int:
        if self._cursor[cls] >= len(self._order[cls]):
            pool = self._pools[cls]
            self._order[cls] = [pool[j] for j in rng.permutation(len(pool))]
            self._cursor[cls] = 0
        pos = self._order[cls][self._cursor[cls]]
        self._cursor[cls] += 1
        return pos

    def _transform(self, rng: np.random.Generator, augment: bool) -> Transform | None:
        if not augment:
            return None
        if not self.solver.rotate and self.solver.max_translate == 0:
            return None
        return sample_transform(rng, self.solver.max_translate, self.solver.rotate)

    def render_next(self, cls: str, rng: np.random.Generator,
                    augment: bool = True) -> tuple[np.ndarray, int]:
        """One example of the given class, for building mixed streams."""
        pos = self._next_position(cls, rng)
        grid = self.source.render(pos, self._transform(rng, augment))
        return grid, 1 if cls == "positive" else 0

    def next_batch(self, rng: np.random.Generator,
                   augment: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """One batch: exactly batch_size/2 of each class, order shuffled."""
        half = self.solver.batch_size // 2
        drawn = [(self._next_position("positive", rng), 1) for _ in range(half)]
        drawn += [(self._next_position("negative", rng), 0) for _ in range(half)]
        order = rng.permutation(len(drawn))
        grids = []
        labels = []
        for j in order:
            pos, label = drawn[j]
            grids.append(self.source.render(pos, self._transform(rng, augment)))
            labels.append(label)
        return np.stack(grids), np.array(labels, dtype=np.intp)


def example_stream(sampler: BalancedSampler, rng: np.random.Generator,
                   augment: bool = True):
    """Endless stream alternating positive and negative examples."""
    while True:
        yield sampler.render_next("positive", rng, augment)
        yield sampler.render_next("negative", rng, augment)


def mix_sources(stream_a, stream_b, ratio: tuple[int, int] = (2, 1)):
    """Interleave two example streams in a fixed cyclic ratio.

    ratio (2, 1) yields a, a, b, a, a, b, ... Exactness is per cycle at the
    example level; batch boundaries cut the cycle wherever they fall.
    """
    ra, rb = ratio
    if ra < 0 or rb < 0 or ra + rb == 0:
        raise ValueError(f"ratio must be nonnegative and nonzero, got {ratio}")
    while True:
        for _ in range(ra):
            yield next(stream_a)
        for _ in range(rb):
            yield next(stream_b)


def score_positions(spec: tensornet.NetworkSpec, weights: tensornet.WeightSet,
                    source, positions=None, batch: int = 16) -> np.ndarray:
    """Deterministic scores (positive-class probability, test mode,
    identity transform) for index positions."""
    if positions is None:
        positions = range(len(source.index))
    positions = list(positions)
    scores = np.empty(len(positions), dtype=np.float64)
    for start in range(0, len(positions), batch):
        chunk = positions[start:start + batch]
        x = np.stack([source.render(p, None) for p in chunk])
        probs = tensornet.forward(spec, weights, x, mode="test")
        scores[start:start + len(chunk)] = probs[:, 1]
    return scores


def scored_examples(index: DatasetIndex, scores: np.ndarray) -> list[evalkit.ScoredExample]:
    """Pair index records with their scores for the metrics layer."""
    if len(scores) != len(index):
        raise ValueError(f"{len(scores)} scores for {len(index)} records")
    return [
        evalkit.ScoredExample(
            score=float(s),
            label=r.label,
            target_id=r.target_id,
            ligand_id=r.ligand_id,
            pose_rank=r.vina_rank,
            rmsd=r.rmsd,
        )
        for r, s in zip(index.records, scores)
    ]


@dataclass
class TraceEntry:
    iteration: int
    lr: float
    loss: float
    train_auc: float | None = None
    eval_auc: float | None = None


@dataclass
class TrainResult:
    weights: tensornet.WeightSet
    trace: list[TraceEntry]
    iterations_run: int
    stopped_early: bool


def train(spec: tensornet.NetworkSpec, solver: SolverConfig, source,
          *, eval_source=None, mix_with=None, mix_ratio: tuple[int, int] = (2, 1),
          dtype=np.float64, trace_every: int = 250, trace_auc: bool = True,
          target_train_auc: float | None = None,
          rng: np.random.Generator | None = None) -> TrainResult:
    """Run momentum SGD from fresh weights.

    All randomness (init, sampling, augmentation, dropout) flows from one
    generator seeded by solver.seed, so equal configs give equal weights.
    At every trace point the training set is rescored deterministically;
    training stops early once that AUC reaches target_train_auc, when set.
    `mix_with` blends a second BalancedSampler-backed source into the batch
    stream at `mix_ratio`.
    """
    if trace_every < 0:
        raise ValueError(f"trace_every must be >= 0, got {trace_every}")
    if rng is None:
        rng = np.random.default_rng(solver.seed)
    weights = tensornet.init_weights(spec, rng, dtype=dtype)
    velocity = weights.zeros_like()
    sampler = BalancedSampler(source.index, source, solver)
    stream = None
    if mix_with is not None:
        other = BalancedSampler(mix_with.index, mix_with, solver)
        stream = mix_sources(example_stream(sampler, rng), example_stream(other, rng),
                             mix_ratio)

    trace: list[TraceEntry] = []
    stopped = False
    it = 0
    for it in range(solver.iterations):
        if stream is None:
            x, labels = sampler.next_batch(rng)
        else:
            drawn = [next(stream) for _ in range(solver.batch_size)]
            x = np.stack([g for g, _ in drawn])
            labels = np.array([l for _, l in drawn], dtype=np.intp)
        result = tensornet.backward(spec, weights, x.astype(dtype, copy=False),
                                    labels, mode="train", rng=rng)
        if not np.isfinite(result.loss):
            raise TrainingDivergedError(it, "loss")
        sgd_step(weights, result.gradients, velocity, it, solver)

        last = it == solver.iterations - 1
        if last or (trace_every and (it + 1) % trace_every == 0):
            entry = TraceEntry(iteration=it + 1, lr=lr_at(it, solver), loss=result.loss)
            if trace_auc:
                scores = score_positions(spec, weights, source)
                try:
                    _, entry.train_auc = evalkit.roc_auc(
                        scored_examples(source.index, scores)
                    )
                except ValueError:
                    entry.train_auc = None
            if eval_source is not None:
                scores = score_positions(spec, weights, eval_source)
                try:
                    _, entry.eval_auc = evalkit.roc_auc(
                        scored_examples(eval_source.index, scores)
                    )
                except ValueError:
                    entry.eval_auc = None
            trace.append(entry)
            if (target_train_auc is not None and entry.train_auc is not None
                    and entry.train_auc >= target_train_auc):
                stopped = True
                break
    return TrainResult(weights=weights, trace=trace,
                       iterations_run=it + 1 if solver.iterations else 0,
                       stopped_early=stopped)


def format_trace(trace) -> str:
    lines = ["\t".join(["iteration", "lr", "loss", "train_auc", "eval_auc"])]
    for e in trace:
        lines.append(
            "\t".join(
                [
                    str(e.iteration),
                    f"{e.lr:.8g}",
                    f"{e.loss:.8g}",
                    "-" if e.train_auc is None else f"{e.train_auc:.6f}",
                    "-" if e.eval_auc is None else f"{e.eval_auc:.6f}",
                ]
            )
        )
    return "\n".join(lines) + "\n"
