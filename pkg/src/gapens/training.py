"""Datasets, splits, the mini-batch training loop, evaluation and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from ._io import atomic_write_text
from .chem import MolGraph, mol_from_smiles
from .errors import (
    BadFractions,
    BadHeader,
    CheckpointIOError,
    CorruptTensor,
    EmptyInput,
    IndexOutOfRange,
    MissingTargets,
    OverlappingSplits,
    ParseError,
    SmilesError,
    VersionMismatch,
)
from .models import EncodedGraph, GraphBatch, ModelConfig, ModelParams, bayes_weight_count, build_batch, forward, init_params, predict_batch

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
HEADER = ["smiles", "homolumogap"]


# --- datasets ------------------------------------------------------------


@dataclass
class Dataset:
    smiles: list[str]
    molecules: list[MolGraph]
    targets: list[float | None]
    encoded: list[EncodedGraph] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not (len(self.smiles) == len(self.molecules) == len(self.targets)):
            raise ValueError("smiles, molecules and targets must have equal length")
        if not self.encoded:
            self.encoded = [EncodedGraph.from_mol(m) for m in self.molecules]

    def __len__(self) -> int:
        return len(self.molecules)

    @classmethod
    def from_smiles(cls, smiles: Sequence[str], targets: Sequence[float | None] | None = None) -> "Dataset":
        targets = list(targets) if targets is not None else [None] * len(smiles)
        return cls(list(smiles), [mol_from_smiles(s) for s in smiles], targets)

    def batch(self, indices: Sequence[int]) -> GraphBatch:
        return build_batch([self.encoded[i] for i in indices])

    def target_array(self, indices: Sequence[int]) -> np.ndarray:
        missing = [int(i) for i in indices if self.targets[i] is None]
        if missing:
            raise MissingTargets(f"no target for {len(missing)} molecule(s), first index {missing[0]}")
        return np.array([self.targets[i] for i in indices], dtype=np.float64)


@dataclass
class RowFailure:
    row: int  # line number in the file; the header is line 1
    smiles: str
    reason: str


def read_dataset(path) -> tuple[Dataset, list[RowFailure]]:
    """Parse a ``smiles,homolumogap`` CSV, collecting rather than raising row failures."""
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != HEADER:
            raise BadHeader(f"{path}: expected header {','.join(HEADER)!r}, got {header!r}")
        smiles, mols, targets, failures = [], [], [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            s = row[0].strip()
            gap_text = row[1].strip() if len(row) > 1 else ""
            try:
                mol = mol_from_smiles(s)
                gap = float(gap_text) if gap_text else None
            except (SmilesError, EmptyInput, ValueError) as exc:
                failures.append(RowFailure(row_no, s, str(exc)))
                continue
            smiles.append(s)
            mols.append(mol)
            targets.append(gap)
    return Dataset(smiles, mols, targets), failures


def load_dataset(path) -> Dataset:
    dataset, failures = read_dataset(path)
    if failures:
        raise ParseError([f.row for f in failures], failures[0].reason)
    return dataset


# --- splits ---------------------------------------------------------------


@dataclass
class SplitSpec:
    train: list[int]
    valid: list[int]
    test: list[int]

    def validate(self, n: int | None = None) -> "SplitSpec":
        parts = {"train": self.train, "valid": self.valid, "test": self.test}
        if n is not None:
            for name, idx in parts.items():
                bad = [i for i in idx if not 0 <= i < n]
                if bad:
                    raise IndexOutOfRange(f"{name} index {bad[0]} outside [0, {n})")
        seen: dict[int, str] = {}
        for name, idx in parts.items():
            for i in idx:
                if i in seen:
                    raise OverlappingSplits(f"index {i} appears in both {seen[i]} and {name}")
                seen[i] = name
        return self

    def to_json(self) -> str:
        return json.dumps({"train": self.train, "valid": self.valid, "test": self.test})


def make_split(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitSpec:
    """Seeded shuffle, then contiguous train/valid/test slices."""
    if n < 3:
        raise BadFractions(f"need at least 3 items to split, got {n}")
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
        raise BadFractions(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_valid = int(np.floor(n * fr[1] + 1e-9))
    n_test = int(np.floor(n * fr[2] + 1e-9))
    n_train = n - n_valid - n_test
    perm = np.random.default_rng(seed).permutation(n).tolist()
    return SplitSpec(perm[:n_train], perm[n_train : n_train + n_valid], perm[n_train + n_valid :])


def load_split(path, n: int | None = None) -> SplitSpec:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        split = SplitSpec(*([int(i) for i in doc[k]] for k in ("train", "valid", "test")))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: split file needs integer arrays train, valid, test") from exc
    return split.validate(n)


def save_split(path, split: SplitSpec) -> None:
    atomic_write_text(path, split.to_json() + "\n")


# --- configuration -------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    lr_decay: float = 0.25
    lr_decay_every: int = 30
    seed: int = 0
    eval_batch_size: int = 256
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two rows)")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for the zero-based ``epoch``."""
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# --- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    params: ModelParams
    metadata: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    @property
    def variant(self) -> str:
        return self.params.config.variant


def checkpoint_to_json(ckpt: Checkpoint) -> str:
    tensors = {}
    for name, t in ckpt.params.tensors.items():
        tensors[name] = {"shape": list(t.shape), "data": t.data.ravel().tolist()}
    for name, state in ckpt.params.bn.items():
        for stat in ("running_mean", "running_var"):
            arr = getattr(state, stat)
            tensors[f"{name}.{stat}"] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
    doc = {
        "format_version": FORMAT_VERSION,
        "variant": ckpt.variant,
        "config": ckpt.config.to_dict(),
        "metadata": ckpt.metadata,
        "tensors": tensors,
    }
    return json.dumps(doc, allow_nan=False)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write_text(path, checkpoint_to_json(ckpt))


def _read_tensor(name: str, entry, shape: tuple[int, ...]) -> np.ndarray:
    try:
        stored_shape = tuple(int(s) for s in entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptTensor(name, "malformed entry") from exc
    if stored_shape != shape:
        raise CorruptTensor(name, f"shape {stored_shape}, expected {shape}")
    if data.ndim != 1 or data.size != int(np.prod(shape)):
        raise CorruptTensor(name, f"{data.size} values for shape {shape}")
    if not np.all(np.isfinite(data)):
        raise CorruptTensor(name, "non-finite values")
    return data.reshape(shape)


def load_checkpoint(path, variant: str | None = None) -> Checkpoint:
    """Load a checkpoint; ``variant`` (if given) must match the stored one."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CheckpointIOError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointIOError(f"checkpoint {path} is truncated or not JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        found = doc.get("format_version") if isinstance(doc, dict) else None
        raise VersionMismatch(f"checkpoint format_version {found!r}, expected {FORMAT_VERSION}")
    stored = doc.get("variant")
    if variant is not None and stored != variant:
        raise VersionMismatch(f"checkpoint holds {stored!r}, requested {variant!r}")
    config = ModelConfig.from_dict(doc["config"])
    if config.variant != stored:
        raise VersionMismatch(f"variant field {stored!r} disagrees with config {config.variant!r}")

    # A throwaway initialization fixes the expected names and shapes.
    params = init_params(config, np.random.default_rng(0))
    tensors = doc.get("tensors", {})
    for name, t in params.tensors.items():
        if name not in tensors:
            raise CorruptTensor(name, "missing")
        t.data = _read_tensor(name, tensors[name], t.shape)
    for name, state in params.bn.items():
        for stat in ("running_mean", "running_var"):
            key = f"{name}.{stat}"
            if key not in tensors:
                raise CorruptTensor(key, "missing")
            setattr(state, stat, _read_tensor(key, tensors[key], getattr(state, stat).shape))
    return Checkpoint(params=params, metadata=doc.get("metadata", {}))


# --- training loop -----------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_mae: float | None


def history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "valid_mae"])
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss), "" if r.valid_mae is None else repr(r.valid_mae)])
    return buf.getvalue()


def _batches(indices: Sequence[int], size: int, drop_small: bool) -> list[list[int]]:
    out = [list(indices[i : i + size]) for i in range(0, len(indices), size)]
    if drop_small and out and len(out[-1]) < 2:
        out.pop()
    return out


def predict_params(params: ModelParams, dataset: Dataset, indices: Sequence[int], batch_size: int = 256) -> np.ndarray:
    indices = [int(i) for i in indices]
    if not indices:
        return np.zeros(0)
    parts = [predict_batch(params, dataset.batch(chunk)) for chunk in _batches(indices, batch_size, drop_small=False)]
    return np.concatenate(parts)


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.abs(pred - target)))


def train(dataset: Dataset, split: SplitSpec, config: TrainConfig) -> tuple[Checkpoint, list[EpochRecord]]:
    """Train one weak learner.  Every random draw derives from ``config.seed``."""
    split.validate(len(dataset))
    if not split.train:
        raise EmptyInput("training split is empty")
    dataset.target_array(split.train)
    valid_targets = dataset.target_array(split.valid) if split.valid else None

    init_ss, shuffle_ss, noise_ss = np.random.SeedSequence(config.seed).spawn(3)
    params = init_params(config.model, np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    noise_rng = np.random.default_rng(noise_ss)

    mcfg = config.model
    trainable = params.trainable()
    state = nx.AdamState(lr=config.lr)
    n_batches = len(_batches(split.train, config.batch_size, drop_small=True))
    if n_batches == 0:
        raise EmptyInput("training split yields no batch of size >= 2")
    kl_scale = 0.0
    if mcfg.variant == "gin_virtual_bnn":
        kl_scale = mcfg.bnn.kl_weight / n_batches
        if mcfg.bnn.kl_reduction == "mean":
            kl_scale /= bayes_weight_count(params)

    history: list[EpochRecord] = []
    for epoch in range(config.epochs):
        state.lr = config.lr_at(epoch)
        order = shuffle_rng.permutation(np.asarray(split.train)).tolist()
        losses = []
        for chunk in _batches(order, config.batch_size, drop_small=True):
            nx.reset_tape()
            batch = dataset.batch(chunk)
            out = forward(params, batch, "train", noise_rng)
            loss = nx.l1_loss(out.pred, dataset.target_array(chunk))
            if out.kl is not None:
                loss = nx.add(loss, nx.scale(out.kl, kl_scale))
            if out.aux is not None:
                loss = nx.add(loss, nx.scale(out.aux, mcfg.diffpool.aux_weight))
            grads = nx.grad(loss, trainable)
            nx.adam_step(trainable, grads, state)
            losses.append(loss.item())
        nx.reset_tape()

        valid_mae = None
        if valid_targets is not None:
            valid_mae = mae(predict_params(params, dataset, split.valid, config.eval_batch_size), valid_targets)
        history.append(EpochRecord(epoch + 1, float(np.mean(losses)), valid_mae))
        log.info("epoch %d train_loss %.6f valid_mae %s", epoch + 1, history[-1].train_loss, valid_mae)

    metadata = {
        "seed": config.seed,
        "epochs": config.epochs,
        "valid_mae": history[-1].valid_mae,
        "eval_batch_size": config.eval_batch_size,
    }
    return Checkpoint(params=params, metadata=metadata), history


def predict(ckpt: Checkpoint, dataset: Dataset, indices: Sequence[int]) -> np.ndarray:
    """Eval-mode clamped predictions, in the order of ``indices``."""
    batch_size = int(ckpt.metadata.get("eval_batch_size", 256))
    return predict_params(ckpt.params, dataset, indices, batch_size)


def evaluate_mae(ckpt: Checkpoint, dataset: Dataset, indices: Sequence[int]) -> float:
    targets = dataset.target_array(indices)
    if len(targets) == 0:
        raise EmptyInput("evaluate_mae on no molecules")
    return mae(predict(ckpt, dataset, indices), targets)


__all__ = [
    "Checkpoint",
    "Dataset",
    "EpochRecord",
    "SplitSpec",
    "TrainConfig",
    "checkpoint_to_json",
    "evaluate_mae",
    "history_csv",
    "load_checkpoint",
    "load_dataset",
    "load_split",
    "make_split",
    "predict",
    "read_dataset",
    "save_checkpoint",
    "save_split",
    "train",
]
