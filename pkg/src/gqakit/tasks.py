"""Synthetic classification tasks, training, and evaluation.

Two token-sequence tasks exercise the model end to end:

majority: token ids 1..n_classes act as class markers; the label is the
    marker occurring strictly most often. Sequences are built per class
    so the label distribution is exactly balanced and ties cannot occur.
    With exclusive_markers a sequence contains only its own class
    marker, which makes the task linearly solvable.

first_last: binary label, 1 when the first and last tokens match.

Training is plain AdamW (decoupled weight decay) written against the
model's named tensors, deterministic for a given seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from gqakit.errors import ConfigError, InputError, TrainingError
from gqakit.merge import layer_projection_oracle
from gqakit.model import Checkpoint, backward, copy_checkpoint, forward, named_tensors
from gqakit.numerics import Rng, derive_seed

TASKS = ("majority", "first_last")


@dataclass(frozen=True)
class TaskSpec:
    task: str
    vocab_size: int
    seq_len: int
    n_classes: int
    exclusive_markers: bool = False
    dense: bool = False

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.seq_len < 3:
            raise ConfigError("seq_len must be >= 3")
        if self.task == "majority":
            if self.n_classes < 2:
                raise ConfigError("majority task needs n_classes >= 2")
            if self.vocab_size <= self.n_classes:
                raise ConfigError(
                    "vocab_size must exceed n_classes so filler tokens exist")
            if self.dense and self.exclusive_markers:
                raise ConfigError("dense and exclusive_markers are mutually exclusive")
            if self.dense and 2 * self.n_classes + 1 > self.seq_len:
                raise ConfigError(
                    "dense sequences need seq_len >= 2 * n_classes + 1")
        else:
            if self.n_classes != 2:
                raise ConfigError("first_last task is binary")
            if self.vocab_size < 2:
                raise ConfigError("first_last task needs vocab_size >= 2")
            if self.dense or self.exclusive_markers:
                raise ConfigError("marker flags only apply to the majority task")

    def to_dict(self) -> dict:
        return {"task": self.task, "vocab_size": self.vocab_size,
                "seq_len": self.seq_len, "n_classes": self.n_classes,
                "exclusive_markers": self.exclusive_markers, "dense": self.dense}

    @staticmethod
    def from_dict(d: dict) -> "TaskSpec":
        spec = TaskSpec(task=d["task"], vocab_size=int(d["vocab_size"]),
                        seq_len=int(d["seq_len"]), n_classes=int(d["n_classes"]),
                        exclusive_markers=bool(d.get("exclusive_markers", False)),
                        dense=bool(d.get("dense", False)))
        spec.validate()
        return spec


@dataclass
class Dataset:
    spec: TaskSpec
    tokens: np.ndarray  # (n, seq_len) int64
    labels: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        if n < 1 or n > len(self):
            raise InputError(f"subset size {n} out of range for {len(self)} examples")
        return Dataset(self.spec, self.tokens[:n], self.labels[:n])


def _filler_ids(spec: TaskSpec) -> np.ndarray:
    ids = [0] + list(range(spec.n_classes + 1, spec.vocab_size))
    return np.asarray(ids, dtype=np.int64)


def _majority_sequence(spec: TaskSpec, label: int, rng: Rng) -> np.ndarray:
    t = spec.seq_len
    fillers = _filler_ids(spec)
    marker = label + 1
    if spec.dense:
        # every marker present, winner ahead by exactly one: the label
        # hinges on a count difference of a single token
        own_max = (t + spec.n_classes - 1) // spec.n_classes
        own = 2 + rng.randint(own_max - 1)
        counts = {marker: own}
        for c in range(spec.n_classes):
            if c != label:
                counts[c + 1] = own - 1
    else:
        while True:
            own = 2 + rng.randint(max(1, t // 3 - 1))
            counts = {marker: own}
            for c in range(spec.n_classes):
                if c == label:
                    continue
                counts[c + 1] = 0 if spec.exclusive_markers else rng.randint(own)
            if sum(counts.values()) <= t:
                break
    seq = np.empty(t, dtype=np.int64)
    pos = rng.permutation(t)
    i = 0
    for tok, cnt in counts.items():
        seq[pos[i:i + cnt]] = tok
        i += cnt
    seq[pos[i:]] = fillers[rng.randint_array(len(fillers), t - i)]
    return seq


def gen_dataset(spec: TaskSpec, n_examples: int, seed: int) -> Dataset:
    """Deterministic dataset with an exactly balanced label distribution."""
    spec.validate()
    if n_examples < 1:
        raise InputError("n_examples must be >= 1")
    rng = Rng(derive_seed(seed, "dataset", spec.task))
    t = spec.seq_len
    labels = np.concatenate([
        np.full(n_examples // spec.n_classes + (1 if c < n_examples % spec.n_classes else 0),
                c, dtype=np.int64)
        for c in range(spec.n_classes)])
    labels = labels[rng.permutation(n_examples)]
    tokens = np.empty((n_examples, t), dtype=np.int64)
    if spec.task == "majority":
        for i, lab in enumerate(labels):
            tokens[i] = _majority_sequence(spec, int(lab), rng)
    else:
        for i, lab in enumerate(labels):
            seq = rng.randint_array(spec.vocab_size, t)
            if lab == 1:
                seq[-1] = seq[0]
            elif seq[-1] == seq[0]:
                seq[-1] = (seq[0] + 1 + rng.randint(spec.vocab_size - 1)) % spec.vocab_size
            tokens[i] = seq
    return Dataset(spec=spec, tokens=tokens, labels=labels)


def calibration_batch(dataset: Dataset, n_sequences: int = 8, seed: int = 0) -> np.ndarray:
    """Fixed token batch for activation capture, drawn without replacement."""
    if n_sequences < 1 or n_sequences > len(dataset):
        raise InputError(f"cannot draw {n_sequences} sequences from {len(dataset)}")
    rng = Rng(derive_seed(seed, "calibration"))
    idx = rng.permutation(len(dataset))[:n_sequences]
    return dataset.tokens[np.sort(idx)]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(ckpt: Checkpoint, dataset: Dataset, batch_size: int = 256) -> float:
    """Classification accuracy over the whole dataset."""
    correct = 0
    for lo in range(0, len(dataset), batch_size):
        logits, _ = forward(ckpt, dataset.tokens[lo:lo + batch_size])
        correct += int((logits.argmax(axis=1) == dataset.labels[lo:lo + batch_size]).sum())
    return correct / len(dataset)


ORACLE_EVAL_SIZE = 512


def make_evaluator(val: Dataset,
                   n_examples: int = ORACLE_EVAL_SIZE) -> Callable[[Checkpoint], float]:
    """Checkpoint accuracy on a fixed validation prefix; the scoring
    function handed to the conversion pipeline."""
    fixed = val.subset(min(n_examples, len(val)))
    return lambda ckpt: evaluate(ckpt, fixed)


def make_search_oracle(ckpt: Checkpoint, dataset: Dataset, layer_index: int,
                       projection: str, n_examples: int = ORACLE_EVAL_SIZE):
    """Grouping-level accuracy oracle for one layer and projection.

    Each call merges the candidate grouping into a scratch copy of the
    checkpoint (other projection untouched) and evaluates it on a fixed
    prefix of `dataset`; the checkpoint itself is never mutated.
    """
    return layer_projection_oracle(ckpt, layer_index, projection,
                                   make_evaluator(dataset, n_examples))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    val_acc: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochStats] = field(default_factory=list)

    @property
    def final_val_acc(self) -> float:
        return self.history[-1].val_acc


def _adamw_step(params, grads, m_state, v_state, t, cfg: TrainConfig) -> None:
    for name, p in params:
        g = grads[name]
        m = m_state[name]
        v = v_state[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** t)
        vhat = v / (1 - cfg.beta2 ** t)
        update = mhat / (np.sqrt(vhat) + cfg.eps)
        if p.ndim > 1:
            # decoupled weight decay on matrices only, not biases or norms
            update = update + cfg.weight_decay * p
        p -= cfg.lr * update


def train(ckpt: Checkpoint, train_set: Dataset, val_set: Dataset,
          cfg: TrainConfig) -> TrainResult:
    """AdamW training loop; returns a new checkpoint, input left untouched.

    Grouped layers stay grouped: gradients for a shared key/value tensor
    sum over its heads, so fine-tuning preserves the merged structure.
    """
    cfg.validate()
    out = copy_checkpoint(ckpt)
    params = named_tensors(out)
    m_state = {name: np.zeros_like(p) for name, p in params}
    v_state = {name: np.zeros_like(p) for name, p in params}
    rng = Rng(derive_seed(cfg.seed, "train"))
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        for lo in range(0, len(train_set), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss, grads = backward(out, train_set.tokens[idx], train_set.labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            step += 1
            _adamw_step(params, grads, m_state, v_state, step, cfg)
            losses.append(loss)
        history.append(EpochStats(epoch=epoch, loss=float(np.mean(losses)),
                                  val_acc=evaluate(out, val_set)))
    return TrainResult(checkpoint=out, history=history)


def finetune(ckpt: Checkpoint, train_set: Dataset, val_set: Dataset,
             cfg: TrainConfig | None = None, *, epochs: int = 3,
             seed: int = 0) -> TrainResult:
    """Short recovery training after conversion; three epochs by default."""
    if cfg is None:
        cfg = TrainConfig(epochs=epochs, seed=seed)
    return train(ckpt, train_set, val_set, cfg)


def save_history_csv(history: list[EpochStats], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss", "val_acc"])
        for row in history:
            w.writerow([row.epoch, repr(row.loss), repr(row.val_acc)])
