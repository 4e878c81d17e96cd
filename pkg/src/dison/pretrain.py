"""Training of the primary C-class model and checkpoint files."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset


@dataclass(frozen=True)
class PretrainConfig:
    spec: nn.NetworkSpec
    epochs: int = 50
    batch_size: int = 32
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def evaluate_accuracy(spec: nn.NetworkSpec, params: nn.ParameterVector, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return 0.0
    pred = nn.predict_proba(spec, params, dataset.x).argmax(axis=1)
    return float(np.mean(pred == dataset.y))


def pretrain(config: PretrainConfig, train: Dataset):
    """Minimize multiclass cross-entropy with shuffled mini-batches.

    Returns the final parameters and a per-epoch log of mean loss and training accuracy.
    """
    spec = config.spec
    if len(train) == 0:
        raise ValueError("training set is empty")
    if train.y.min() < 0 or train.y.max() >= spec.num_classes:
        raise ValueError("training labels out of range")
    rng = np.random.default_rng(config.seed)
    params = nn.init_params(spec, "multiclass", seed=config.seed)
    opt = nn.OptimizerState(config.optimizer, config.learning_rate)
    log = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for sl in nn.batch_indices(len(train), config.batch_size):
            idx = order[sl]
            loss, grad = nn.loss_and_gradient(spec, params, train.x[idx], train.y[idx], "multiclass")
            params = nn.optimizer_step(opt, params, grad)
            losses.append(loss * len(idx))
        log.append({
            "epoch": epoch,
            "loss": float(np.sum(losses) / len(train)),
            "accuracy": evaluate_accuracy(spec, params, train),
        })
    return params, log


_MAGIC = b"DCKP"
_HEAD = struct.Struct("<4sHI")


def save_checkpoint(path, spec: nn.NetworkSpec, params: nn.ParameterVector) -> None:
    """Magic, version, JSON header length, JSON header (spec + head), uint32 count, float32 LE values."""
    header = json.dumps({"spec": spec.to_dict(), "head": nn.head_of(params)}, sort_keys=True).encode()
    values = params.values.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(_MAGIC, 1, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", values.size))
        fh.write(values.tobytes())


def load_checkpoint(path) -> tuple[nn.NetworkSpec, nn.ParameterVector]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, hlen = _HEAD.unpack_from(raw)
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{path}: not a checkpoint file")
    off = _HEAD.size
    meta = json.loads(raw[off:off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) != off + 4 * count:
        raise ValueError(f"{path}: payload size does not match header")
    spec = nn.NetworkSpec.from_dict(meta["spec"])
    values = np.frombuffer(raw, "<f4", count, off).astype(np.float32)
    return spec, nn.ParameterVector(values, nn.layout(spec, meta["head"]))
