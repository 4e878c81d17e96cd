"""Centralized isolation network: oversampled binary objective and convergence time.

A binary head on top of the pretrained feature extractor is trained to give
the single target label 1 and every source sample label 0. The target is
replicated ``n_target`` times inside each mini-batch. The number of steps
until the target has been classified as 1 for ``e_stab`` consecutive steps
while source accuracy is at least ``tau`` is the OOD score; ID targets are
harder to isolate and so score higher.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import AugmentPolicy, NO_AUGMENT, EpochSampler, augment


@dataclass(frozen=True)
class ConvergenceConfig:
    e_stab: int = 5
    tau: float = 0.85
    max_rounds: int = 100
    source_eval_subsample: int | None = None

    def __post_init__(self):
        if self.e_stab < 1:
            raise ValueError("e_stab must be >= 1")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


@dataclass
class ConvergenceState:
    e_stab: int = 5
    tau: float = 0.85
    history: deque = field(default=None)
    source_accuracy: float | None = None
    k: int = 0

    def __post_init__(self):
        if self.history is None:
            self.history = deque(maxlen=self.e_stab)

    @classmethod
    def from_config(cls, config: ConvergenceConfig) -> "ConvergenceState":
        return cls(e_stab=config.e_stab, tau=config.tau)

    def target_stable(self) -> bool:
        return self.k >= self.e_stab and len(self.history) == self.e_stab and min(self.history) > 0.5

    def source_ok(self) -> bool:
        return self.source_accuracy is not None and self.source_accuracy >= self.tau

    def update(self, target_score: float, source_accuracy: float | None) -> bool:
        """Record the scores after one more update and report convergence."""
        self.k += 1
        self.history.append(float(target_score))
        self.source_accuracy = None if source_accuracy is None else float(source_accuracy)
        return self.target_stable() and self.source_ok()


def convergence_time(target_scores, source_accuracies, e_stab: int, tau: float) -> int | None:
    """Smallest 1-based k >= e_stab meeting both criteria on a recorded trajectory."""
    t = np.asarray(target_scores, dtype=float)
    s = np.asarray(source_accuracies, dtype=float)
    for k in range(e_stab, len(t) + 1):
        if t[k - e_stab:k].min() > 0.5 and s[k - 1] >= tau:
            return k
    return None


def target_score(spec: nn.NetworkSpec, params: nn.ParameterVector, x_t) -> float:
    return float(nn.predict_binary(spec, params, x_t)[0])


def source_accuracy(spec: nn.NetworkSpec, params: nn.ParameterVector, source_x) -> float:
    """Fraction of source samples the isolation head labels 0 (score <= 0.5)."""
    return float(np.mean(nn.predict_binary(spec, params, source_x) <= 0.5))


def check_convergence(state: ConvergenceState, spec, params, x_t, source_x) -> bool:
    return state.update(target_score(spec, params, x_t), source_accuracy(spec, params, source_x))


@dataclass
class IsolationBatch:
    source_x: np.ndarray
    target_x: np.ndarray
    n_target: int = 4

    def __post_init__(self):
        self.source_x = np.atleast_2d(self.source_x)
        if len(self.source_x) < 1:
            raise ValueError("source part of the batch is empty")
        if self.n_target < 1:
            raise ValueError("n_target must be >= 1")

    @property
    def alpha(self) -> float:
        return len(self.source_x) / (len(self.source_x) + self.n_target)

    def expanded(self):
        """Inputs and isolation labels with the target physically replicated."""
        x = np.concatenate([self.source_x, np.repeat(np.atleast_2d(self.target_x), self.n_target, axis=0)])
        m = np.concatenate([np.zeros(len(self.source_x)), np.ones(self.n_target)])
        return x, m


def centralized_loss(spec, params, batch: IsolationBatch) -> float:
    x, m = batch.expanded()
    return nn.mean_loss(spec, params, x, m, "binary")


def centralized_gradient(spec, params, batch: IsolationBatch) -> nn.ParameterVector:
    x, m = batch.expanded()
    return nn.gradient(spec, params, x, m, "binary")


def initialize_isolation_params(spec: nn.NetworkSpec, pretrained: nn.ParameterVector, seed: int) -> nn.ParameterVector:
    """Pretrained feature extractor with a freshly drawn binary head."""
    head = nn.init_params(spec, "binary", seed=seed)
    return nn.copy_feature_extractor(head, pretrained)


@dataclass(frozen=True)
class Streams:
    """Seeds shared by the centralized and decentralized runs of one target."""

    head_seed: int
    source: np.random.SeedSequence
    target: np.random.SeedSequence
    evaluation: np.random.SeedSequence
    harness: np.random.SeedSequence

    @classmethod
    def from_seed(cls, seed) -> "Streams":
        head, source, target, evaluation, harness = np.random.SeedSequence(seed).spawn(5)
        return cls(int(head.generate_state(1)[0]), source, target, evaluation, harness)


class SourceBatches:
    """Source mini-batches (sampling + augmentation) from one rng stream."""

    def __init__(self, pool_x: np.ndarray, batch_size: int, policy: AugmentPolicy,
                 rng: np.random.Generator, patch_size: int):
        if len(pool_x) == 0:
            raise ValueError("source pool is empty")
        self.pool_x = pool_x
        self.batch_size = min(batch_size, len(pool_x))
        self.augment = policy.applies_to("source")
        self.policy = policy
        self.rng = rng
        self.patch_size = patch_size
        self.sampler = EpochSampler(len(pool_x), rng)

    def draw(self) -> np.ndarray:
        xb = self.pool_x[self.sampler.next(self.batch_size)]
        if self.augment:
            xb = augment(xb, self.policy, self.rng, self.patch_size)
        return xb


class TargetViews:
    """Fresh augmented view of the target sample per update."""

    def __init__(self, x_t: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator, patch_size: int):
        self.x_t = np.asarray(x_t, dtype=np.float32)
        self.augment = policy.applies_to("target")
        self.policy = policy
        self.rng = rng
        self.patch_size = patch_size

    def draw(self) -> np.ndarray:
        if self.augment:
            return augment(self.x_t, self.policy, self.rng, self.patch_size)
        return self.x_t


def evaluation_subset(source_x: np.ndarray, cap: int | None, seq: np.random.SeedSequence) -> np.ndarray:
    if cap is None or cap >= len(source_x):
        return source_x
    idx = np.sort(np.random.default_rng(seq).choice(len(source_x), size=cap, replace=False))
    return source_x[idx]


@dataclass
class IsolationResult:
    score: int
    censored: bool
    target_scores: list = field(default_factory=list)
    source_accuracies: list = field(default_factory=list)
    params_history: list | None = None


def patch_side(spec: nn.NetworkSpec) -> int:
    side = int(round(spec.input_dim ** 0.5))
    return side if side * side == spec.input_dim else 0


def run_centralized(
    spec: nn.NetworkSpec,
    pretrained: nn.ParameterVector,
    source_x: np.ndarray,
    x_t: np.ndarray,
    optimizer: nn.OptimizerState,
    config: ConvergenceConfig = ConvergenceConfig(),
    n_target: int = 4,
    batch_size: int = 16,
    policy: AugmentPolicy = NO_AUGMENT,
    seed=0,
    source_pool: np.ndarray | None = None,
    record_params: bool = False,
) -> IsolationResult:
    """Train the isolation network step by step; the score is the convergence step K.

    ``source_pool`` restricts where mini-batches come from (class-conditional
    sampling) while accuracy is still measured on all of ``source_x``.
    Unconverged runs are censored at ``config.max_rounds``.
    """
    source_x = np.asarray(source_x, dtype=np.float32)
    if len(source_x) == 0:
        raise ValueError("source dataset is empty")
    pool = source_x if source_pool is None else np.asarray(source_pool, dtype=np.float32)
    streams = Streams.from_seed(seed)
    side = patch_side(spec)
    sources = SourceBatches(pool, batch_size, policy, np.random.default_rng(streams.source), side)
    targets = TargetViews(x_t, policy, np.random.default_rng(streams.target), side)
    eval_x = evaluation_subset(source_x, config.source_eval_subsample, streams.evaluation)

    params = initialize_isolation_params(spec, pretrained, streams.head_seed)
    opt = optimizer.fresh()
    state = ConvergenceState.from_config(config)
    result = IsolationResult(score=config.max_rounds, censored=True,
                             params_history=[] if record_params else None)
    for k in range(1, config.max_rounds + 1):
        batch = IsolationBatch(sources.draw(), targets.draw(), n_target)
        params = nn.optimizer_step(opt, params, centralized_gradient(spec, params, batch))
        t_score = target_score(spec, params, x_t)
        s_acc = source_accuracy(spec, params, eval_x)
        result.target_scores.append(t_score)
        result.source_accuracies.append(s_acc)
        if record_params:
            result.params_history.append(params.copy())
        if state.update(t_score, s_acc):
            result.score, result.censored = k, False
            break
    return result
