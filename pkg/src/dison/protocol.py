"""Decentralized isolation: a source node and a target node that exchange only parameters.

Per round both nodes start from the global parameters, take ``E`` local
steps (source: mini-batches labelled 0, target: the single sample labelled
1), the target sends its local parameters to the source, and the source
aggregates ``alpha * source + (1 - alpha) * target``. The source then checks
its accuracy on the whole source set and returns the new global parameters
with that flag; the target checks its stability window and decides whether
to stop. The OOD score is the number of rounds.

In the class-conditional variant the target node first predicts the
sample's class with the pretrained model and sends only that index; the
source node then samples mini-batches from that class alone.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import AugmentPolicy, NO_AUGMENT, Dataset, class_subset
from .isolation import (
    ConvergenceConfig,
    ConvergenceState,
    SourceBatches,
    Streams,
    TargetViews,
    evaluation_subset,
    initialize_isolation_params,
    patch_side,
    source_accuracy,
    target_score,
)
from .transport import (
    Endpoint,
    GlobalParams,
    InitModel,
    LocalParams,
    PredictedClass,
    ProtocolError,
    TcpListener,
    Terminate,
    channel_pair,
    params_checksum,
    tcp_dial,
)

MISCLASS_MODES = ("none", "all_wrong", "id_wrong", "ood_wrong")


class EmptyClassError(ValueError):
    pass


@dataclass(frozen=True)
class AggregationWeights:
    alpha: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def beta(self) -> float:
        return 1.0 - self.alpha

    @classmethod
    def from_oversampling(cls, batch_size: int, n_target: int) -> "AggregationWeights":
        """Weights that make one local SGD step equal a centralized step with ``n_target`` replicas."""
        return cls(batch_size / (batch_size + n_target))


@dataclass(frozen=True)
class RoundPlan:
    local_steps: int | None = None     # None: about one pass over the source set per round
    max_rounds: int = 100
    alpha: float = 0.8
    batch_size: int = 16
    class_conditional: bool = False
    misclass_mode: str = "none"

    def __post_init__(self):
        if self.local_steps is not None and self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")
        if self.max_rounds < 1 or self.batch_size < 1:
            raise ValueError("max_rounds and batch_size must be >= 1")
        if self.misclass_mode not in MISCLASS_MODES:
            raise ValueError(f"misclass_mode must be one of {MISCLASS_MODES}")
        AggregationWeights(self.alpha)

    @property
    def weights(self) -> AggregationWeights:
        return AggregationWeights(self.alpha)

    def resolved(self, source_size: int) -> "RoundPlan":
        """Fix ``local_steps`` so one round is about one pass over the source set."""
        if self.local_steps is not None:
            return self
        return replace(self, local_steps=max(1, round(source_size / self.batch_size)))

    def force_wrong(self, is_ood: bool) -> bool:
        """Harness-side decision whether this target gets a wrong class index."""
        return (
            self.misclass_mode == "all_wrong"
            or (self.misclass_mode == "id_wrong" and not is_ood)
            or (self.misclass_mode == "ood_wrong" and is_ood)
        )


def initialize_global(spec: nn.NetworkSpec, pretrained: nn.ParameterVector, seed: int) -> nn.ParameterVector:
    return initialize_isolation_params(spec, pretrained, seed)


def predict_class(spec: nn.NetworkSpec, pretrained: nn.ParameterVector, x_t,
                  wrong: bool = False, rng: np.random.Generator | None = None) -> int:
    """Argmax of the pretrained classifier (ties to the lowest index).

    With ``wrong=True`` a class other than the prediction is drawn uniformly.
    """
    z = nn.logits(spec, pretrained, np.atleast_2d(np.asarray(x_t, dtype=pretrained.values.dtype)))[0]
    y_hat = int(np.argmax(z))
    if wrong:
        if rng is None:
            raise ValueError("a generator is needed to draw a wrong class")
        other = int(rng.integers(spec.num_classes - 1))
        y_hat = other + (other >= y_hat)
    return y_hat


def aggregate(theta_s: nn.ParameterVector, theta_t: nn.ParameterVector, weights: AggregationWeights) -> nn.ParameterVector:
    if theta_s.layout != theta_t.layout:
        raise ValueError("cannot aggregate parameters with different layouts")
    return weights.alpha * theta_s + weights.beta * theta_t


def source_local_update(spec, params: nn.ParameterVector, batches: SourceBatches,
                        optimizer: nn.OptimizerState, steps: int) -> nn.ParameterVector:
    for _ in range(steps):
        xb = batches.draw()
        params = nn.optimizer_step(optimizer, params, nn.gradient(spec, params, xb, np.zeros(len(xb)), "binary"))
    return params


def target_local_update(spec, params: nn.ParameterVector, views: TargetViews,
                        optimizer: nn.OptimizerState, steps: int) -> nn.ParameterVector:
    for _ in range(steps):
        xt = views.draw()
        params = nn.optimizer_step(optimizer, params, nn.gradient(spec, params, xt, np.ones(1), "binary"))
    return params


@dataclass
class RoundRecord:
    round: int
    target_score: float
    source_accuracy: float
    source_converged: bool
    target_stable: bool
    checksum: int


@dataclass
class SourceLog:
    predicted_class: int | None = None
    local_steps: int = 0
    accuracies: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    checksums: list = field(default_factory=list)
    params_history: list | None = None
    final_round: int | None = None
    sent: list = field(default_factory=list)
    received: list = field(default_factory=list)


@dataclass
class TargetLog:
    predicted_class: int | None = None
    scores: list = field(default_factory=list)
    stable: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    checksums: list = field(default_factory=list)
    score: int = 0
    censored: bool = True
    sent: list = field(default_factory=list)
    received: list = field(default_factory=list)


class SourceNode:
    """Holds the source set; owns initialization, aggregation and the accuracy criterion."""

    def __init__(self, spec: nn.NetworkSpec, pretrained: nn.ParameterVector, source: Dataset,
                 plan: RoundPlan, config: ConvergenceConfig, optimizer: nn.OptimizerState,
                 policy: AugmentPolicy = NO_AUGMENT, seed=0, record_params: bool = False):
        if len(source) == 0:
            raise ValueError("source dataset is empty")
        self.spec = spec
        self.pretrained = pretrained
        self.source = source
        self.plan = plan
        self.config = config
        self.optimizer = optimizer.fresh()
        self.policy = policy
        self.streams = Streams.from_seed(seed)
        self.record_params = record_params

    def run(self, ep: Endpoint) -> SourceLog:
        log = SourceLog(params_history=[] if self.record_params else None)
        pool = self.source
        if self.plan.class_conditional:
            log.predicted_class = ep.recv(PredictedClass).label
            pool = class_subset(self.source, log.predicted_class)
            if len(pool) == 0:
                raise EmptyClassError(f"no source samples of class {log.predicted_class}")
        batches = SourceBatches(pool.x, self.plan.batch_size, self.policy,
                                np.random.default_rng(self.streams.source), patch_side(self.spec))
        eval_x = evaluation_subset(self.source.x, self.config.source_eval_subsample, self.streams.evaluation)
        log.local_steps = steps = self.plan.resolved(len(self.source)).local_steps
        weights = self.plan.weights

        theta = initialize_global(self.spec, self.pretrained, self.streams.head_seed)
        ep.send(InitModel(theta.values))
        for r in range(1, self.plan.max_rounds + 2):
            theta_s = source_local_update(self.spec, theta, batches, self.optimizer, steps)
            msg = ep.recv((LocalParams, Terminate))
            if isinstance(msg, Terminate):
                log.final_round = msg.final_round
                break
            if msg.round != r:
                raise ProtocolError(f"local parameters for round {msg.round}, expected {r}")
            theta_t = nn.ParameterVector(msg.params, theta.layout)
            theta = aggregate(theta_s, theta_t, weights)
            acc = source_accuracy(self.spec, theta, eval_x)
            converged = acc >= self.config.tau
            ep.send(GlobalParams(r, theta.values, converged))
            log.accuracies.append(acc)
            log.flags.append(converged)
            log.checksums.append(params_checksum(theta.values))
            if self.record_params:
                log.params_history.append(theta.copy())
        else:
            raise ProtocolError("target node never terminated the session")
        log.sent, log.received = list(ep.sent), list(ep.received)
        return log


class TargetNode:
    """Holds one target sample; owns the class message and the stability criterion."""

    def __init__(self, spec: nn.NetworkSpec, pretrained: nn.ParameterVector, x_t: np.ndarray,
                 plan: RoundPlan, config: ConvergenceConfig, optimizer: nn.OptimizerState,
                 policy: AugmentPolicy = NO_AUGMENT, seed=0, force_wrong_class: bool = False):
        self.spec = spec
        self.pretrained = pretrained
        self.x_t = np.asarray(x_t, dtype=np.float32)
        self.plan = plan
        self.config = config
        self.optimizer = optimizer.fresh()
        self.policy = policy
        self.streams = Streams.from_seed(seed)
        self.force_wrong_class = force_wrong_class

    def run(self, ep: Endpoint) -> TargetLog:
        log = TargetLog()
        local_steps = self.plan.local_steps
        if local_steps is None:
            raise ValueError("the target node needs an explicit local_steps (see RoundPlan.resolved)")
        if self.plan.class_conditional:
            log.predicted_class = predict_class(self.spec, self.pretrained, self.x_t, self.force_wrong_class,
                                                np.random.default_rng(self.streams.harness))
            ep.send(PredictedClass(log.predicted_class))
        init = ep.recv(InitModel)
        theta = nn.ParameterVector(init.params, nn.layout(self.spec, "binary"))
        views = TargetViews(self.x_t, self.policy, np.random.default_rng(self.streams.target), patch_side(self.spec))
        state = ConvergenceState.from_config(self.config)
        log.score, log.censored = self.plan.max_rounds, True
        for r in range(1, self.plan.max_rounds + 1):
            theta_t = target_local_update(self.spec, theta, views, self.optimizer, local_steps)
            ep.send(LocalParams(r, theta_t.values))
            glob = ep.recv(GlobalParams)
            if glob.round != r:
                raise ProtocolError(f"global parameters for round {glob.round}, expected {r}")
            theta = nn.ParameterVector(glob.params, theta.layout)
            score = target_score(self.spec, theta, self.x_t)
            state.update(score, None)
            stable = state.target_stable()
            log.scores.append(score)
            log.stable.append(stable)
            log.flags.append(glob.source_converged)
            log.checksums.append(params_checksum(glob.params))
            if stable and glob.source_converged:
                log.score, log.censored = r, False
                break
        ep.send(Terminate(log.score))
        log.sent, log.received = list(ep.sent), list(ep.received)
        return log


@dataclass
class DisonResult:
    score: int
    censored: bool
    predicted_class: int | None
    local_steps: int
    rounds: list
    messages: dict
    params_history: list | None = None

    @property
    def final_checksum(self) -> int | None:
        return self.rounds[-1].checksum if self.rounds else None


def _merge(src: SourceLog, tgt: TargetLog) -> DisonResult:
    if src.checksums != tgt.checksums:
        raise ProtocolError("source and target disagree on the global parameters")
    rounds = [
        RoundRecord(r + 1, tgt.scores[r], src.accuracies[r], src.flags[r], tgt.stable[r], src.checksums[r])
        for r in range(len(tgt.scores))
    ]
    return DisonResult(
        score=tgt.score,
        censored=tgt.censored,
        predicted_class=tgt.predicted_class,
        local_steps=src.local_steps,
        rounds=rounds,
        messages={"source_sent": src.sent, "target_sent": tgt.sent},
        params_history=src.params_history,
    )


def _run_pair(source: SourceNode, target: TargetNode, connect) -> DisonResult:
    """Run the source node in a worker thread and the target node in this one."""
    outcome: dict = {}
    ready = threading.Event()

    def source_side():
        try:
            with connect("source", ready) as ep:
                outcome["source"] = source.run(ep)
        except BaseException as exc:  # re-raised in the caller thread
            outcome["error"] = exc
            ready.set()

    worker = threading.Thread(target=source_side, name="dison-source", daemon=True)
    worker.start()
    ready.wait()
    try:
        with connect("target", ready) as ep:
            outcome["target"] = target.run(ep)
    except BaseException as exc:
        worker.join()
        raise outcome.get("error", exc)
    worker.join()
    if "error" in outcome:
        raise outcome["error"]
    return _merge(outcome["source"], outcome["target"])


def run_dison(
    spec: nn.NetworkSpec,
    pretrained: nn.ParameterVector,
    source: Dataset,
    x_t: np.ndarray,
    plan: RoundPlan,
    config: ConvergenceConfig,
    optimizer: nn.OptimizerState,
    policy: AugmentPolicy = NO_AUGMENT,
    seed=0,
    transport: str = "inproc",
    force_wrong_class: bool = False,
    record_params: bool = False,
    timeout: float = 30.0,
) -> DisonResult:
    """Score one target with the two-node protocol over an in-process or loopback TCP channel."""
    plan = plan.resolved(len(source))
    src = SourceNode(spec, pretrained, source, plan, config, optimizer, policy, seed, record_params)
    tgt = TargetNode(spec, pretrained, x_t, plan, config, optimizer, policy, seed, force_wrong_class)

    if transport == "inproc":
        a, b = channel_pair(timeout)

        def connect(role, ready):
            ready.set()
            return a if role == "source" else b
    elif transport == "tcp":
        listener = TcpListener(("127.0.0.1", 0), timeout)

        def connect(role, ready):
            if role == "source":
                ready.set()
                try:
                    return listener.accept()
                finally:
                    listener.close()
            return tcp_dial(listener.address, timeout)
    else:
        raise ValueError(f"unknown transport {transport!r}")
    return _run_pair(src, tgt, connect)
