"""Offline actor-critic training on logged transitions.

The first ``warmup_iters`` iterations fit the critic alone, bootstrapping on
the logged next action; afterwards every minibatch takes one critic step and
one actor step.  Target networks trail the online ones by soft updates.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .actor_critic import (GPPModel, NetConfig, RiskPreference, actor_objective, batch_rewards,
                           default_risk_grid, policy_forward, risk_arrays, td_loss, value_forward)
from .dataset import Transition
from .netmodel import GraphBatch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.95
    tau: float = 5e-5
    eta: float = 1.0
    batch_size: int = 4
    epochs: int = 64
    lr: float = 1e-3
    seed: int = 0
    warmup_epochs: int = 10
    warmup_iters: int | None = None  # overrides warmup_epochs when set
    patience: int = 5
    min_delta: float = 1e-4
    early_stopping: bool = True

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("invalid batch size, epoch count or learning rate")
        if self.warmup_epochs < 0 or (self.warmup_iters is not None and self.warmup_iters < 0):
            raise ValueError("warmup length must be nonnegative")

    def iters_per_epoch(self, n_samples: int) -> int:
        return math.ceil(n_samples / self.batch_size)

    def warmup_length(self, n_samples: int) -> int:
        if self.warmup_iters is not None:
            return self.warmup_iters
        return self.warmup_epochs * self.iters_per_epoch(n_samples)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# batches
# --------------------------------------------------------------------------

@dataclass
class TransitionBatch:
    graph: GraphBatch
    graph2: GraphBatch
    x: np.ndarray
    a: np.ndarray  # (E, M) logged
    x2: np.ndarray
    a2: np.ndarray
    cap: np.ndarray
    cap2: np.ndarray

    @classmethod
    def from_transitions(cls, samples: Sequence[Transition]) -> "TransitionBatch":
        if not samples:
            raise ValueError("empty batch")
        for s in samples:
            if s.a.shape[0] != s.topo.n_edges or s.a2.shape[0] != s.topo2.n_edges:
                raise ValueError(f"action does not conform to topology ({s.sku}, week {s.week})")
            if s.x.shape[1] != s.x2.shape[1]:
                raise ValueError("x and x' must carry the same number of features")
        return cls(
            GraphBatch.from_topologies([s.topo for s in samples]),
            GraphBatch.from_topologies([s.topo2 for s in samples]),
            np.concatenate([s.x for s in samples]),
            np.concatenate([s.a for s in samples]),
            np.concatenate([s.x2 for s in samples]),
            np.concatenate([s.a2 for s in samples]),
            np.concatenate([s.cap for s in samples]),
            np.concatenate([s.cap2 for s in samples]),
        )

    @property
    def size(self) -> int:
        return self.graph.n_graphs


def _per_lambda(a: np.ndarray, n_lambda: int) -> np.ndarray:
    return np.broadcast_to(a[:, None, :], (a.shape[0], n_lambda, a.shape[1]))


# --------------------------------------------------------------------------
# steps
# --------------------------------------------------------------------------

def td_target(batch: TransitionBatch, critic_target: dc.ParamStore, actor_target: dc.ParamStore,
              cfg: NetConfig, gamma: float, risks: Sequence[RiskPreference], warmup: bool) -> np.ndarray:
    """``y = r(x') + gamma * Q_target(x', a_next)`` per sample and preference, ``(G, Lambda)``.

    ``a_next`` is the logged next action during warmup, else the target policy's.
    """
    r = batch_rewards(batch.x2, batch.graph2, risks)
    if gamma == 0.0:
        return r
    with dc.no_grad():
        if warmup:
            a_next = _per_lambda(batch.a2, cfg.n_lambda)
        else:
            a_next = policy_forward(actor_target, cfg, batch.x2, batch.graph2, batch.cap2).data
        q_next = value_forward(critic_target, cfg, batch.x2, a_next, batch.graph2).data
    return r + gamma * q_next


def _check_finite(value: float, what: str, batch: TransitionBatch) -> None:
    if not math.isfinite(value):
        raise dc.NonFiniteError(f"non-finite {what} on a batch of {batch.size} graphs "
                                f"(|x|max={np.abs(batch.x).max():.3g}, |a|max={np.abs(batch.a).max():.3g})")


def critic_step(batch: TransitionBatch, critic: dc.ParamStore, y: np.ndarray, cfg: NetConfig,
                opt: dc.OptimizerState) -> float:
    """One Adam step on the TD loss; returns the loss before the step."""
    critic.zero_grad()
    q = value_forward(critic, cfg, batch.x, _per_lambda(batch.a, cfg.n_lambda), batch.graph)
    bound = batch.graph.nodes_per_graph() * cfg.value_bound
    if np.any(np.abs(q.data) > bound[:, None] + 1e-9):
        raise AssertionError("critic output exceeds |V| / (1 - gamma)")
    loss = td_loss(q, y)
    value = loss.item()
    _check_finite(value, "TD loss", batch)
    loss.backward()
    dc.adam_step(critic, critic.grads(), opt)
    return value


def actor_step(batch: TransitionBatch, actor: dc.ParamStore, critic: dc.ParamStore, cfg: NetConfig,
               f_ref: np.ndarray, eta: float, opt: dc.OptimizerState) -> float:
    """One Adam ascent step on the regularized objective; returns it before the step."""
    actor.zero_grad()
    obj = actor_objective(actor, critic.frozen(), cfg, batch.x, batch.graph, batch.cap, f_ref, eta)
    value = obj.item()
    _check_finite(value, "actor objective", batch)
    (obj * -1.0).backward()
    dc.adam_step(actor, actor.grads(), opt)
    return value


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass
class TrainState:
    model: GPPModel
    actor_target: dc.TargetParams
    critic_target: dc.TargetParams
    actor_opt: dc.OptimizerState
    critic_opt: dc.OptimizerState
    iteration: int = 0


@dataclass
class TrainResult:
    model: GPPModel
    history: dict = field(default_factory=dict)
    checkpoints: list[str] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = -1
    warmup_iters: int = 0


def init_state(net: NetConfig, cfg: TrainConfig) -> TrainState:
    model = GPPModel.init(net, cfg.seed)
    return TrainState(model, dc.TargetParams(model.actor), dc.TargetParams(model.critic),
                      dc.OptimizerState(lr=cfg.lr), dc.OptimizerState(lr=cfg.lr))


def train_iteration(state: TrainState, batch: TransitionBatch, cfg: TrainConfig, warmup_iters: int,
                    risks: Sequence[RiskPreference]) -> tuple[float, float | None]:
    """One minibatch of critic and (after warmup) actor updates; returns ``(td_loss, actor_objective)``."""
    net = state.model.config
    warm = state.iteration < warmup_iters
    y = td_target(batch, state.critic_target, state.actor_target, net, cfg.gamma, risks, warm)
    loss = critic_step(batch, state.model.critic, y, net, state.critic_opt)
    obj = None
    if not warm:
        obj = actor_step(batch, state.model.actor, state.model.critic, net, risk_arrays(risks)[2],
                         cfg.eta, state.actor_opt)
        dc.soft_update(state.actor_target, state.model.actor, cfg.tau)
    dc.soft_update(state.critic_target, state.model.critic, cfg.tau)
    state.iteration += 1
    return loss, obj


def evaluate_td(state: TrainState, batches: Sequence[TransitionBatch], cfg: TrainConfig,
                risks: Sequence[RiskPreference], warmup: bool) -> float:
    """Mean TD loss of the online critic on held-out batches (sample weighted)."""
    net = state.model.config
    total, count = 0.0, 0
    with dc.no_grad():
        for b in batches:
            y = td_target(b, state.critic_target, state.actor_target, net, cfg.gamma, risks, warmup)
            q = value_forward(state.model.critic, net, b.x, _per_lambda(b.a, net.n_lambda), b.graph).data
            total += float(np.sum(np.mean((q - y) ** 2, axis=1)))
            count += b.size
    return total / count if count else float("nan")


def _chunks(samples: Sequence[Transition], size: int) -> list[TransitionBatch]:
    return [TransitionBatch.from_transitions(samples[i:i + size]) for i in range(0, len(samples), size)]


def train(transitions: Sequence[Transition], net: NetConfig, cfg: TrainConfig,
          val_transitions: Sequence[Transition] = (), out_dir: str | Path | None = None,
          risks: Sequence[RiskPreference] | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Run training; writes ``epoch_XXX.ckpt`` files and ``training.json`` into ``out_dir``."""
    if not transitions:
        raise ValueError("empty training dataset")
    risks = list(risks or default_risk_grid())
    if len(risks) != net.n_lambda:
        raise ValueError(f"{len(risks)} risk preferences for a network with {net.n_lambda} outputs")
    if net.gamma != cfg.gamma:
        raise ValueError("network and training discount differ")
    state = init_state(net, cfg)
    rng = np.random.default_rng([cfg.seed, 7])
    n = len(transitions)
    warmup_iters = cfg.warmup_length(n)
    val_batches = _chunks(list(val_transitions), 32)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    hist = {"epoch": [], "td_loss": [], "actor_objective": [], "val_td_loss": [], "warmup": []}
    result = TrainResult(state.model, hist, warmup_iters=warmup_iters)
    best, since_best = math.inf, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses, objs = [], []
        warm_epoch = state.iteration < warmup_iters
        for lo in range(0, n, cfg.batch_size):
            batch = TransitionBatch.from_transitions([transitions[i] for i in order[lo:lo + cfg.batch_size]])
            loss, obj = train_iteration(state, batch, cfg, warmup_iters, risks)
            losses.append(loss)
            if obj is not None:
                objs.append(obj)
        in_warmup = state.iteration <= warmup_iters
        val = evaluate_td(state, val_batches, cfg, risks, in_warmup) if val_batches else float("nan")
        hist["epoch"].append(epoch)
        hist["td_loss"].append(float(np.mean(losses)))
        hist["actor_objective"].append(float(np.mean(objs)) if objs else None)
        hist["val_td_loss"].append(val)
        hist["warmup"].append(warm_epoch)
        if out is not None:
            path = out / f"epoch_{epoch:03d}.ckpt"
            dc.save_checkpoint(path, _stores(state), {"epoch": epoch, "iteration": state.iteration})
            result.checkpoints.append(path.name)
        log.info("epoch %d td=%.5f actor=%s val=%.5f", epoch, hist["td_loss"][-1], hist["actor_objective"][-1], val)
        if progress is not None:
            progress({k: v[-1] for k, v in hist.items()})
        result.stopped_epoch = epoch
        if in_warmup or not math.isfinite(val):
            continue
        if val < best - cfg.min_delta:
            best, since_best, result.best_epoch = val, 0, epoch
        else:
            since_best += 1
            if cfg.early_stopping and since_best >= cfg.patience:
                log.info("validation loss plateaued; stopping after epoch %d", epoch)
                break
    if out is not None:
        meta = {"train_config": cfg.to_dict(), "net_config": net.to_dict(), "seed": cfg.seed,
                "risks": [asdict(r) for r in risks], "history": hist, "checkpoints": result.checkpoints,
                "stopped_epoch": result.stopped_epoch, "best_epoch": result.best_epoch,
                "warmup_iters": warmup_iters, "n_transitions": n}
        (out / "training.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return result


def _stores(state: TrainState) -> dict[str, dc.ParamStore]:
    return {"actor": state.model.actor, "critic": state.model.critic,
            "actor_target": state.actor_target, "critic_target": state.critic_target}


def load_model(path: str | Path, net: NetConfig) -> GPPModel:
    stores, _ = dc.load_checkpoint(path)
    model = GPPModel.init(net, 0)
    model.actor.load_state_dict(stores["actor"].arrays())
    model.critic.load_state_dict(stores["critic"].arrays())
    return model
