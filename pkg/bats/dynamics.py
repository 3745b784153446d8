# bats/dynamics.py
"""
Learned (and known) one-step models used by the stitching planner.

Everything the planner needs is on `ModelEnsemble`: per-member next-state
prediction on member-specific batches, a reward model, and independent
per-member rollouts of action sequences.
"""
from __future__ import annotations
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple
import math

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from b_types.config_types import DynamicsConfig
from bats.dataset import TrajectoryDataset
from bats.distance import DistanceMetric, EuclideanMetric, Normalizer
from bats.errors import InputError, TrainingError, VersionError
from utils.helpers import derive_seed
from utils.log import get_logger

logger = get_logger(__name__)

CHECKPOINT_FORMAT = "bats-dynamics"
CHECKPOINT_VERSION = 1


class Prediction(NamedTuple):
    members: np.ndarray      # (M, state_dim)
    mean: np.ndarray         # (state_dim,)


def quantile_nearest_rank(values: np.ndarray, q: float, axis: int = 0) -> np.ndarray:
    """Smallest value whose rank covers a fraction q of the sample (no interpolation)."""
    if not 0.0 < q <= 1.0:
        raise InputError(f"quantile must lie in (0, 1], got {q}")
    v = np.sort(np.asarray(values, dtype=np.float64), axis=axis)
    n = v.shape[axis]
    rank = min(max(math.ceil(q * n - 1e-12), 1), n)
    return np.take(v, rank - 1, axis=axis)


class ModelEnsemble(ABC):
    def __init__(self, state_dim: int, action_dim: int) -> None:
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)

    @property
    @abstractmethod
    def n_members(self) -> int:
        ...

    @abstractmethod
    def step_members(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """states (M, B, ds), actions (B, da) → mean next states (M, B, ds); member m sees states[m]."""

    @abstractmethod
    def predict_reward_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """(B, ds), (B, da) → (B,)"""

    def predict_members_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        return self.step_members(np.broadcast_to(s, (self.n_members, *s.shape)), np.asarray(actions, dtype=np.float64))

    def predict(self, state: np.ndarray, action: np.ndarray) -> Prediction:
        state = np.asarray(state, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        if state.shape != (self.state_dim,) or action.shape != (self.action_dim,):
            raise InputError(
                f"expected state ({self.state_dim},) and action ({self.action_dim},), got {state.shape} and {action.shape}"
            )
        members = self.predict_members_batch(state[None], action[None])[:, 0, :]
        return Prediction(members=members, mean=members.mean(axis=0))

    def rollout_members(self, start: np.ndarray, action_seqs: np.ndarray) -> np.ndarray:
        """
        Roll every member independently through each sequence.
        start (ds,), action_seqs (P, k, da) → states (M, P, k, ds) after each action.
        """
        seqs = np.asarray(action_seqs, dtype=np.float64)
        if seqs.ndim != 3 or seqs.shape[2] != self.action_dim or seqs.shape[1] < 1:
            raise InputError(f"action sequences must be (P, k>=1, {self.action_dim}), got {seqs.shape}")
        start = np.asarray(start, dtype=np.float64)
        if start.shape != (self.state_dim,):
            raise InputError(f"start state must be ({self.state_dim},), got {start.shape}")
        n_seq, k, _ = seqs.shape
        s = np.broadcast_to(start, (self.n_members, n_seq, self.state_dim)).copy()
        out = np.empty((self.n_members, n_seq, k, self.state_dim))
        for t in range(k):
            s = self.step_members(s, seqs[:, t, :])
            out[:, :, t, :] = s
        return out


def predict(ensemble: ModelEnsemble, state: np.ndarray, action: np.ndarray) -> Prediction:
    return ensemble.predict(state, action)


def member_quantile_distance(
    ensemble: ModelEnsemble,
    state: np.ndarray,
    actions: np.ndarray,
    target: np.ndarray,
    q: float = 0.8,
    metric: Optional[DistanceMetric] = None,
) -> float:
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim == 1:
        actions = actions[:, None] if ensemble.action_dim == 1 else actions[None, :]
    if actions.shape[0] == 0:
        raise InputError("empty action sequence")
    metric = metric or EuclideanMetric()
    final = ensemble.rollout_members(state, actions[None])[:, 0, -1, :]
    return float(quantile_nearest_rank(metric.distance(final, np.asarray(target, dtype=np.float64)), q))


# ───────────────────────── known models ─────────────────────────
StepFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class FunctionEnsemble(ModelEnsemble):
    """Members are plain batched callables; used for oracle models and closed-form checks."""

    def __init__(
        self,
        members: Sequence[StepFn],
        reward_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
        state_dim: int,
        action_dim: int,
    ) -> None:
        super().__init__(state_dim, action_dim)
        if not members:
            raise InputError("an ensemble needs at least one member")
        self.members = list(members)
        self.reward_fn = reward_fn

    @property
    def n_members(self) -> int:
        return len(self.members)

    def step_members(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.stack([
            np.asarray(f(states[m], actions), dtype=np.float64) for m, f in enumerate(self.members)
        ])

    def predict_reward_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.asarray(self.reward_fn(np.asarray(states, dtype=np.float64), np.asarray(actions, dtype=np.float64)),
                          dtype=np.float64).reshape(-1)

    @classmethod
    def from_env(cls, env, n_members: int = 1) -> "FunctionEnsemble":
        def step(s, a):
            return env.step_batch(s, a)[0]

        def reward(s, a):
            return env.step_batch(s, a)[1]

        return cls([step] * n_members, reward, env.state_dim, env.action_dim)


# ───────────────────────── torch networks ─────────────────────────
def _mlp(in_dim: int, hidden: Sequence[int], out_dim: int) -> nn.Sequential:
    layers: List[nn.Module] = []
    d = in_dim
    for h in hidden:
        layers += [nn.Linear(d, h), nn.SiLU()]
        d = h
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


class GaussianMLP(nn.Module):
    """
    (normalized s, a) → (mean normalized delta, log-variance). Learned soft bounds
    shape the log-variance; the configured limits clamp it hard.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: Sequence[int], min_logvar: float, max_logvar: float) -> None:
        super().__init__()
        self.out_dim = out_dim
        self.net = _mlp(in_dim, hidden, 2 * out_dim)
        self.max_logvar = nn.Parameter(torch.full((out_dim,), float(max_logvar)))
        self.min_logvar = nn.Parameter(torch.full((out_dim,), float(min_logvar)))
        self.register_buffer("logvar_floor", torch.full((out_dim,), float(min_logvar)))
        self.register_buffer("logvar_ceiling", torch.full((out_dim,), float(max_logvar)))

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        mu, raw = self.net(x).split(self.out_dim, dim=-1)
        logvar = self.max_logvar - nn.functional.softplus(self.max_logvar - raw)
        logvar = self.min_logvar + nn.functional.softplus(logvar - self.min_logvar)
        logvar = torch.maximum(torch.minimum(logvar, self.logvar_ceiling), self.logvar_floor)
        return mu, logvar


def _reward_mlp(in_dim: int, hidden: Sequence[int]) -> nn.Sequential:
    net = _mlp(in_dim, hidden, 1)
    nn.init.zeros_(net[-1].weight)
    nn.init.zeros_(net[-1].bias)
    return net


def _to_tensor(x: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float32))


@dataclass
class _Normalizers:
    inputs: Normalizer
    deltas: Normalizer
    reward: Normalizer

    def to_dict(self) -> Dict[str, Dict]:
        return {"inputs": self.inputs.to_dict(), "deltas": self.deltas.to_dict(), "reward": self.reward.to_dict()}

    @classmethod
    def from_dict(cls, d: Dict[str, Dict]) -> "_Normalizers":
        return cls(**{k: Normalizer.from_dict(v) for k, v in d.items()})


class DynamicsEnsemble(ModelEnsemble):
    def __init__(
        self,
        *,
        members: Sequence[GaussianMLP],
        reward_head: nn.Module,
        normalizers: _Normalizers,
        state_dim: int,
        action_dim: int,
        config: DynamicsConfig,
        validation_losses: Sequence[float],
        kept_indices: Sequence[int],
    ) -> None:
        super().__init__(state_dim, action_dim)
        self.members = list(members)
        self.reward_head = reward_head
        self.normalizers = normalizers
        self.config = config
        self.n_trained = config.n_trained
        self.n_kept = len(self.members)
        self.validation_losses = [float(v) for v in validation_losses]
        self.kept_indices = [int(i) for i in kept_indices]
        for net in (*self.members, self.reward_head):
            net.eval()

    @property
    def n_members(self) -> int:
        return len(self.members)

    def _inputs(self, states: np.ndarray, actions: np.ndarray) -> torch.Tensor:
        return _to_tensor(self.normalizers.inputs.normalize(np.concatenate([states, actions], axis=-1)))

    @torch.no_grad()
    def step_members(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        out = np.empty_like(states)
        for m, net in enumerate(self.members):
            mu, _ = net(self._inputs(states[m], actions))
            out[m] = states[m] + self.normalizers.deltas.denormalize(mu.double().numpy())
        return out

    @torch.no_grad()
    def predict_reward_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        z = self.reward_head(self._inputs(np.asarray(states, np.float64), np.asarray(actions, np.float64)))
        return self.normalizers.reward.denormalize(z.double().numpy()).reshape(-1)


# ───────────────────────── training ─────────────────────────
def _make_optimizer(params, config: DynamicsConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate)
    return torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)


def _fit(
    net: nn.Module,
    loss_fn: Callable[[nn.Module, torch.Tensor, torch.Tensor], torch.Tensor],
    val_fn: Callable[[nn.Module, torch.Tensor, torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    y: torch.Tensor,
    x_val: torch.Tensor,
    y_val: torch.Tensor,
    train_idx: np.ndarray,
    config: DynamicsConfig,
    rng: np.random.Generator,
    member: Optional[int],
) -> float:
    """Minibatch training with early stopping on validation; restores the best weights."""
    opt = _make_optimizer(net.parameters(), config)
    best = math.inf
    best_state = {k: v.clone() for k, v in net.state_dict().items()}
    stale = 0
    for epoch in range(config.max_epochs):
        net.train()
        order = rng.permutation(train_idx)
        for lo in range(0, len(order), config.batch_size):
            batch = torch.as_tensor(order[lo:lo + config.batch_size])
            loss = loss_fn(net, x[batch], y[batch])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}", member=member)
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(net.parameters(), config.grad_clip)
            opt.step()
        net.eval()
        with torch.no_grad():
            val = float(val_fn(net, x_val, y_val))
        if not math.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", member=member)
        if val < best:
            best, stale = val, 0
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
        else:
            stale += 1
            if stale >= config.patience:
                break
    net.load_state_dict(best_state)
    net.eval()
    return best


def _nll(net: GaussianMLP, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    mu, logvar = net(x)
    nll = ((mu - y) ** 2 * torch.exp(-logvar) + logvar).mean()
    return nll + 0.01 * (net.max_logvar.sum() - net.min_logvar.sum())


def _mean_mse(net: GaussianMLP, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return ((net(x)[0] - y) ** 2).mean()


def _reward_mse(net: nn.Module, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return ((net(x) - y) ** 2).mean()


def validation_size(config: DynamicsConfig, n_records: int) -> int:
    if config.validation_size is not None:
        return config.validation_size
    return max(1, min(1000, n_records // 10))


def train_ensemble(data: TrajectoryDataset, config: DynamicsConfig, rng_seed: int) -> DynamicsEnsemble:
    flat = data.flat()
    n = flat["rewards"].shape[0]
    n_val = validation_size(config, n)
    if n < n_val + config.batch_size:
        raise InputError(f"need at least {n_val + config.batch_size} records to train, have {n}")

    inputs = np.concatenate([flat["states"], flat["actions"]], axis=1)
    deltas = flat["next_states"] - flat["states"]
    rewards = flat["rewards"][:, None]
    norms = _Normalizers(Normalizer.fit(inputs), Normalizer.fit(deltas), Normalizer.fit(rewards))
    x = _to_tensor(norms.inputs.normalize(inputs))
    y = _to_tensor(norms.deltas.normalize(deltas))
    yr = _to_tensor(norms.reward.normalize(rewards))

    rng = np.random.default_rng(derive_seed(rng_seed, "split"))
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    x_val = x[torch.as_tensor(val_idx)]
    in_dim, out_dim = inputs.shape[1], deltas.shape[1]

    members: List[GaussianMLP] = []
    losses: List[float] = []
    for m in tqdm(range(config.n_trained), desc="dynamics members", disable=None):
        torch.manual_seed(derive_seed(rng_seed, "member", m))
        member_rng = np.random.default_rng(derive_seed(rng_seed, "bootstrap", m))
        boot = member_rng.choice(train_idx, size=train_idx.shape[0], replace=True)
        net = GaussianMLP(in_dim, out_dim, config.hidden_sizes, config.min_logvar, config.max_logvar)
        val = _fit(net, _nll, _mean_mse, x, y, x_val, y[torch.as_tensor(val_idx)],
                   boot, config, member_rng, member=m)
        logger.info("member %d: validation mse %.6g", m, val)
        members.append(net)
        losses.append(val)

    ranking = sorted(range(config.n_trained), key=lambda i: (losses[i], i))
    kept = ranking[:config.n_kept]

    torch.manual_seed(derive_seed(rng_seed, "reward"))
    reward_head = _reward_mlp(in_dim, config.hidden_sizes)
    reward_val = _fit(reward_head, _reward_mse, _reward_mse, x, yr, x_val, yr[torch.as_tensor(val_idx)],
                      train_idx, config, np.random.default_rng(derive_seed(rng_seed, "reward")), member=None)
    logger.info("kept members %s; reward head validation mse %.6g", kept, reward_val)

    return DynamicsEnsemble(
        members=[members[i] for i in kept],
        reward_head=reward_head,
        normalizers=norms,
        state_dim=data.state_dim,
        action_dim=data.action_dim,
        config=config,
        validation_losses=losses,
        kept_indices=kept,
    )


# ───────────────────────── checkpoints ─────────────────────────
def save_ensemble(ensemble: DynamicsEnsemble, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "state_dim": ensemble.state_dim,
        "action_dim": ensemble.action_dim,
        "config": ensemble.config.model_dump(),
        "normalizers": ensemble.normalizers.to_dict(),
        "validation_losses": ensemble.validation_losses,
        "kept_indices": ensemble.kept_indices,
        "members": [net.state_dict() for net in ensemble.members],
        "reward_head": ensemble.reward_head.state_dict(),
    }, path)


def load_ensemble(path: str | Path) -> DynamicsEnsemble:
    try:
        ckpt = torch.load(path, weights_only=True)
    except Exception as e:
        raise VersionError(f"cannot read dynamics checkpoint {path}: {e}") from e
    if ckpt.get("format") != CHECKPOINT_FORMAT or ckpt.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path} is not a version-{CHECKPOINT_VERSION} dynamics checkpoint")
    config = DynamicsConfig(**ckpt["config"])
    ds, da = int(ckpt["state_dim"]), int(ckpt["action_dim"])
    members = []
    for sd in ckpt["members"]:
        net = GaussianMLP(ds + da, ds, config.hidden_sizes, config.min_logvar, config.max_logvar)
        net.load_state_dict(sd)
        members.append(net)
    reward_head = _reward_mlp(ds + da, config.hidden_sizes)
    reward_head.load_state_dict(ckpt["reward_head"])
    return DynamicsEnsemble(
        members=members,
        reward_head=reward_head,
        normalizers=_Normalizers.from_dict(ckpt["normalizers"]),
        state_dim=ds,
        action_dim=da,
        config=config,
        validation_losses=ckpt["validation_losses"],
        kept_indices=ckpt["kept_indices"],
    )
