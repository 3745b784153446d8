# bats/bisim_embed.py
"""
State embedding whose euclidean latent distance approximates the on-policy
bisimulation metric of the logging policy.

Sampled pairs (i, j) are pushed toward
    ‖z_i − z_j‖ = |r_i − r_j| + γ·‖P̂(z̄_i, a_i) − P̂(z̄_j, a_j)‖
with z̄ the stop-gradient latent and P̂ a deterministic latent transition model.
"""
from __future__ import annotations
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
from scipy.stats import spearmanr
from torch import nn
from tqdm import tqdm

from b_types.config_types import BisimConfig
from bats.dataset import TrajectoryDataset
from bats.distance import Normalizer
from bats.errors import InputError, TrainingError, VersionError
from utils.helpers import derive_seed
from utils.log import get_logger

logger = get_logger(__name__)

CHECKPOINT_FORMAT = "bats-bisim"
CHECKPOINT_VERSION = 1


def _mlp(in_dim: int, hidden: List[int], out_dim: int) -> nn.Sequential:
    layers: List[nn.Module] = []
    d = in_dim
    for h in hidden:
        layers += [nn.Linear(d, h), nn.ReLU()]
        d = h
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


class BisimEmbedding(nn.Module):
    def __init__(self, state_dim: int, action_dim: int, config: BisimConfig, normalizer: Normalizer,
                 reward_scale: float = 1.0) -> None:
        super().__init__()
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.config = config
        self.latent_dim = config.latent_dim
        self.normalizer = normalizer
        self.reward_scale = float(reward_scale)
        self.encoder = _mlp(state_dim, config.hidden_sizes, config.latent_dim)
        self.transition = _mlp(config.latent_dim + action_dim, config.model_hidden_sizes, config.latent_dim)
        self.reward = _mlp(config.latent_dim, config.model_hidden_sizes, 1)
        self.loss_history: List[float] = []

    def _prepare(self, states: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(self.normalizer.normalize(states), dtype=torch.float32)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    @torch.no_grad()
    def encode(self, states: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if s.shape[1] != self.state_dim:
            raise InputError(f"expected states with {self.state_dim} dims, got {s.shape[1]}")
        was_training = self.training
        self.eval()
        z = self.encoder(self._prepare(s)).double().numpy()
        self.train(was_training)
        return z


def embed_distance(embedding: BisimEmbedding, s: np.ndarray, s_prime: np.ndarray) -> float:
    z = embedding.encode(np.stack([np.asarray(s, dtype=np.float64), np.asarray(s_prime, dtype=np.float64)]))
    return float(np.linalg.norm(z[0] - z[1]))


def pair_terms(
    embedding: BisimEmbedding,
    s_i: torch.Tensor, a_i: torch.Tensor, r_i: torch.Tensor,
    s_j: torch.Tensor, a_j: torch.Tensor, r_j: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Online latent distance, its regression target, and the latents/next-latent predictions of side i."""
    z_i, z_j = embedding.encoder(s_i), embedding.encoder(s_j)
    next_i = embedding.transition(torch.cat([z_i.detach(), a_i], dim=-1))
    next_j = embedding.transition(torch.cat([z_j.detach(), a_j], dim=-1))
    online = torch.sqrt(((z_i - z_j) ** 2).sum(dim=-1) + 1e-12)
    with torch.no_grad():
        target = (r_i - r_j).abs() + embedding.config.discount * torch.linalg.vector_norm(next_i - next_j, dim=-1)
    return online, target, z_i, next_i


def train_bisim(data: TrajectoryDataset, config: BisimConfig, rng_seed: int) -> BisimEmbedding:
    flat = data.flat()
    n = flat["rewards"].shape[0]
    if n == 0:
        raise InputError("cannot train an embedding on an empty dataset")
    r_std = float(np.std(flat["rewards"]))
    reward_scale = 1.0 / r_std if r_std > 1e-12 else 1.0

    torch.manual_seed(derive_seed(rng_seed, "bisim"))
    rng = np.random.default_rng(derive_seed(rng_seed, "bisim-batches"))
    emb = BisimEmbedding(data.state_dim, data.action_dim, config, data.normalization, reward_scale)
    states = emb._prepare(flat["states"])
    next_states = emb._prepare(flat["next_states"])
    actions = torch.as_tensor(flat["actions"], dtype=torch.float32)
    rewards = torch.as_tensor(flat["rewards"] * reward_scale, dtype=torch.float32)

    opt = torch.optim.Adam(emb.parameters(), lr=config.learning_rate)
    window: List[float] = []
    baseline: Optional[float] = None
    batch = min(config.batch_size, n)
    for step in tqdm(range(config.steps), desc="bisim", disable=None):
        idx = torch.as_tensor(rng.integers(0, n, size=batch))
        perm = torch.as_tensor(rng.permutation(batch))
        s, a, r, s2 = states[idx], actions[idx], rewards[idx], next_states[idx]

        online, target, z, pred_next = pair_terms(emb, s, a, r, s[perm], a[perm], r[perm])
        bisim = ((online - target) ** 2).mean()
        with torch.no_grad():
            z_next = emb.encoder(s2)
        transition = ((pred_next - z_next) ** 2).sum(dim=-1).mean()
        reward = ((emb.reward(z).squeeze(-1) - r) ** 2).mean()
        loss = bisim + transition + reward
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite bisimulation loss at step {step}")

        opt.zero_grad()
        loss.backward()
        opt.step()

        value = float(loss)
        emb.loss_history.append(value)
        window.append(value)
        if len(window) == config.log_every:
            avg = float(np.mean(window))
            window = []
            if baseline is None:
                baseline = avg
            elif avg > config.divergence_factor * baseline:
                raise TrainingError(f"bisimulation loss diverged: {avg:.4g} > {config.divergence_factor} x {baseline:.4g}")
            logger.debug("step %d: loss %.5f", step + 1, avg)
    emb.eval()
    logger.info("trained %d-d embedding for %d steps, final loss %.5f",
                config.latent_dim, config.steps, emb.loss_history[-1])
    return emb


def rank_agreement(embedding: BisimEmbedding, states: np.ndarray, distances: np.ndarray) -> float:
    """Spearman correlation between latent distances and a reference distance table over all pairs."""
    z = embedding.encode(states)
    latent = np.linalg.norm(z[:, None, :] - z[None, :, :], axis=-1)
    iu = np.triu_indices(len(z), k=1)
    rho = spearmanr(latent[iu], np.asarray(distances)[iu]).correlation
    return float(rho)


# ───────────────────────── checkpoints ─────────────────────────
def save_embedding(embedding: BisimEmbedding, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "state_dim": embedding.state_dim,
        "action_dim": embedding.action_dim,
        "config": embedding.config.model_dump(),
        "normalizer": embedding.normalizer.to_dict(),
        "reward_scale": embedding.reward_scale,
        "loss_history": embedding.loss_history,
        "weights": embedding.state_dict(),
    }, path)


def load_embedding(path: str | Path) -> BisimEmbedding:
    path = Path(path)
    if not path.exists():
        raise InputError(f"embedding checkpoint not found: {path}")
    try:
        ckpt = torch.load(path, weights_only=True)
    except Exception as e:
        raise VersionError(f"cannot read embedding checkpoint {path}: {e}") from e
    if ckpt.get("format") != CHECKPOINT_FORMAT or ckpt.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path} is not a version-{CHECKPOINT_VERSION} embedding checkpoint")
    emb = BisimEmbedding(
        int(ckpt["state_dim"]), int(ckpt["action_dim"]), BisimConfig(**ckpt["config"]),
        Normalizer.from_dict(ckpt["normalizer"]), float(ckpt["reward_scale"]),
    )
    emb.load_state_dict(ckpt["weights"])
    emb.loss_history = list(ckpt["loss_history"])
    emb.eval()
    return emb
