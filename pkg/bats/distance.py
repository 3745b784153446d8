# bats/distance.py
from __future__ import annotations
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional

import numpy as np

from bats.errors import ConfigError


@dataclass
class Normalizer:
    """Per-dimension standardization; zero-spread dims keep scale 1."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale < 1e-12, 1.0, scale)
        return cls(mean=mean, scale=scale)

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(mean=np.zeros(dim), scale=np.ones(dim))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.scale + self.mean

    def to_dict(self) -> Dict[str, Any]:
        return {"mean": [float(v) for v in self.mean], "scale": [float(v) for v in self.scale]}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "Normalizer":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64), scale=np.asarray(d["scale"], dtype=np.float64))


class DistanceMetric(ABC):
    """A metric realised as euclidean distance after a fixed feature map."""

    name: str = "metric"

    @abstractmethod
    def transform(self, x: np.ndarray) -> np.ndarray:
        ...

    def distance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Distance along the last axis; broadcasts like numpy."""
        return np.linalg.norm(self.transform(a) - self.transform(b), axis=-1)


class EuclideanMetric(DistanceMetric):
    name = "euclidean"

    def transform(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64)


class NormalizedMetric(DistanceMetric):
    name = "normalized"

    def __init__(self, normalizer: Normalizer) -> None:
        self.normalizer = normalizer

    def transform(self, x: np.ndarray) -> np.ndarray:
        return self.normalizer.normalize(x)


class EmbeddingMetric(DistanceMetric):
    name = "learned-embedding"

    def __init__(self, encode: Callable[[np.ndarray], np.ndarray]) -> None:
        self.encode = encode

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, x.shape[-1])
        z = self.encode(flat)
        return z.reshape(*x.shape[:-1], z.shape[-1])


def make_metric(
    spec: str,
    normalizer: Optional[Normalizer] = None,
    embedding_loader: Optional[Callable[[str], Any]] = None,
) -> DistanceMetric:
    """Parse `euclidean`, `normalized`, or `bisim:<checkpoint>`."""
    if spec == "euclidean":
        return EuclideanMetric()
    if spec == "normalized":
        if normalizer is None:
            raise ConfigError("normalized metric needs dataset normalization stats")
        return NormalizedMetric(normalizer)
    if spec.startswith("bisim:"):
        if embedding_loader is None:
            raise ConfigError("bisim metric needs an embedding loader")
        embedding = embedding_loader(spec.split(":", 1)[1])
        return EmbeddingMetric(embedding.encode)
    raise ConfigError(f"unknown metric {spec!r}")
