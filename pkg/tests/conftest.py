"""Shared fixtures: stub backends and a small trained toy backend."""
from __future__ import annotations

from typing import Any, Callable, Optional

import numpy as np
import pytest
import torch

from latentdrag import (
    ModelBackend,
    NoiseSchedule,
    ShapeCorpus,
    ToyBackend,
    ToyModelConfig,
    build_schedule,
    make_shape_corpus,
    toy_train,
)


class StubBackend(ModelBackend):
    """Backend whose noise prediction is an arbitrary function of (z, t, emb)."""

    supports_cfg = True

    def __init__(
        self,
        latent_shape: tuple[int, int, int],
        schedule: NoiseSchedule,
        fn: Callable[[torch.Tensor, int, Any], torch.Tensor],
        feature_fn: Optional[Callable[[torch.Tensor, int, Any, int], torch.Tensor]] = None,
    ) -> None:
        self.latent_shape = latent_shape
        self.schedule = schedule
        self._fn = fn
        self._feature_fn = feature_fn
        self.feature_blocks = (1, 2, 3, 4) if feature_fn is not None else ()
        self.calls = 0

    def noise_forward(self, z: torch.Tensor, t: int, embedding: Any, branch: str = "pos") -> torch.Tensor:
        self.calls += 1
        return self._fn(z, t, embedding)

    def capture_features(self, z: torch.Tensor, t: int, embedding: Any, block: int) -> torch.Tensor:
        assert self._feature_fn is not None
        return self._feature_fn(z, t, embedding, block)


def constant_backend(latent_shape, schedule, value: float = 0.3) -> StubBackend:
    return StubBackend(latent_shape, schedule, lambda z, t, e: torch.full(latent_shape, value, dtype=z.dtype))


def perfect_eps_backend(latent_shape, schedule, eps: torch.Tensor) -> StubBackend:
    """Stub that always predicts the exact noise used to corrupt the latent."""
    return StubBackend(latent_shape, schedule, lambda z, t, e: eps.to(z.dtype))


# Toy configuration used by the acceptance suite and the heavier tests.
# Tuned on the synthetic corpus: half-resolution block-3 features and a
# schedule with ~20% signal energy at t=35 give honest point tracking.
TOY_CONFIG = ToyModelConfig(
    image_size=32,
    base_width=16,
    depth=4,
    attention_resolutions=(8, 16),
    num_steps=50,
    epochs=12,
    batch_size=16,
    learning_rate=2e-3,
    seed=0,
)

TINY_CONFIG = ToyModelConfig(
    image_size=16,
    base_width=8,
    depth=2,
    attention_resolutions=(8, 4),
    num_steps=10,
    epochs=0,
    seed=0,
)


@pytest.fixture(scope="session")
def toy_corpus() -> ShapeCorpus:
    return make_shape_corpus(360, TOY_CONFIG.image_size, seed=1)


@pytest.fixture(scope="session")
def trained_backend(toy_corpus) -> ToyBackend:
    return toy_train(toy_corpus, TOY_CONFIG)


@pytest.fixture()
def tiny_backend() -> ToyBackend:
    return ToyBackend(TINY_CONFIG)


@pytest.fixture()
def tiny_schedule() -> NoiseSchedule:
    return build_schedule(10)
