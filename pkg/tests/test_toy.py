"""Toy backend training, determinism, and checkpointing."""
from __future__ import annotations

import dataclasses

import numpy as np
import pytest
import torch

from latentdrag import (
    ParameterError,
    ToyBackend,
    ToyModelConfig,
    TrainingError,
    load_checkpoint,
    make_shape_corpus,
    save_checkpoint,
    toy_train,
)

SMALL = ToyModelConfig(
    image_size=16, base_width=8, depth=2, attention_resolutions=(8, 4),
    num_steps=10, epochs=2, batch_size=8, learning_rate=2e-3, seed=3,
)


def test_image_size_depth_invariant():
    with pytest.raises(ParameterError):
        ToyModelConfig(image_size=20, depth=3)


def test_zero_epochs_returns_initialization():
    corpus = make_shape_corpus(24, 16, seed=0)
    cfg = dataclasses.replace(SMALL, epochs=0)
    trained = toy_train(corpus, cfg)
    fresh = ToyBackend(cfg)
    assert trained.state_signature() == fresh.state_signature()
    assert trained.train_history["loss"] == []


def test_training_reduces_loss():
    corpus = make_shape_corpus(48, 16, seed=0)
    backend = toy_train(corpus, SMALL)
    h = backend.train_history
    assert h["val_final"] < h["val_initial"]
    assert np.mean(h["loss"][-5:]) < np.mean(h["loss"][:5])


def test_training_is_deterministic():
    corpus = make_shape_corpus(24, 16, seed=0)
    a = toy_train(corpus, SMALL)
    b = toy_train(corpus, SMALL)
    assert a.state_signature() == b.state_signature()


def test_empty_corpus_rejected():
    corpus = make_shape_corpus(2, 16, seed=0)
    corpus.images = corpus.images[:0]
    corpus.labels = corpus.labels[:0]
    with pytest.raises(ParameterError):
        toy_train(corpus, SMALL)


def test_divergence_raises_training_error():
    corpus = make_shape_corpus(24, 16, seed=0)
    cfg = dataclasses.replace(SMALL, learning_rate=1e14, epochs=4)
    with pytest.raises(TrainingError):
        toy_train(corpus, cfg)


def test_checkpoint_roundtrip(tmp_path):
    corpus = make_shape_corpus(24, 16, seed=0)
    backend = toy_train(corpus, SMALL)
    save_checkpoint(backend, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt")
    assert loaded.state_signature() == backend.state_signature()
    assert loaded.config == backend.config
    assert loaded.corpus_hash == corpus.content_hash()
    z = torch.randn(backend.latent_shape, generator=torch.Generator().manual_seed(0))
    assert torch.equal(loaded.noise_forward(z, 3, None), backend.noise_forward(z, 3, None))


def test_prompt_encoding():
    backend = ToyBackend(SMALL)
    assert backend.encode_prompt(None) == backend.null_class
    assert backend.encode_prompt("disc") == 0
    assert backend.encode_prompt("square") == 1
    from latentdrag import CapabilityError

    with pytest.raises(CapabilityError):
        backend.encode_prompt("a cat on a mat")
