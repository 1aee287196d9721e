"""Scikit-learn style estimator wrapping the tri-modal sentiment model.

``SentimentRegressor`` exposes the usual fit/predict/score surface (and
``get_params``/``set_params`` via ``BaseEstimator``) so the model slots into
pipelines, grid search, and cross-validation.  Inputs are passed as a dict
of modality arrays rather than a single design matrix.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .data import DatasetSplit, ModalityBatch
from .fusion import FusionConfig
from .model import Model, ModelConfig
from .tensor import RngState
from .training import TrainConfig, predict_samples, train

MODALITY_KEYS = ("text", "audio", "vision")


def check_modalities(X, vocab_size: int | None = None) -> ModalityBatch:
    """Validate an input dict and convert it to a ModalityBatch.

    Expects ``X["text"]`` as (B, T_l) integer token ids, ``X["audio"]`` as
    (B, T_a, f_a) and ``X["vision"]`` as (B, T_v, f_v) floats; all three must
    agree on B, features must be finite, and token ids must fall inside the
    vocabulary.
    """
    if not isinstance(X, dict):
        raise ValueError("X must be a dict with keys 'text', 'audio', 'vision'")
    missing = [k for k in MODALITY_KEYS if k not in X]
    if missing:
        raise ValueError(f"X is missing modalities: {missing}")
    text = np.asarray(X["text"])
    audio = np.asarray(X["audio"], dtype=np.float64)
    vision = np.asarray(X["vision"], dtype=np.float64)
    if text.ndim != 2:
        raise ValueError("text must be (n_samples, t_text) token ids")
    if not np.issubdtype(text.dtype, np.integer):
        raise ValueError("text token ids must be integers")
    if audio.ndim != 3 or vision.ndim != 3:
        raise ValueError("audio and vision must be (n_samples, t, features)")
    batch = ModalityBatch(text, audio, vision,
                          np.zeros(text.shape[0], dtype=np.float64))
    batch.validate(vocab_size)
    return batch


class SentimentRegressor(BaseEstimator, RegressorMixin):
    """Sentiment-intensity regressor over text/audio/vision sequences.

    Parameters mirror the fusion and training configuration; see
    ``FusionConfig`` and ``TrainConfig``.  ``setting="incomplete"`` enables
    the restoration objectives (masked training with reconstruction and
    siamese attraction against the unmasked view).
    """

    def __init__(self, width=32, layers=2, heads=4, expansion=4,
                 strategy="oagl", variant="parallel", pooling="attention",
                 share_mpu=False, share_modality=False, share_layer=False,
                 embed_dropout=0.0, attn_dropout=0.0, ffn_dropout=0.0,
                 activation="gelu", setting="complete", missing_rate=0.3,
                 lambda_recon=1.0, lambda_attract=1.0, lr=1e-3, lr_text=None,
                 batch_size=32, accumulation=1, patience=8, max_epochs=30,
                 val_fraction=0.2, vocab_size=1000, seed=0):
        self.width = width
        self.layers = layers
        self.heads = heads
        self.expansion = expansion
        self.strategy = strategy
        self.variant = variant
        self.pooling = pooling
        self.share_mpu = share_mpu
        self.share_modality = share_modality
        self.share_layer = share_layer
        self.embed_dropout = embed_dropout
        self.attn_dropout = attn_dropout
        self.ffn_dropout = ffn_dropout
        self.activation = activation
        self.setting = setting
        self.missing_rate = missing_rate
        self.lambda_recon = lambda_recon
        self.lambda_attract = lambda_attract
        self.lr = lr
        self.lr_text = lr_text
        self.batch_size = batch_size
        self.accumulation = accumulation
        self.patience = patience
        self.max_epochs = max_epochs
        self.val_fraction = val_fraction
        self.vocab_size = vocab_size
        self.seed = seed

    def _fusion_config(self) -> FusionConfig:
        return FusionConfig(
            strategy=self.strategy, variant=self.variant, layers=self.layers,
            width=self.width, heads=self.heads, expansion=self.expansion,
            pooling=self.pooling, share_mpu=self.share_mpu,
            share_modality=self.share_modality, share_layer=self.share_layer,
            embed_dropout=self.embed_dropout, attn_dropout=self.attn_dropout,
            ffn_dropout=self.ffn_dropout, activation=self.activation)

    def fit(self, X, y):
        """Train on a modality dict and a label vector; returns self."""
        batch = check_modalities(X, self.vocab_size)
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 1 or y.shape[0] != len(batch):
            raise ValueError("y must be 1-D with one label per sample")
        if not np.isfinite(y).all():
            raise ValueError("non-finite labels")
        batch.labels = y

        n = len(batch)
        n_val = max(1, int(round(n * self.val_fraction)))
        if n - n_val < 1:
            raise ValueError("not enough samples for the validation split")
        order = RngState(self.seed, 17).permutation(n)
        split = DatasetSplit(order[n_val:], order[:n_val], np.array([], dtype=np.int64))

        model_config = ModelConfig(
            fusion=self._fusion_config(), vocab_size=self.vocab_size,
            audio_features=batch.audio.shape[2],
            vision_features=batch.vision.shape[2],
            activation=self.activation)
        model = Model(model_config, RngState(self.seed))
        train_config = TrainConfig(
            setting=self.setting, missing_rates=(self.missing_rate,),
            lambda_recon=self.lambda_recon, lambda_attract=self.lambda_attract,
            lr=self.lr, lr_text=self.lr_text, batch_size=self.batch_size,
            accumulation=self.accumulation, patience=self.patience,
            max_epochs=self.max_epochs, seed=self.seed)
        result = train(model, batch, split, train_config)

        self.model_ = model
        self.history_ = result.history
        self.best_val_mae_ = result.best_val_mae
        self.n_features_in_ = batch.audio.shape[2] + batch.vision.shape[2]
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise RuntimeError("fit must be called before predict")
        batch = check_modalities(X, self.vocab_size)
        return predict_samples(self.model_, batch, np.arange(len(batch)))
