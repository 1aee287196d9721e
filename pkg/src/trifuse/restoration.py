"""Masking and the restoration training objectives.

Robust training treats the complete and the randomly-masked ("incomplete")
version of an utterance as two views of one sample.  The incomplete view must
(a) reconstruct the features it never saw from its fused latents, scored with
a smooth-L1 penalty restricted to masked positions, and (b) keep its
utterance-level representations close to the complete view's under a siamese
projector/predictor pair with a stop-gradient on the opposing branch, so the
representations cannot collapse to a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .data import Sample, UNK_ID, ModalityBatch
from .tensor import RngState, Tensor

STREAMS = ("text", "audio", "vision", "fused")


@dataclass
class TemporalMask:
    """Per-modality keep/drop vectors: 1 keeps a timestep, 0 masks it."""

    text: np.ndarray
    audio: np.ndarray
    vision: np.ndarray
    missing_rate: float

    def __post_init__(self):
        self.text = np.asarray(self.text, dtype=np.float64)
        self.audio = np.asarray(self.audio, dtype=np.float64)
        self.vision = np.asarray(self.vision, dtype=np.float64)
        for arr in (self.text, self.audio, self.vision):
            if not np.isin(arr, (0.0, 1.0)).all():
                raise ValueError("mask entries must be 0 or 1")

    def get(self, modality: str) -> np.ndarray:
        return getattr(self, modality)

    @classmethod
    def all_ones(cls, t_text: int, t_audio: int, t_vision: int) -> "TemporalMask":
        return cls(np.ones(t_text), np.ones(t_audio), np.ones(t_vision), 0.0)


def draw_mask(t_text: int, t_audio: int, t_vision: int, p: float, rng: RngState,
              protect_text_start: bool = True) -> TemporalMask:
    """Draw independent per-position masks at missing rate ``p``.

    Each modality's mask is drawn independently.  The text summary position
    (index 0) stays unmasked by default so a summary readout always exists;
    pass ``protect_text_start=False`` to drop that guarantee.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("missing rate must lie in [0, 1]")
    text = (rng.uniform((t_text,)) >= p).astype(np.float64)
    audio = (rng.uniform((t_audio,)) >= p).astype(np.float64)
    vision = (rng.uniform((t_vision,)) >= p).astype(np.float64)
    if protect_text_start:
        text[0] = 1.0
    return TemporalMask(text, audio, vision, p)


def apply_mask_sample(sample: Sample, mask: TemporalMask) -> Sample:
    """Masked copy of one sample: dropped text becomes the unknown token,
    dropped audio/vision rows become zero vectors.  Idempotent."""
    text = sample.text.copy()
    text[mask.text == 0.0] = UNK_ID
    audio = sample.audio * mask.audio[:, None]
    vision = sample.vision * mask.vision[:, None]
    return Sample(text, audio, vision, sample.label)


def apply_mask(batch: ModalityBatch, mask: TemporalMask) -> ModalityBatch:
    """Apply one temporal mask to every sample in a batch."""
    text = batch.text.copy()
    text[:, mask.text == 0.0] = UNK_ID
    audio = batch.audio * mask.audio[None, :, None]
    vision = batch.vision * mask.vision[None, :, None]
    return ModalityBatch(text, audio, vision, batch.labels)


# ---------------------------------------------------------------------------
# low-level reconstruction


def init_decoders(rng: RngState, fused_width: int, text_width: int,
                  audio_features: int, vision_features: int,
                  activation: str = "gelu") -> dict[str, nn.MlpParams]:
    """One hidden-layer decoder per modality, mapping fused latents back to
    the modality's reconstruction target width."""
    return {
        "text": nn.init_mlp(rng, fused_width, fused_width, text_width, activation),
        "audio": nn.init_mlp(rng, fused_width, fused_width, audio_features, activation),
        "vision": nn.init_mlp(rng, fused_width, fused_width, vision_features, activation),
    }


def reconstruction_loss(latents: dict[str, Tensor], targets: dict[str, Tensor],
                        mask: TemporalMask, decoders: dict[str, nn.MlpParams]) -> Tensor:
    """Smooth-L1 reconstruction error averaged over masked elements only.

    ``latents`` holds the incomplete view's final per-modality sequences;
    ``targets`` the complete-view reconstruction targets (raw audio/vision
    features; the complete-view text encoding, passed as a constant).
    Residuals at kept positions are zeroed before the reduction, so they
    contribute nothing to value or gradient.  A modality with no masked
    positions contributes exactly zero.
    """
    total = Tensor(0.0)
    for modality in ("text", "audio", "vision"):
        dropped = 1.0 - mask.get(modality)
        width = targets[modality].shape[-1]
        n_masked = float(dropped.sum()) * width
        if n_masked == 0.0:
            continue
        recon = nn.mlp(latents[modality], decoders[modality])
        residual = (targets[modality] - recon) * Tensor(dropped[:, None])
        total = total + T.scale(T.smooth_l1(residual).sum(), 1.0 / n_masked)
    return total


# ---------------------------------------------------------------------------
# high-level attraction


def negative_cosine(x: Tensor, y: Tensor) -> Tensor:
    """-cos(x, y) for 1-D vectors; in [-1, 1]; rejects zero vectors."""
    if float(np.linalg.norm(x.data)) == 0.0 or float(np.linalg.norm(y.data)) == 0.0:
        raise ValueError("degenerate representation")
    dot = (x * y).sum()
    norms = T.sqrt((x * x).sum()) * T.sqrt((y * y).sum())
    return T.scale(dot / norms, -1.0)


class SimSiamHeads:
    """Projector/predictor pair for one representation stream.

    The projector is a two-layer MLP with a layer norm after the first
    linear; the predictor bottlenecks to a quarter of the projected width.
    """

    def __init__(self, rng: RngState, width: int, projected_width: int | None = None,
                 activation: str = "gelu"):
        d_p = 2 * width if projected_width is None else projected_width
        bottleneck = max(1, d_p // 4)
        self.proj_lin1 = nn.init_linear(rng, width, d_p)
        self.proj_norm = nn.init_layer_norm(d_p)
        self.proj_lin2 = nn.init_linear(rng, d_p, d_p)
        self.predictor = nn.init_mlp(rng, d_p, bottleneck, d_p, activation)
        self.activation = activation

    def project(self, x: Tensor) -> Tensor:
        act = nn.activation_fn(self.activation)
        hidden = act(nn.layer_norm(nn.linear_vec(x, self.proj_lin1), self.proj_norm))
        return nn.linear_vec(hidden, self.proj_lin2)

    def predict(self, z: Tensor) -> Tensor:
        return nn.mlp_vec(z, self.predictor)

    def tensors(self):
        return (self.proj_lin1.tensors() + self.proj_norm.tensors()
                + self.proj_lin2.tensors() + self.predictor.tensors())


def simsiam_loss(repr_incomplete: Tensor, repr_complete: Tensor,
                 heads: SimSiamHeads) -> Tensor:
    """Symmetric stop-gradient attraction between the two views' projections.

    Each direction predicts the other view's projection and is scored by
    negative cosine against a gradient-blocked copy, so gradients flow only
    through the predictor branch.  The value lies in [-1, 1].
    """
    z_inc = heads.project(repr_incomplete)
    z_comp = heads.project(repr_complete)
    p_inc = heads.predict(z_inc)
    p_comp = heads.predict(z_comp)
    first = negative_cosine(p_inc, T.stop_gradient(z_comp))
    second = negative_cosine(p_comp, T.stop_gradient(z_inc))
    return T.scale(first + second, 0.5)


def attraction_loss(streams_incomplete: dict[str, Tensor],
                    streams_complete: dict[str, Tensor],
                    label: float, complete_prediction: Tensor,
                    heads: dict[str, SimSiamHeads]) -> Tensor:
    """Sum of per-stream siamese losses plus the complete view's own
    prediction error, which anchors the attracted representations to the
    task."""
    total = T.absolute(complete_prediction - float(label))
    for stream in STREAMS:
        total = total + simsiam_loss(streams_incomplete[stream],
                                     streams_complete[stream], heads[stream])
    return total


def overall_loss(setting: str, task_loss: Tensor, recon_loss: Tensor | None,
                 attract_loss: Tensor | None, lambda_recon: float,
                 lambda_attract: float) -> Tensor:
    """Combine the objectives for the given modality setting.

    Complete setting: the prediction loss alone.  Incomplete setting:
    prediction loss plus the weighted restoration terms.
    """
    if lambda_recon < 0 or lambda_attract < 0:
        raise ValueError("loss weights must be nonnegative")
    if setting == "complete":
        return task_loss
    if setting != "incomplete":
        raise ValueError(f"unknown setting '{setting}'")
    total = task_loss
    if recon_loss is not None and lambda_recon > 0:
        total = total + T.scale(recon_loss, lambda_recon)
    if attract_loss is not None and lambda_attract > 0:
        total = total + T.scale(attract_loss, lambda_attract)
    return total
