"""End-to-end model assembly and per-sample loss computation.

A ``Model`` bundles the unimodal encoders, the fusion stack, the scalar
prediction head, and the restoration machinery (per-modality decoders and
siamese projector/predictor heads).  Losses are computed per sample; the
caller accumulates gradients across a batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import restoration as res
from . import tensor as T
from .data import Sample
from .encoders import EncoderParams, EncodedViews, encode_views, init_encoders
from .fusion import EmtOutput, FusionConfig, FusionState, emt_forward
from .restoration import SimSiamHeads, TemporalMask
from .tensor import RngState, Tensor


@dataclass
class ModelConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    vocab_size: int = 1000
    audio_features: int = 5
    vision_features: int = 5
    text_width: int | None = None      # encoder widths; default: fusion width
    audio_width: int | None = None
    vision_width: int | None = None
    share_simsiam_heads: bool = False
    siamese_projector_factor: int = 2
    activation: str = "gelu"

    def resolved_widths(self):
        d = self.fusion.width
        return (self.text_width or d, self.audio_width or d, self.vision_width or d)


@dataclass
class ViewOutput:
    views: EncodedViews
    emt: EmtOutput
    prediction: Tensor

    def streams(self) -> dict[str, Tensor]:
        return {"text": self.views.text_vec, "audio": self.views.audio_vec,
                "vision": self.views.vision_vec, "fused": self.emt.fused}


class Model:
    """All trainable state for one sentiment model."""

    def __init__(self, config: ModelConfig, rng: RngState):
        config.fusion.validate()
        self.config = config
        d = config.fusion.width
        d_text, d_audio, d_vision = config.resolved_widths()
        self.encoders: EncoderParams = init_encoders(
            rng, config.vocab_size, d_text, config.audio_features, d_audio,
            config.vision_features, d_vision, d)
        self.fusion = FusionState(config.fusion, rng)
        self.head = nn.init_mlp(rng, 6 * d, d, 1, config.activation)
        self.decoders = res.init_decoders(rng, d, d_text, config.audio_features,
                                          config.vision_features, config.activation)
        # the fused stream is 3d wide so it always gets its own head pair;
        # sharing applies to the three width-d modality streams
        factor = config.siamese_projector_factor
        self.siamese = {"fused": SimSiamHeads(rng, 3 * d, projected_width=factor * 3 * d,
                                              activation=config.activation)}
        if config.share_simsiam_heads:
            shared = SimSiamHeads(rng, d, projected_width=factor * d,
                                  activation=config.activation)
            for s in ("text", "audio", "vision"):
                self.siamese[s] = shared
        else:
            for s in ("text", "audio", "vision"):
                self.siamese[s] = SimSiamHeads(rng, d, projected_width=factor * d,
                                               activation=config.activation)

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self):
        out = []
        seen = set()

        def add(name, tensor):
            if tensor is not None and id(tensor) not in seen:
                seen.add(id(tensor))
                out.append((name, tensor))

        for name, tensor in self.encoders.named_tensors():
            add(f"enc.{name}", tensor)
        for name, tensor in self.fusion.named_parameters():
            add(f"fusion.{name}", tensor)
        for i, tensor in enumerate(self.head.tensors()):
            add(f"head.{i}", tensor)
        for modality in ("text", "audio", "vision"):
            for i, tensor in enumerate(self.decoders[modality].tensors()):
                add(f"dec.{modality}.{i}", tensor)
        for stream in res.STREAMS:
            for i, tensor in enumerate(self.siamese[stream].tensors()):
                add(f"sim.{stream}.{i}", tensor)
        return out

    def text_parameter_ids(self) -> set[int]:
        return self.encoders.text_tensor_ids()

    def zero_grads(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = set(params) ^ set(state)
            raise ValueError(f"checkpoint does not match the model: {sorted(missing)[:4]}")
        for name, p in params.items():
            if p.data.shape != state[name].shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data = state[name].copy()

    # -- forward --------------------------------------------------------------

    def forward_view(self, sample: Sample, rng: RngState | None = None,
                     training: bool = False) -> ViewOutput:
        views = encode_views(sample, self.encoders)
        emt = emt_forward(views, self.config.fusion, self.fusion, rng, training)
        prediction = predict(emt.fused, views.text_vec, views.audio_vec,
                             views.vision_vec, self.head)
        return ViewOutput(views, emt, prediction)


def predict(fused: Tensor, text_vec: Tensor, audio_vec: Tensor, vision_vec: Tensor,
            head: nn.MlpParams) -> Tensor:
    """Scalar sentiment prediction from the fused and utterance vectors."""
    joint = T.concat([fused, text_vec, audio_vec, vision_vec], axis=0)
    return T.reshape(nn.mlp_vec(joint, head), ())


@dataclass
class LossParts:
    task: float
    recon: float | None = None
    attract: float | None = None


def sample_loss(model: Model, sample: Sample, setting: str, mask: TemporalMask | None,
                lambda_recon: float, lambda_attract: float,
                rng: RngState | None = None, training: bool = False):
    """Loss of one sample under the given modality setting.

    In the incomplete setting the sample is masked to form the incomplete
    view; restoration terms compare it against the complete view.  The
    complete view is only forwarded when a restoration weight needs it, so
    with both weights zero this is plain task-loss training on masked data.
    Returns (loss, parts, incomplete-view prediction value).
    """
    if setting == "complete":
        out = model.forward_view(sample, rng, training)
        loss = T.absolute(out.prediction - sample.label)
        return loss, LossParts(task=loss.item()), out.prediction.item()

    if mask is None:
        raise ValueError("incomplete setting requires a temporal mask")
    masked = res.apply_mask_sample(sample, mask)
    inc = model.forward_view(masked, rng, training)
    task = T.absolute(inc.prediction - sample.label)

    need_recon = lambda_recon > 0
    need_attract = lambda_attract > 0
    recon = None
    attract = None
    if need_recon or need_attract:
        if need_attract:
            comp = model.forward_view(sample, rng, training)
            comp_views = comp.views
        else:
            comp_views = encode_views(sample, model.encoders)
        if need_recon:
            targets = {
                "text": T.stop_gradient(comp_views.text_seq_raw),
                "audio": Tensor(sample.audio),
                "vision": Tensor(sample.vision),
            }
            recon = res.reconstruction_loss(inc.emt.final_locals, targets, mask,
                                            model.decoders)
        if need_attract:
            attract = res.attraction_loss(inc.streams(), comp.streams(),
                                          sample.label, comp.prediction,
                                          model.siamese)

    loss = res.overall_loss("incomplete", task, recon, attract,
                            lambda_recon, lambda_attract)
    parts = LossParts(task=task.item(),
                      recon=None if recon is None else recon.item(),
                      attract=None if attract is None else attract.item())
    return loss, parts, inc.prediction.item()
