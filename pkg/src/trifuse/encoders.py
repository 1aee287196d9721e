"""Unimodal encoders: a toy recurrent text encoder plus LSTMs for the
feature modalities, all projected to the shared fusion width.

The text encoder stands in for a pretrained language model at desk scale:
token embeddings feed a forward LSTM for the per-position sequence, and a
second backward-direction LSTM provides the utterance summary, read at the
reserved summary position (index 0) so that it has seen the whole utterance.
Audio and vision use unidirectional LSTMs with a last-step readout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .data import Sample
from .tensor import RngState, Tensor


@dataclass
class LstmParams:
    """Single-layer LSTM cell; gates stacked as (input, forget, cell, output)."""

    wx: Tensor  # (f, 4h)
    wh: Tensor  # (h, 4h)
    b: Tensor   # (4h,)

    @property
    def hidden(self) -> int:
        return self.wh.shape[0]

    def tensors(self):
        return (self.wx, self.wh, self.b)


def init_lstm(rng: RngState, in_width: int, hidden: int,
              forget_bias: float = 1.0) -> LstmParams:
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = forget_bias
    return LstmParams(
        Tensor(nn.glorot(rng, in_width, 4 * hidden), requires_grad=True),
        Tensor(nn.glorot(rng, hidden, 4 * hidden), requires_grad=True),
        Tensor(b, requires_grad=True),
    )


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def lstm_forward(x: Tensor, params: LstmParams) -> Tensor:
    """Run the cell over a (T, f) sequence from a zero state.

    Returns the full (T, hidden) hidden-state sequence.  Gate activations
    are sigmoid, the candidate is tanh.  The whole unrolled sequence is one
    fused graph node: the forward loop stashes gate activations and the
    backward closure replays them in reverse (truncation-free BPTT).
    """
    x = T.as_tensor(x)
    wx, wh, b = params.wx, params.wh, params.b
    t_len = x.shape[0]
    hid = params.hidden

    pre = x.data @ wx.data + b.data            # (T, 4h)
    gates = np.empty((t_len, 4, hid))
    cells = np.empty((t_len, hid))
    tanh_c = np.empty((t_len, hid))
    states = np.empty((t_len, hid))
    h = np.zeros(hid)
    c = np.zeros(hid)
    for t in range(t_len):
        z = pre[t] + h @ wh.data
        i = _sigmoid(z[0:hid])
        f = _sigmoid(z[hid:2 * hid])
        g = np.tanh(z[2 * hid:3 * hid])
        o = _sigmoid(z[3 * hid:4 * hid])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        gates[t, 0], gates[t, 1], gates[t, 2], gates[t, 3] = i, f, g, o
        cells[t] = c
        tanh_c[t] = tc
        states[t] = h

    T._MAC_COUNT += t_len * x.shape[1] * 4 * hid + t_len * hid * 4 * hid

    needs = T.grad_enabled() and (x.requires_grad or wx.requires_grad
                                  or wh.requires_grad or b.requires_grad)
    if not needs:
        return T.constant(states)

    def bw(grad_out):
        # the recurrence over time is sequential, but weight gradients
        # batch into single matmuls once all gate adjoints are known
        dz_all = np.empty((t_len, 4 * hid))
        dh_next = np.zeros(hid)
        dc_next = np.zeros(hid)
        wh_t = wh.data.T
        zeros = np.zeros(hid)
        for t in range(t_len - 1, -1, -1):
            i, f, g, o = gates[t]
            tc = tanh_c[t]
            dh = grad_out[t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            c_prev = cells[t - 1] if t > 0 else zeros
            dc_next = dc * f
            dz = dz_all[t]
            dz[0:hid] = dc * g * i * (1.0 - i)
            dz[hid:2 * hid] = dc * c_prev * f * (1.0 - f)
            dz[2 * hid:3 * hid] = dc * i * (1.0 - g * g)
            dz[3 * hid:4 * hid] = do * o * (1.0 - o)
            dh_next = dz @ wh_t
        d_x = dz_all @ wx.data.T if x.requires_grad else None
        d_wx = x.data.T @ dz_all if wx.requires_grad else None
        d_wh = None
        if wh.requires_grad:
            h_prev = np.vstack([zeros[None, :], states[:-1]])
            d_wh = h_prev.T @ dz_all
        d_b = dz_all.sum(axis=0) if b.requires_grad else None
        return (d_x, d_wx, d_wh, d_b)

    return T.node(states, (x, wx, wh, b), bw)


@dataclass
class TextEncoderParams:
    table: Tensor            # (vocab, width) embeddings
    forward_lstm: LstmParams
    backward_lstm: LstmParams

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    def tensors(self):
        return ((self.table,) + self.forward_lstm.tensors()
                + self.backward_lstm.tensors())


def init_text_encoder(rng: RngState, vocab_size: int, width: int) -> TextEncoderParams:
    table = Tensor((rng.uniform((vocab_size, width)) * 2.0 - 1.0) * 0.1,
                   requires_grad=True)
    return TextEncoderParams(table, init_lstm(rng, width, width),
                             init_lstm(rng, width, width))


def encode_text(tokens: np.ndarray, params: TextEncoderParams) -> tuple[Tensor, Tensor]:
    """Embed tokens and encode them.

    Returns the forward-pass state sequence (T, width) and the utterance
    vector (width,): the backward pass's state after it has consumed the
    sequence down to position 0, i.e. a summary conditioned on everything.
    """
    emb = T.embedding(params.table, np.asarray(tokens))
    seq = lstm_forward(emb, params.forward_lstm)
    rev_states = lstm_forward(emb[::-1], params.backward_lstm)
    summary = rev_states[rev_states.shape[0] - 1]
    return seq, summary


@dataclass
class EncoderParams:
    """All unimodal encoders plus the six projections to the fusion width."""

    text: TextEncoderParams
    audio_lstm: LstmParams
    vision_lstm: LstmParams
    proj_text_seq: nn.LinearParams
    proj_text_vec: nn.LinearParams
    proj_audio_seq: nn.LinearParams
    proj_audio_vec: nn.LinearParams
    proj_vision_seq: nn.LinearParams
    proj_vision_vec: nn.LinearParams

    def named_tensors(self):
        out = []
        for name, t in zip(("table", "fwd_wx", "fwd_wh", "fwd_b",
                            "bwd_wx", "bwd_wh", "bwd_b"), self.text.tensors()):
            out.append((f"text.{name}", t))
        for mod, lstm in (("audio", self.audio_lstm), ("vision", self.vision_lstm)):
            for name, t in zip(("wx", "wh", "b"), lstm.tensors()):
                out.append((f"{mod}.{name}", t))
        for name, lin in (("proj_text_seq", self.proj_text_seq),
                          ("proj_text_vec", self.proj_text_vec),
                          ("proj_audio_seq", self.proj_audio_seq),
                          ("proj_audio_vec", self.proj_audio_vec),
                          ("proj_vision_seq", self.proj_vision_seq),
                          ("proj_vision_vec", self.proj_vision_vec)):
            out.append((f"{name}.w", lin.w))
            out.append((f"{name}.b", lin.b))
        return out

    def text_tensor_ids(self) -> set[int]:
        """Identity set of the text-encoder group (for the split learning rate)."""
        return {id(t) for t in self.text.tensors()}


def init_encoders(rng: RngState, vocab_size: int, text_width: int,
                  audio_features: int, audio_width: int,
                  vision_features: int, vision_width: int,
                  fused_width: int) -> EncoderParams:
    return EncoderParams(
        init_text_encoder(rng, vocab_size, text_width),
        init_lstm(rng, audio_features, audio_width),
        init_lstm(rng, vision_features, vision_width),
        nn.init_linear(rng, text_width, fused_width),
        nn.init_linear(rng, text_width, fused_width),
        nn.init_linear(rng, audio_width, fused_width),
        nn.init_linear(rng, audio_width, fused_width),
        nn.init_linear(rng, vision_width, fused_width),
        nn.init_linear(rng, vision_width, fused_width),
    )


@dataclass
class EncodedViews:
    """Per-modality local sequences and utterance vectors at the fusion width.

    ``text_seq_raw`` is the text encoder output before projection; the
    restoration decoders reconstruct against it.
    """

    text_seq: Tensor
    audio_seq: Tensor
    vision_seq: Tensor
    text_vec: Tensor
    audio_vec: Tensor
    vision_vec: Tensor
    text_seq_raw: Tensor

    def seq(self, modality: str) -> Tensor:
        return getattr(self, f"{modality}_seq")

    def vec(self, modality: str) -> Tensor:
        return getattr(self, f"{modality}_vec")


def encode_views(sample: Sample, params: EncoderParams, mask=None) -> EncodedViews:
    """Encode one (possibly masked) sample into fusion-width views.

    If a temporal mask is given it is applied first (idempotent, so a
    pre-masked sample may be passed with its mask).  Utterance vectors for
    audio and vision read the final LSTM step; the text vector comes from
    the summary position.
    """
    if mask is not None:
        from .restoration import apply_mask_sample
        sample = apply_mask_sample(sample, mask)

    text_raw, text_summary = encode_text(sample.text, params.text)
    audio_raw = lstm_forward(Tensor(sample.audio), params.audio_lstm)
    vision_raw = lstm_forward(Tensor(sample.vision), params.vision_lstm)
    audio_last = audio_raw[audio_raw.shape[0] - 1]
    vision_last = vision_raw[vision_raw.shape[0] - 1]

    return EncodedViews(
        text_seq=nn.linear(text_raw, params.proj_text_seq),
        audio_seq=nn.linear(audio_raw, params.proj_audio_seq),
        vision_seq=nn.linear(vision_raw, params.proj_vision_seq),
        text_vec=nn.linear_vec(text_summary, params.proj_text_vec),
        audio_vec=nn.linear_vec(audio_last, params.proj_audio_vec),
        vision_vec=nn.linear_vec(vision_last, params.proj_vision_vec),
        text_seq_raw=text_raw,
    )
