"""Strategy-parameterized cross-modal fusion with exact complexity accounting.

Three fusion routes are supported, all built from the same promotion unit:

* ``ooll`` - every modality pair exchanges information directly; six directed
  streams evolve across layers.  Cost grows quadratically with the number of
  modalities.
* ``oall`` - the modalities share one long concatenated context sequence that
  each modality promotes and reads.  Also quadratic, with the largest
  constants.
* ``oagl`` (default) - the context is a tiny matrix holding one utterance
  row per modality.  Every modality interacts only with this bottleneck, so
  cost grows linearly with the number of modalities.

For ``oall``/``oagl`` the three promoted contexts are merged back into one by
a pooling layer (attention-weighted by default) before the next layer.
Parameter storages can be shared at three levels (direction, modality,
layer) by aliasing, and both MAC counts and distinct-parameter counts have
closed forms that runtime instrumentation must reproduce exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import nn
from . import tensor as T
from .attention import (MpuParams, init_mpu_direction, mpu_forward, mpu_mac_count)
from .encoders import EncodedViews
from .tensor import RngState, Tensor

MODALITIES = ("text", "audio", "vision")
PAIRS = tuple(combinations(MODALITIES, 2))

STRATEGIES = ("ooll", "oall", "oagl")
VARIANTS = ("parallel", "serial")
POOLINGS = ("attention", "average", "mlp")


@dataclass
class FusionConfig:
    """Architecture and regularization knobs for the fusion stack."""

    strategy: str = "oagl"
    variant: str = "parallel"
    layers: int = 3
    width: int = 128
    heads: int = 4
    expansion: int = 4
    pooling: str = "attention"
    share_mpu: bool = False
    share_modality: bool = False
    share_layer: bool = False
    embed_dropout: float = 0.0
    attn_dropout: float = 0.3
    ffn_dropout: float = 0.1
    activation: str = "gelu"
    attention_out_proj: bool = True

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy '{self.strategy}'")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}'")
        if self.strategy == "ooll" and self.variant == "serial":
            raise ValueError("the serial variant is defined only for oall/oagl")
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling '{self.pooling}'")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.width < 1 or self.width % self.heads:
            raise ValueError("width must be positive and divisible by heads")
        if self.expansion < 1:
            raise ValueError("expansion must be >= 1")


@dataclass
class PoolingParams:
    kind: str
    w: Tensor | None = None       # (d, d) score projection (attention)
    b: Tensor | None = None       # (d,)
    v: Tensor | None = None       # (d, 1) score readout (attention)
    lin: nn.LinearParams | None = None  # (M*d, d) merge map (mlp)

    def tensors(self):
        out = []
        for t in (self.w, self.b, self.v):
            if t is not None:
                out.append(t)
        if self.lin is not None:
            out.extend(self.lin.tensors())
        return tuple(out)


def init_pooling(rng: RngState, kind: str, width: int,
                 n_contexts: int = len(MODALITIES)) -> PoolingParams:
    if kind == "average":
        return PoolingParams("average")
    if kind == "mlp":
        return PoolingParams("mlp", lin=nn.init_linear(rng, n_contexts * width, width))
    return PoolingParams(
        "attention",
        w=Tensor(nn.glorot(rng, width, width), requires_grad=True),
        b=Tensor(np.zeros(width), requires_grad=True),
        v=Tensor(nn.glorot(rng, width, 1), requires_grad=True),
    )


class FusionState:
    """Resolved parameter storages for one fusion stack.

    Sharing flags alias direction storages: the number of distinct storages
    is layers^(1-share_layer) * units^(1-share_modality) * 2^(1-share_mpu),
    with three units under every strategy (modalities, or modality pairs).
    Layer-level sharing aliases the pooling parameters too.
    """

    def __init__(self, config: FusionConfig, rng: RngState):
        config.validate()
        self.config = config
        units = PAIRS if config.strategy == "ooll" else MODALITIES
        self.units = units
        self._storages: dict = {}
        self.mpus: dict = {}
        for layer in range(config.layers):
            for unit in units:
                fwd = self._storage(layer, unit, 0, rng)
                rev = self._storage(layer, unit, 1, rng)
                self.mpus[(layer, unit)] = MpuParams(fwd, rev)
        self.pooling: list[PoolingParams] | None = None
        if config.strategy in ("oall", "oagl"):
            if config.share_layer:
                shared = init_pooling(rng, config.pooling, config.width)
                self.pooling = [shared] * config.layers
            else:
                self.pooling = [init_pooling(rng, config.pooling, config.width)
                                for _ in range(config.layers)]
        self.ooll_head: nn.LinearParams | None = None
        if config.strategy == "ooll":
            self.ooll_head = nn.init_linear(rng, 6 * config.width, 3 * config.width)

    def _storage(self, layer, unit, direction, rng):
        cfg = self.config
        key = (0 if cfg.share_layer else layer,
               "*" if cfg.share_modality else unit,
               0 if cfg.share_mpu else direction)
        if key not in self._storages:
            self._storages[key] = init_mpu_direction(
                rng, cfg.width, cfg.heads, cfg.expansion, cfg.activation,
                cfg.attention_out_proj)
        return self._storages[key]

    def mpu_storage_count(self) -> int:
        return len(self._storages)

    def named_parameters(self):
        """Distinct trainable tensors, stable order, deduplicated by identity."""
        out = []
        seen = set()

        def add(name, tensor):
            if tensor is not None and id(tensor) not in seen:
                seen.add(id(tensor))
                out.append((name, tensor))

        field_names = ("ln_cross.gamma", "ln_cross.beta", "cross.wq", "cross.wk",
                       "cross.wv", "cross.wo", "ln_self.gamma", "ln_self.beta",
                       "self.wq", "self.wk", "self.wv", "self.wo",
                       "ln_ffn.gamma", "ln_ffn.beta", "ffn.w1", "ffn.b1",
                       "ffn.w2", "ffn.b2")
        for key in sorted(self._storages, key=str):
            storage = self._storages[key]
            tensors = (storage.ln_cross.tensors() + storage.cross.tensors()
                       + storage.ln_self.tensors() + storage.self_attn.tensors()
                       + storage.ln_ffn.tensors() + storage.ffn.tensors())
            names = [n for n in field_names
                     if not (storage.cross.wo is None and n in ("cross.wo", "self.wo"))]
            for name, tensor in zip(names, tensors):
                add(f"mpu.{key}.{name}", tensor)
        if self.pooling is not None:
            for i, pool in enumerate(self.pooling):
                for j, tensor in enumerate(pool.tensors()):
                    add(f"pool.{i}.{j}", tensor)
        if self.ooll_head is not None:
            add("ooll_head.w", self.ooll_head.w)
            add("ooll_head.b", self.ooll_head.b)
        return out


def init_global_context(h_text: Tensor, h_audio: Tensor, h_vision: Tensor) -> Tensor:
    """Stack the three utterance vectors into the (3, d) starting context."""
    d = h_text.size
    rows = [T.reshape(h, (1, d)) for h in (h_text, h_audio, h_vision)]
    return T.concat(rows, axis=0)


_PE_CACHE: dict = {}


def positional_encoding(t_len: int, width: int) -> np.ndarray:
    """Fixed sinusoidal position table (not trainable)."""
    key = (t_len, width)
    if key not in _PE_CACHE:
        positions = np.arange(t_len)[:, None]
        dims = np.arange(width)[None, :]
        angles = positions / np.power(10000.0, (2 * (dims // 2)) / width)
        pe = np.where(dims % 2 == 0, np.sin(angles), np.cos(angles))
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


def pool_contexts(c_text: Tensor, c_audio: Tensor, c_vision: Tensor,
                  params: PoolingParams) -> Tensor:
    """Merge the three promoted contexts row-by-row.

    Attention pooling scores each candidate row with v^T tanh(W^T x + b) and
    softmaxes over the three modality slots, yielding a per-row convex
    combination: identical candidates pass through unchanged, and a zero
    score readout degrades to the plain average.
    """
    contexts = (c_text, c_audio, c_vision)
    if params.kind == "average":
        return T.scale(c_text + c_audio + c_vision, 1.0 / 3.0)
    if params.kind == "mlp":
        return nn.linear(T.concat(contexts, axis=1), params.lin)
    scores = [T.matmul(T.tanh(T.matmul(c, params.w) + params.b), params.v)
              for c in contexts]
    weights = T.softmax_lastdim(T.concat(scores, axis=1))   # (rows, 3)
    out = weights[:, 0:1] * c_text
    out = out + weights[:, 1:2] * c_audio
    out = out + weights[:, 2:3] * c_vision
    return out


def init_carry(views: EncodedViews, config: FusionConfig, state: FusionState,
               rng: RngState | None = None, training: bool = False) -> dict:
    """Position-encode the local sequences and set up the strategy's state."""
    locals_ = {}
    for m in MODALITIES:
        seq = views.seq(m)
        pe = positional_encoding(seq.shape[0], config.width)
        locals_[m] = T.dropout(seq + Tensor(pe), config.embed_dropout, rng, training)
    carry = {"locals": locals_, "context": None, "streams": None}
    if config.strategy == "oagl":
        carry["context"] = init_global_context(views.text_vec, views.audio_vec,
                                               views.vision_vec)
    elif config.strategy == "oall":
        carry["context"] = T.concat([locals_[m] for m in MODALITIES], axis=0)
    else:
        streams = {}
        for m, n in PAIRS:
            streams[(m, n)] = locals_[m]
            streams[(n, m)] = locals_[n]
        carry["streams"] = streams
    return carry


def fuse_layer(state: FusionState, layer: int, carry: dict,
               rng: RngState | None = None, training: bool = False):
    """Run one fusion layer, returning the updated carry and attention dumps."""
    cfg = state.config
    serial = cfg.variant == "serial"
    dumps = []

    def record(unit, first_label, second_label, raw):
        for label, side in ((first_label, "first"), (second_label, "second")):
            for kind in ("cross", "self"):
                dumps.append({"layer": layer, "unit": unit, "direction": label,
                              "kind": kind, "weights": raw[side][kind]})

    if cfg.strategy == "ooll":
        streams = carry["streams"]
        new_streams = {}
        for m, n in PAIRS:
            mpu = state.mpus[(layer, (m, n))]
            out_m, out_n, raw = mpu_forward(
                streams[(m, n)], streams[(n, m)], mpu, rng,
                cfg.attn_dropout, cfg.ffn_dropout, training, serial=False)
            new_streams[(m, n)] = out_m
            new_streams[(n, m)] = out_n
            record(f"{m}~{n}", f"{n}_to_{m}", f"{m}_to_{n}", raw)
        return {"locals": carry["locals"], "context": None,
                "streams": new_streams}, dumps

    context = carry["context"]
    new_locals = {}
    promoted = {}
    for m in MODALITIES:
        mpu = state.mpus[(layer, m)]
        out_local, out_ctx, raw = mpu_forward(
            carry["locals"][m], context, mpu, rng,
            cfg.attn_dropout, cfg.ffn_dropout, training, serial=serial)
        new_locals[m] = out_local
        promoted[m] = out_ctx
        record(m, f"ctx_to_{m}", f"{m}_to_ctx", raw)
    new_context = pool_contexts(promoted["text"], promoted["audio"],
                                promoted["vision"], state.pooling[layer])
    return {"locals": new_locals, "context": new_context, "streams": None}, dumps


@dataclass
class EmtOutput:
    fused: Tensor                    # (3d,) utterance-level inter-modal vector
    final_locals: dict               # modality -> (T_m, d) final sequence
    dumps: list = field(default_factory=list)
    fusion_macs: int = 0


def emt_forward(views: EncodedViews, config: FusionConfig, state: FusionState,
                rng: RngState | None = None, training: bool = False) -> EmtOutput:
    """Run the full fusion stack over encoded views.

    ``fusion_macs`` reports the matmul MACs spent inside the layer loop
    (the readout is excluded), so it can be compared with ``count_macs``.
    """
    carry = init_carry(views, config, state, rng, training)
    dumps = []
    macs_before = T.mac_count()
    for layer in range(config.layers):
        carry, layer_dumps = fuse_layer(state, layer, carry, rng, training)
        dumps.extend(layer_dumps)
    fusion_macs = T.mac_count() - macs_before

    d = config.width
    if config.strategy == "oagl":
        fused = T.reshape(carry["context"], (3 * d,))
        final_locals = carry["locals"]
    elif config.strategy == "oall":
        lengths = [views.seq(m).shape[0] for m in MODALITIES]
        segments = []
        start = 0
        for t_len in lengths:
            segment = carry["context"][start:start + t_len, :]
            segments.append(T.reshape(segment.mean(axis=0), (1, d)))
            start += t_len
        fused = T.reshape(T.concat(segments, axis=0), (3 * d,))
        final_locals = carry["locals"]
    else:
        streams = carry["streams"]
        last_rows = []
        for m, n in PAIRS:
            for key in ((m, n), (n, m)):
                seq = streams[key]
                last_rows.append(seq[seq.shape[0] - 1:seq.shape[0], :])
        stacked = T.concat(last_rows, axis=1)           # (1, 6d)
        fused = T.reshape(nn.linear(stacked, state.ooll_head), (3 * d,))
        final_locals = {}
        for m in MODALITIES:
            incoming = [streams[key] for key in streams if key[0] == m]
            final_locals[m] = T.scale(incoming[0] + incoming[1], 0.5)
    return EmtOutput(fused, final_locals, dumps, fusion_macs)


# ---------------------------------------------------------------------------
# closed-form accounting


def pooling_mac_count(kind: str, rows: int, width: int, n_contexts: int = 3) -> int:
    """Matmul MACs of one ``pool_contexts`` call."""
    if kind == "average":
        return 0
    if kind == "mlp":
        return rows * (n_contexts * width) * width
    return n_contexts * (rows * width * width + rows * width)


def count_macs(config: FusionConfig, lengths) -> int:
    """Exact per-forward MAC total of the fusion layers for the strategy.

    ``lengths`` lists the local sequence lengths, one per modality; the
    modality count is its length.  The bottleneck route pairs each sequence
    with a context of that many rows, the concatenated route with the total
    length, and the pairwise route enumerates modality pairs.  Pooling costs
    are included; the post-stack readout is not.
    """
    config.validate()
    lengths = [int(t) for t in lengths]
    m_count = len(lengths)
    d = config.width
    e = config.expansion
    op = config.attention_out_proj

    def unit(t_a, t_b):
        return mpu_mac_count(t_a, t_b, d, heads=config.heads, expansion=e, out_proj=op)

    if config.strategy == "ooll":
        per_layer = sum(unit(t_a, t_b) for t_a, t_b in combinations(lengths, 2))
    elif config.strategy == "oall":
        total = sum(lengths)
        per_layer = sum(unit(t, total) for t in lengths)
        per_layer += pooling_mac_count(config.pooling, total, d, m_count)
    else:
        per_layer = sum(unit(t, m_count) for t in lengths)
        per_layer += pooling_mac_count(config.pooling, m_count, d, m_count)
    return config.layers * per_layer


def param_count(config: FusionConfig):
    """Closed-form distinct trainable scalar count with a breakdown.

    The direction-storage count follows the sharing flags exactly:
    layers^(1-share_layer) * 3^(1-share_modality) * 2^(1-share_mpu).
    Sinusoidal position tables are constants and contribute nothing.
    """
    config.validate()
    d = config.width
    e = config.expansion

    attn = (3 + (1 if config.attention_out_proj else 0)) * d * d
    per_direction = 2 * attn + (d * e * d + e * d) + (e * d * d + d) + 3 * 2 * d

    storages = ((config.layers ** (0 if config.share_layer else 1))
                * (3 ** (0 if config.share_modality else 1))
                * (2 ** (0 if config.share_mpu else 1)))

    if config.strategy == "ooll":
        pool_sets = 0
        pool_each = 0
        head = 6 * d * 3 * d + 3 * d
    else:
        pool_sets = 1 if config.share_layer else config.layers
        if config.pooling == "attention":
            pool_each = d * d + d + d
        elif config.pooling == "mlp":
            pool_each = 3 * d * d + d
        else:
            pool_each = 0
        head = 0

    breakdown = {
        "mpu_storages": storages,
        "per_direction": per_direction,
        "mpu_total": storages * per_direction,
        "pooling_sets": pool_sets,
        "pooling_total": pool_sets * pool_each,
        "readout_head": head,
        "positional_tables": 0,
    }
    total = breakdown["mpu_total"] + breakdown["pooling_total"] + head
    return total, breakdown
