"""Adam optimization, the training loop with early stopping, and evaluation
over missing rates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import DatasetSplit, ModalityBatch
from .metrics import MetricReport, SweepReport, evaluate
from .model import Model, sample_loss
from .restoration import TemporalMask, draw_mask
from .tensor import RngState

# rng stream tags so the independent draws inside one run never collide
_STREAM_TRAIN = 1
_STREAM_VAL_MASKS = 2
_STREAM_EVAL_BASE = 1000


class AdamState:
    """Per-parameter first/second moment accumulators and the step count."""

    def __init__(self, named_params):
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}
        self.t = 0


def adam_step(named_params, state: AdamState, lr: float,
              text_ids: set[int] | None = None, lr_text: float | None = None,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in place.

    Parameters whose identity appears in ``text_ids`` use ``lr_text``; a
    missing gradient counts as zero (moments still decay).
    """
    state.t += 1
    correct1 = 1.0 - beta1 ** state.t
    correct2 = 1.0 - beta2 ** state.t
    for name, p in named_params:
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        if g is None:
            m *= beta1
            v *= beta2
        else:
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
        rate = lr_text if (text_ids and id(p) in text_ids and lr_text is not None) else lr
        p.data -= rate * (m / correct1) / (np.sqrt(v / correct2) + eps)


@dataclass
class TrainConfig:
    setting: str = "complete"
    missing_rates: tuple = (0.3,)     # incomplete setting: sampled per batch
    lambda_recon: float = 1.0
    lambda_attract: float = 1.0
    lr: float = 1e-3
    lr_text: float | None = None      # text-encoder group rate; None = lr
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    accumulation: int = 4             # optimizer steps every this many batches
    patience: int = 8
    max_epochs: int = 30
    seed: int = 0
    val_missing_rate: float | None = None  # None: mean of missing_rates

    def validate(self) -> None:
        if self.setting not in ("complete", "incomplete"):
            raise ValueError(f"unknown setting '{self.setting}'")
        if self.lambda_recon < 0 or self.lambda_attract < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.batch_size < 1 or self.accumulation < 1:
            raise ValueError("batch size and accumulation must be positive")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be positive")
        for r in self.missing_rates:
            if not 0.0 <= r <= 1.0:
                raise ValueError("missing rates must lie in [0, 1]")


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_mae: float = float("inf")
    best_state: dict = field(default_factory=dict)


def predict_samples(model: Model, batch: ModalityBatch, indices,
                    masks: dict | None = None) -> np.ndarray:
    """Deterministic eval-mode predictions for the given sample indices.

    ``masks`` optionally maps index -> TemporalMask; masked samples are the
    incomplete view the model would see at test time.
    """
    preds = np.empty(len(indices))
    with T.no_grad():
        for j, i in enumerate(indices):
            sample = batch.sample(int(i))
            if masks is not None and int(i) in masks:
                from .restoration import apply_mask_sample
                sample = apply_mask_sample(sample, masks[int(i)])
            out = model.forward_view(sample, rng=None, training=False)
            preds[j] = out.prediction.item()
    return preds


def _fixed_masks(batch: ModalityBatch, indices, rate: float, rng: RngState,
                 protect_text_start: bool = True) -> dict:
    t_l, t_a, t_v = batch.lengths()
    return {int(i): draw_mask(t_l, t_a, t_v, rate, rng, protect_text_start)
            for i in indices}


def train(model: Model, batch: ModalityBatch, split: DatasetSplit,
          config: TrainConfig) -> TrainResult:
    """Optimize the model, tracking validation MAE with early stopping.

    Each epoch shuffles the training set, draws fresh masks per sample in
    the incomplete setting (missing rate sampled per batch from
    ``missing_rates``), and steps Adam every ``accumulation`` batches.
    Training stops once validation MAE has not improved for ``patience``
    epochs; the best checkpoint is restored into the model and returned.
    """
    config.validate()
    if len(split.train) == 0 or len(split.val) == 0:
        raise ValueError("empty dataset split")

    rng = RngState(config.seed, _STREAM_TRAIN)
    t_l, t_a, t_v = batch.lengths()
    params = model.named_parameters()
    opt = AdamState(params)
    text_ids = model.text_parameter_ids()
    lr_text = config.lr if config.lr_text is None else config.lr_text

    val_rate = config.val_missing_rate
    if val_rate is None:
        val_rate = float(np.mean(config.missing_rates))
    val_masks = None
    if config.setting == "incomplete":
        val_masks = _fixed_masks(batch, split.val, val_rate,
                                 RngState(config.seed, _STREAM_VAL_MASKS))

    result = TrainResult()
    since_best = 0
    train_idx = np.asarray(split.train)

    for epoch in range(1, config.max_epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        epoch_loss = 0.0
        model.zero_grads()
        pending = 0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            rate = None
            if config.setting == "incomplete":
                rate = config.missing_rates[int(rng.integers(0, len(config.missing_rates)))]
            scale = 1.0 / (len(chunk) * config.accumulation)
            for i in chunk:
                sample = batch.sample(int(i))
                mask = None
                if config.setting == "incomplete":
                    mask = draw_mask(t_l, t_a, t_v, rate, rng)
                loss, _, _ = sample_loss(model, sample, config.setting, mask,
                                         config.lambda_recon, config.lambda_attract,
                                         rng=rng, training=True)
                epoch_loss += loss.item()
                T.backward(T.scale(loss, scale))
            pending += 1
            n_batches += 1
            if pending == config.accumulation:
                adam_step(params, opt, config.lr, text_ids, lr_text,
                          config.beta1, config.beta2, config.eps)
                model.zero_grads()
                pending = 0
        if pending:
            adam_step(params, opt, config.lr, text_ids, lr_text,
                      config.beta1, config.beta2, config.eps)
            model.zero_grads()

        val_preds = predict_samples(model, batch, split.val, val_masks)
        val_mae = float(np.abs(val_preds - batch.labels[split.val]).mean())
        result.history.append({"epoch": epoch,
                               "train_loss": epoch_loss / max(1, len(order)),
                               "val_mae": val_mae})

        if val_mae < result.best_val_mae:
            result.best_val_mae = val_mae
            result.best_epoch = epoch
            result.best_state = model.state_dict()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    if result.best_state:
        model.load_state_dict(result.best_state)
    return result


def evaluate_at_rate(model: Model, batch: ModalityBatch, indices, rate: float,
                     seed: int, scale: str = "mosi",
                     protect_text_start: bool = True) -> MetricReport:
    """Evaluate at one missing rate with per-sample masks derived from
    (seed, rate), so repeated calls see identical masks."""
    if rate == 0.0:
        preds = predict_samples(model, batch, indices)
    else:
        stream = _STREAM_EVAL_BASE + int(round(rate * 1000))
        if not protect_text_start:
            stream += 1
        masks = _fixed_masks(batch, indices, rate, RngState(seed, stream),
                             protect_text_start)
        preds = predict_samples(model, batch, indices, masks)
    return evaluate(preds, batch.labels[indices], scale=scale)


def sweep_missing_rates(model: Model, batch: ModalityBatch, indices, rates,
                        seed: int, scale: str = "mosi") -> SweepReport:
    report = SweepReport()
    for rate in rates:
        report.add(float(rate), evaluate_at_rate(model, batch, indices,
                                                 float(rate), seed, scale))
    return report
