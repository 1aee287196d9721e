"""Command-line interface for training, evaluation sweeps, complexity
benchmarks, gradient audits, and attention dumps.

Commands::

    trifuse train      train over a seed list; checkpoints + history + metrics
    trifuse sweep      evaluate checkpoints across missing rates (curves, areas)
    trifuse bench      complexity table: analytic vs measured MACs, parameters
    trifuse gradcheck  finite-difference audit of the full training loss
    trifuse dump-attn  export attention weights for one sample as CSV

Every command reads an optional JSON config file, applies ``--set key=value``
overrides, writes the fully resolved config next to its outputs, and draws
all randomness from the configured seeds, so a rerun from the emitted config
reproduces the numeric outputs bit for bit (the benchmark's wall-clock
timings live in a separate file that is exempt from that guarantee).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (ModalityBatch, SyntheticSpec, generate_synthetic,
                   load_features)
from .encoders import EncodedViews
from .fusion import (STRATEGIES, FusionConfig, FusionState, count_macs,
                     emt_forward, param_count)
from .metrics import METRIC_FIELDS
from .model import Model, ModelConfig, sample_loss
from .restoration import draw_mask
from .tensor import RngState, Tensor, finite_diff_check
from .training import (TrainConfig, evaluate_at_rate, predict_samples,
                       sweep_missing_rates, train)


class ConfigError(ValueError):
    def __init__(self, message: str, field_name: str | None = None):
        super().__init__(message)
        self.field_name = field_name


@dataclass
class RunConfig:
    """Fully resolved settings for one command invocation."""

    command: str = "train"
    out_dir: str = "runs/latest"
    seeds: tuple = (0,)
    scale: str = "mosi"
    # data source: a feature directory, or the synthetic spec below
    data_path: str | None = None
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    # architecture
    strategy: str = "oagl"
    variant: str = "parallel"
    layers: int = 2
    width: int = 32
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
    share_simsiam_heads: bool = False
    siamese_projector_factor: int = 2
    # training
    setting: str = "complete"
    missing_rates: tuple = (0.3,)
    lambda_recon: float = 1.0
    lambda_attract: float = 1.0
    lr: float = 1e-3
    lr_text: float | None = None
    batch_size: int = 32
    accumulation: int = 4
    patience: int = 8
    max_epochs: int = 30
    # sweep
    sweep_rates: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    checkpoint: str | None = None
    train_inline: bool = False
    # gradcheck
    gradcheck_missing_rate: float = 0.5
    gradcheck_h: float = 1e-5
    gradcheck_tolerance: float = 1e-4
    max_elements: int | None = None
    # bench
    bench_lengths: tuple = (20, 40, 32)
    bench_modalities: tuple = (2, 3, 4, 5, 6)
    bench_t: int = 32
    skip_timing: bool = False
    # dump-attn
    sample_id: int = 0
    dump_missing_rate: float = 0.0
    mask_seed: int = 0

    def fusion_config(self) -> FusionConfig:
        cfg = FusionConfig(
            strategy=self.strategy, variant=self.variant, layers=self.layers,
            width=self.width, heads=self.heads, expansion=self.expansion,
            pooling=self.pooling, share_mpu=self.share_mpu,
            share_modality=self.share_modality, share_layer=self.share_layer,
            embed_dropout=self.embed_dropout, attn_dropout=self.attn_dropout,
            ffn_dropout=self.ffn_dropout, activation=self.activation,
            attention_out_proj=self.attention_out_proj)
        cfg.validate()
        return cfg

    def model_config(self, batch: ModalityBatch) -> ModelConfig:
        return ModelConfig(
            fusion=self.fusion_config(),
            vocab_size=self.data.vocab_size,
            audio_features=batch.audio.shape[2],
            vision_features=batch.vision.shape[2],
            share_simsiam_heads=self.share_simsiam_heads,
            siamese_projector_factor=self.siamese_projector_factor,
            activation=self.activation)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            setting=self.setting, missing_rates=tuple(self.missing_rates),
            lambda_recon=self.lambda_recon, lambda_attract=self.lambda_attract,
            lr=self.lr, lr_text=self.lr_text, batch_size=self.batch_size,
            accumulation=self.accumulation, patience=self.patience,
            max_epochs=self.max_epochs, seed=seed)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["seeds"] = list(self.seeds)
        for name in ("missing_rates", "sweep_rates", "bench_lengths",
                     "bench_modalities"):
            out[name] = list(out[name])
        out["data"]["signal_weights"] = list(self.data.signal_weights)
        out["data"]["split_fractions"] = list(self.data.split_fractions)
        return out


_RUN_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}
_DATA_FIELDS = {f.name for f in dataclasses.fields(SyntheticSpec)}
_TUPLE_FIELDS = {"seeds", "missing_rates", "sweep_rates", "bench_lengths",
                 "bench_modalities"}

# per-command defaults layered over the dataclass defaults; gradcheck uses
# the tiny fully-shared audit profile so a full element-wise sweep stays fast
_COMMAND_DEFAULTS = {
    "gradcheck": {
        "width": 8, "layers": 2, "heads": 2, "expansion": 2,
        "share_mpu": True, "share_modality": True, "share_layer": True,
        "share_simsiam_heads": True, "siamese_projector_factor": 1,
        "attn_dropout": 0.0, "ffn_dropout": 0.0,
        "embed_dropout": 0.0, "setting": "incomplete",
        "data": {"n_samples": 4, "t_text": 3, "t_audio": 4, "t_vision": 3,
                 "f_audio": 2, "f_vision": 2, "vocab_size": 8,
                 "signal_events": 2, "split_fractions": [0.5, 0.25]},
    },
    "bench": {"attn_dropout": 0.0, "ffn_dropout": 0.0},
}


def _apply_updates(config: RunConfig, updates: dict, source: str) -> RunConfig:
    for key, value in updates.items():
        if key == "data":
            if not isinstance(value, dict):
                raise ConfigError("data must be a mapping", "data")
            spec = config.data
            for dkey, dvalue in value.items():
                if dkey not in _DATA_FIELDS:
                    raise ConfigError(f"unknown data field '{dkey}' (from {source})",
                                      f"data.{dkey}")
                if dkey in ("signal_weights", "split_fractions"):
                    dvalue = tuple(dvalue)
                spec = replace(spec, **{dkey: dvalue})
            config = replace(config, data=spec)
            continue
        if key not in _RUN_FIELDS:
            raise ConfigError(f"unknown config field '{key}' (from {source})", key)
        if key in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"'{key}' must be a list", key)
            value = tuple(value)
        config = replace(config, **{key: value})
    return config


def resolve_config(command: str, config_path: str | None,
                   overrides: list[str] | None) -> RunConfig:
    """defaults -> per-command profile -> config file -> --set overrides."""
    config = RunConfig(command=command)
    config = _apply_updates(config, _COMMAND_DEFAULTS.get(command, {}), "defaults")
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}", "config")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}", "config")
        loaded.pop("command", None)
        config = _apply_updates(config, loaded, str(path))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'", item)
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if key.startswith("data."):
            config = _apply_updates(config, {"data": {key[5:]: value}}, "--set")
        else:
            config = _apply_updates(config, {key: value}, "--set")
    config = replace(config, command=command)
    config.fusion_config()  # validate early
    return config


def load_dataset(config: RunConfig):
    if config.data_path:
        return load_features(config.data_path)
    return generate_synthetic(config.data)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_config(config: RunConfig, out: Path) -> None:
    _write_json(out / "resolved_config.json", config.to_dict())


# ---------------------------------------------------------------------------
# train


def cmd_train(config: RunConfig) -> dict:
    out = Path(config.out_dir)
    _write_config(config, out)
    batch, split = load_dataset(config)
    batch.validate(config.data.vocab_size)
    per_seed = {}
    for seed in config.seeds:
        seed_dir = out / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        model = Model(config.model_config(batch), RngState(seed))
        result = train(model, batch, split, config.train_config(seed))
        np.savez(seed_dir / "checkpoint.npz", **model.state_dict())
        _write_json(seed_dir / "history.json", {
            "history": result.history,
            "best_epoch": result.best_epoch,
            "best_val_mae": result.best_val_mae,
        })
        reports = {"rate_0.0": evaluate_at_rate(
            model, batch, split.test, 0.0, seed, config.scale).to_dict()}
        if config.setting == "incomplete":
            rate = float(np.mean(config.missing_rates))
            reports[f"rate_{rate}"] = evaluate_at_rate(
                model, batch, split.test, rate, seed, config.scale).to_dict()
        _write_json(seed_dir / "metrics.json", reports)
        per_seed[seed] = reports["rate_0.0"]
    aggregate = {name: float(np.mean([per_seed[s][name] for s in config.seeds]))
                 for name in METRIC_FIELDS}
    aggregate["seeds"] = list(config.seeds)
    _write_json(out / "aggregate.json", aggregate)
    return aggregate


def _load_checkpoint_run(checkpoint_dir: str) -> tuple[RunConfig, Path]:
    root = Path(checkpoint_dir)
    cfg_path = root / "resolved_config.json"
    if not cfg_path.exists():
        raise ConfigError(f"no resolved_config.json in {root}", "checkpoint")
    loaded = json.loads(cfg_path.read_text())
    command = loaded.pop("command", "train")
    base = RunConfig(command=command)
    return _apply_updates(base, loaded, str(cfg_path)), root


def _model_from_checkpoint(train_config: RunConfig, root: Path, seed: int,
                           batch: ModalityBatch) -> Model:
    ckpt_path = root / f"seed{seed}" / "checkpoint.npz"
    if not ckpt_path.exists():
        raise ConfigError(f"missing checkpoint {ckpt_path}", "checkpoint")
    model = Model(train_config.model_config(batch), RngState(seed))
    with np.load(ckpt_path) as data:
        model.load_state_dict({k: data[k] for k in data.files})
    return model


# ---------------------------------------------------------------------------
# sweep


def _write_curve_csv(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write("rate,metric,value\n")
        for rate, metric, value in rows:
            fh.write(f"{rate!r},{metric},{value!r}\n")


def cmd_sweep(config: RunConfig) -> dict:
    out = Path(config.out_dir)
    _write_config(config, out)
    if config.checkpoint:
        source_config, root = _load_checkpoint_run(config.checkpoint)
        seeds = tuple(config.seeds)
    elif config.train_inline:
        inline = replace(config, command="train",
                         out_dir=str(out / "train_inline"))
        cmd_train(inline)
        source_config, root = _load_checkpoint_run(str(out / "train_inline"))
        seeds = tuple(config.seeds)
    else:
        raise ConfigError("sweep needs --checkpoint or train_inline=true",
                          "checkpoint")

    batch, split = load_dataset(source_config)
    rates = sorted(float(r) for r in config.sweep_rates)
    aggregate_auilc: dict = {}
    per_seed_aggregate = []
    for seed in seeds:
        model = _model_from_checkpoint(source_config, root, seed, batch)
        sweep = sweep_missing_rates(model, batch, split.test, rates, seed,
                                    config.scale)
        seed_dir = out / f"seed{seed}"
        rows = [(rate, metric, getattr(sweep.reports[rate], metric))
                for rate in rates for metric in METRIC_FIELDS]
        _write_curve_csv(seed_dir / "curve.csv", rows)
        payload = sweep.to_dict()
        if 1.0 in sweep.reports:
            # at full masking the protected text summary position is the only
            # surviving input; report the fully-masked variant next to it
            unprotected = evaluate_at_rate(model, batch, split.test, 1.0, seed,
                                           config.scale, protect_text_start=False)
            payload["rate_1.0_unprotected"] = unprotected.to_dict()
            _write_curve_csv(seed_dir / "curve_unprotected.csv",
                             [(1.0, m, getattr(unprotected, m))
                              for m in METRIC_FIELDS])
        _write_json(seed_dir / "auilc.json", payload)
        per_seed_aggregate.append(payload["auilc"])
    if per_seed_aggregate and per_seed_aggregate[0]:
        aggregate_auilc = {name: float(np.mean([p[name] for p in per_seed_aggregate]))
                           for name in METRIC_FIELDS}
    _write_json(out / "aggregate_auilc.json",
                {"seeds": list(seeds), "auilc_mean": aggregate_auilc})
    return aggregate_auilc


# ---------------------------------------------------------------------------
# bench


def _random_views(rng: RngState, lengths, width: int) -> EncodedViews:
    t_l, t_a, t_v = lengths

    def tns(shape):
        return Tensor(rng.normal(shape))

    return EncodedViews(tns((t_l, width)), tns((t_a, width)), tns((t_v, width)),
                        tns((width,)), tns((width,)), tns((width,)),
                        tns((t_l, width)))


def cmd_bench(config: RunConfig) -> dict:
    out = Path(config.out_dir)
    _write_config(config, out)
    lengths = tuple(int(t) for t in config.bench_lengths)
    table = {}
    timing = {}
    csv_rows = []
    for strategy in STRATEGIES:
        fusion_cfg = replace(config.fusion_config(), strategy=strategy,
                             variant="parallel")
        analytic = count_macs(fusion_cfg, lengths)
        state = FusionState(fusion_cfg, RngState(0))
        views = _random_views(RngState(1), lengths, fusion_cfg.width)
        result = emt_forward(views, fusion_cfg, state)
        measured = result.fusion_macs
        entry = {"analytic_macs": analytic, "measured_macs": measured,
                 "match": analytic == measured,
                 "scaling": {str(m): count_macs(fusion_cfg,
                                                [config.bench_t] * m)
                             for m in config.bench_modalities}}
        params_by_flags = {}
        for flags in range(8):
            shared = replace(fusion_cfg,
                             share_mpu=bool(flags & 1),
                             share_modality=bool(flags & 2),
                             share_layer=bool(flags & 4))
            total, breakdown = param_count(shared)
            key = "".join("smx"[i] if flags & (1 << i) else "-" for i in range(3))
            params_by_flags[key] = {"total": total,
                                    "mpu_storages": breakdown["mpu_storages"]}
        entry["params_by_sharing"] = params_by_flags
        table[strategy] = entry
        csv_rows.append((strategy, "analytic_macs", analytic))
        csv_rows.append((strategy, "measured_macs", measured))
        if not config.skip_timing:
            reps = 3
            with T.no_grad():
                start = time.perf_counter()
                for _ in range(reps):
                    emt_forward(views, fusion_cfg, state)
                timing[strategy] = (time.perf_counter() - start) / reps
    ordered = sorted(STRATEGIES, key=lambda s: table[s]["analytic_macs"])
    table["ordering_by_macs"] = ordered
    _write_json(out / "complexity.json", table)
    with (out / "complexity.csv").open("w") as fh:
        fh.write("strategy,metric,value\n")
        for strategy, metric, value in csv_rows:
            fh.write(f"{strategy},{metric},{value}\n")
    if timing:
        # wall-clock timings are inherently non-reproducible and therefore
        # live outside the bit-exact determinism guarantee
        _write_json(out / "timing.json",
                    {k: {"seconds_per_forward": v} for k, v in timing.items()})
    return table


# ---------------------------------------------------------------------------
# gradcheck


def run_gradcheck(config: RunConfig):
    """Finite-difference audit of the full incomplete-setting loss."""
    audit = replace(config, attn_dropout=0.0, ffn_dropout=0.0, embed_dropout=0.0)
    batch, _ = load_dataset(audit)
    seed = audit.seeds[0]
    model = Model(audit.model_config(batch), RngState(seed))
    sample = batch.sample(0)
    t_l, t_a, t_v = batch.lengths()
    mask = draw_mask(t_l, t_a, t_v, audit.gradcheck_missing_rate,
                     RngState(seed, 5))

    def loss_fn():
        loss, _, _ = sample_loss(model, sample, "incomplete", mask,
                                 audit.lambda_recon, audit.lambda_attract,
                                 rng=None, training=False)
        return loss

    named = model.named_parameters()
    report = finite_diff_check(loss_fn, [p for _, p in named],
                               h=audit.gradcheck_h,
                               names=[n for n, _ in named],
                               max_elements=audit.max_elements,
                               rng=RngState(seed, 6))
    passed = report.max_rel_err < audit.gradcheck_tolerance
    return report, passed


def cmd_gradcheck(config: RunConfig) -> dict:
    out = Path(config.out_dir)
    _write_config(config, out)
    started = time.perf_counter()
    report, passed = run_gradcheck(config)
    elapsed = time.perf_counter() - started
    payload = {
        "passed": passed,
        "max_rel_err": report.max_rel_err,
        "worst_param": report.worst_param,
        "tolerance": config.gradcheck_tolerance,
        "per_param_max_rel_err": report.per_param,
    }
    _write_json(out / "gradcheck.json", payload)
    _write_json(out / "gradcheck_timing.json", {"seconds": elapsed})
    status = "PASS" if passed else "FAIL"
    print(f"gradcheck {status}: max rel err {report.max_rel_err:.3e} "
          f"(worst: {report.worst_param}, tol {config.gradcheck_tolerance:g})")
    if not passed:
        raise RuntimeError(
            f"gradient check failed on parameter '{report.worst_param}' "
            f"(max rel err {report.max_rel_err:.3e})")
    return payload


# ---------------------------------------------------------------------------
# dump-attn


def cmd_dump_attn(config: RunConfig) -> dict:
    out = Path(config.out_dir)
    _write_config(config, out)
    if not config.checkpoint:
        raise ConfigError("dump-attn needs --checkpoint", "checkpoint")
    source_config, root = _load_checkpoint_run(config.checkpoint)
    batch, _ = load_dataset(source_config)
    if not 0 <= config.sample_id < len(batch):
        raise ConfigError(f"unknown sample id {config.sample_id} "
                          f"(dataset has {len(batch)} samples)", "sample_id")
    seed = config.seeds[0]
    model = _model_from_checkpoint(source_config, root, seed, batch)
    sample = batch.sample(config.sample_id)
    rate = float(config.dump_missing_rate)
    if rate > 0.0:
        t_l, t_a, t_v = batch.lengths()
        mask = draw_mask(t_l, t_a, t_v, rate, RngState(config.mask_seed, 9))
        from .restoration import apply_mask_sample
        sample = apply_mask_sample(sample, mask)
    with T.no_grad():
        view = model.forward_view(sample, rng=None, training=False)
    attn_dir = out / "attn"
    attn_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for dump in view.emt.dumps:
        name = (f"layer{dump['layer']}_{dump['unit']}_{dump['direction']}"
                f"_{dump['kind']}.csv").replace("~", "-")
        with (attn_dir / name).open("w") as fh:
            fh.write("head,target_index,source_index,weight\n")
            weights = dump["weights"]
            for h in range(weights.shape[0]):
                for ti in range(weights.shape[1]):
                    for si in range(weights.shape[2]):
                        fh.write(f"{h},{ti},{si},{weights[h, ti, si]!r}\n")
        files.append(name)
    summary = {"files": files, "prediction": view.prediction.item(),
               "label": sample.label, "missing_rate": rate}
    _write_json(out / "dump_summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# entry point

_COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "dump-attn": cmd_dump_attn,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trifuse",
        description="Tri-modal sentiment fusion: training and analysis tools")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config field (JSON-parsed value)")
        p.add_argument("--seeds", help="comma-separated seed list")
        if name in ("sweep", "dump-attn"):
            p.add_argument("--checkpoint", help="directory written by `train`")
        if name == "sweep":
            p.add_argument("--train-inline", action="store_true",
                           help="train first with the current config")
        if name == "dump-attn":
            p.add_argument("--sample-id", type=int)
            p.add_argument("--rate", type=float,
                           help="missing rate for the dumped view (0 = complete)")
        if name == "bench":
            p.add_argument("--skip-timing", action="store_true")
        if name == "gradcheck":
            p.add_argument("--max-elements", type=int,
                           help="subsample large parameters to this many entries")
    return parser


def _args_to_overrides(args: argparse.Namespace) -> list[str]:
    overrides = list(args.set)
    if args.out:
        overrides.append(f"out_dir={args.out}")
    if args.seeds:
        overrides.append(f"seeds=[{args.seeds}]")
    if getattr(args, "checkpoint", None):
        overrides.append(f"checkpoint={args.checkpoint}")
    if getattr(args, "train_inline", False):
        overrides.append("train_inline=true")
    if getattr(args, "sample_id", None) is not None:
        overrides.append(f"sample_id={args.sample_id}")
    if getattr(args, "rate", None) is not None:
        overrides.append(f"dump_missing_rate={args.rate}")
    if getattr(args, "skip_timing", False):
        overrides.append("skip_timing=true")
    if getattr(args, "max_elements", None) is not None:
        overrides.append(f"max_elements={args.max_elements}")
    return overrides


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args.command, args.config,
                                _args_to_overrides(args))
        _COMMANDS[args.command](config)
    except ConfigError as err:
        print(json.dumps({"error": "config", "field": err.field_name,
                          "message": str(err)}), file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, RuntimeError) as err:
        print(json.dumps({"error": type(err).__name__, "message": str(err)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
