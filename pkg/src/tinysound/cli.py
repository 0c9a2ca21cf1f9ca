"""Batch command-line front end.

One flat config file (``key = value``, ``#`` comments) is shared by every
subcommand; flags override config values. All randomness is controlled by
``--seed``. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import sys
from pathlib import Path

import numpy as np

from . import audio_io, augment, deploy, dsp, model as model_mod, tokenizer, train
from .errors import ConfigError, TinySoundError

log = logging.getLogger(__name__)

COMMANDS = (
    "featurize", "build-vocab", "augment-preview", "train", "finetune",
    "eval", "predict", "count", "quantize", "bench", "sweep",
)

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


class Config:
    """Typed access over the flat key-value map."""

    def __init__(self, values: dict[str, str]):
        self.values = values

    def get(self, key: str, default=None) -> str | None:
        return self.values.get(key, default)

    def get_int(self, key: str, default: int) -> int:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"config key {key} is not an integer: {raw!r}") from exc

    def get_float(self, key: str, default: float) -> float:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"config key {key} is not a number: {raw!r}") from exc

    def get_bool(self, key: str, default: bool) -> bool:
        raw = self.values.get(key)
        if raw is None:
            return default
        if raw.lower() in _BOOL_TRUE:
            return True
        if raw.lower() in _BOOL_FALSE:
            return False
        raise ConfigError(f"config key {key} is not a boolean: {raw!r}")


def spectrogram_config(cfg: Config) -> dsp.SpectrogramConfig:
    return dsp.SpectrogramConfig(
        n_fft=cfg.get_int("n_fft", 1024),
        hop_length=cfg.get_int("hop_length", 512),
        win_length=cfg.get_int("win_length", 1024),
        n_mels=cfg.get_int("n_mels", 128),
        sample_rate=audio_io.TARGET_RATE,
        log_scale=cfg.get_bool("log_mel", True),
    )


def pipeline_config(cfg: Config) -> train.PipelineConfig:
    feature = cfg.get("feature", "mel")
    vocab = None
    if feature == train.CURVE:
        vocab_path = cfg.get("vocab_path")
        if vocab_path is None:
            raise ConfigError("curve feature requires a vocab_path config key")
        vocab = tokenizer.load_vocab(vocab_path)
    n_coeffs = cfg.get_int("n_coeffs", 0)
    return train.PipelineConfig(
        feature=feature,
        spectrogram=spectrogram_config(cfg),
        n_coeffs=n_coeffs or None,
        downsample=cfg.get_int("downsample", 1),
        normalize=cfg.get_bool("normalize01", False),
        reshape_rows=cfg.get_int("reshape_rows", 512),
        reshape_cols=cfg.get_int("reshape_cols", 512),
        vocab=vocab,
    )


def augment_specs(cfg: Config) -> list[augment.AugmentSpec]:
    """One boolean + probability config key per augmentation kind."""
    if not cfg.get_bool("augment", False):
        return []
    default_p = cfg.get_float("augment_probability", 0.3)
    specs = []
    for kind in augment.AUGMENTATIONS:
        if cfg.get_bool(f"aug_{kind}", True):
            specs.append(augment.AugmentSpec(kind, cfg.get_float(f"aug_{kind}_p", default_p)))
    return specs


def train_config(cfg: Config, seed_override: int | None = None) -> train.TrainConfig:
    val_fold = cfg.get_int("val_fold", -1)
    return train.TrainConfig(
        lr_peak=cfg.get_float("lr_peak", 1e-4),
        warmup_steps=cfg.get_int("warmup_steps", 10_000),
        batch_size=cfg.get_int("batch_size", 64),
        epochs=cfg.get_int("epochs", 100),
        seed=seed_override if seed_override is not None else cfg.get_int("seed", 0),
        window_samples=cfg.get_int("window_samples", 220_500),
        augments=augment_specs(cfg),
        pipeline=pipeline_config(cfg),
        val_fold=val_fold if val_fold >= 0 else None,
        val_fraction=cfg.get_float("val_fraction", 0.2),
    )


def model_config(cfg: Config, pipeline: train.PipelineConfig,
                 window_samples: int, classes: int) -> model_mod.ModelConfig:
    return pipeline.model_config(
        window_samples, classes,
        hidden=cfg.get_int("hidden", 16),
        layers=cfg.get_int("layers", 1),
        heads=cfg.get_int("heads", 2),
        share_layers=cfg.get_bool("share_layers", False),
        dropout_rate=cfg.get_float("dropout", 0.1),
    )


def load_dataset(cfg: Config) -> audio_io.DatasetManifest:
    root = cfg.get("data_root")
    if root is None:
        raise ConfigError("config key data_root is required for this command")
    return audio_io.load_manifest(root, cfg.get("layout", audio_io.CSV_MANIFEST))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_featurize(args, cfg: Config) -> int:
    pipeline = pipeline_config(cfg)
    clip = audio_io.read_wav(args.input)
    if clip.sample_rate != audio_io.TARGET_RATE:
        clip = audio_io.resample(clip, audio_io.TARGET_RATE)
    window = audio_io.center_slice(clip, cfg.get_int("window_samples", 220_500))
    if pipeline.feature == train.CURVE:
        raise ConfigError("featurize writes feature matrices; curve tokens have no TSFM form")
    if pipeline.feature == train.MEL:
        feats = dsp.mel_spectrogram(window, pipeline.spectrogram)
    elif pipeline.feature == train.MFCC:
        feats = dsp.mfcc(window, pipeline.spectrogram, pipeline.n_coeffs)
    else:
        feats = dsp.reshape_amplitudes(window, pipeline.reshape_rows, pipeline.reshape_cols)
    feats = dsp.downsample_columns(feats, pipeline.downsample)
    if pipeline.normalize:
        feats = dsp.normalize01(feats)
    out = args.out or (Path(args.input).stem + ".tsfm")
    dsp.save_features(out, feats)
    print(f"wrote {feats.shape[0]}x{feats.shape[1]} {feats.kind} features to {out}")
    return 0


def cmd_build_vocab(args, cfg: Config) -> int:
    manifest = load_dataset(cfg)
    spec = tokenizer.CurveSpec(
        curve_len=cfg.get_int("curve_len", 8),
        resolution=cfg.get_int("resolution", 64),
        top_k=cfg.get_int("top_k", 50_000),
        mode=cfg.get("curve_mode", tokenizer.ABSOLUTE),
    )
    store = train.ClipStore()
    corpus = [store.load(e) for e in manifest.entries]
    vocab, stats = tokenizer.build_curve_vocab(corpus, spec)
    out = args.out or "vocab.tscv"
    tokenizer.save_vocab(out, vocab)
    print(
        f"vocab of {len(vocab)} curves ({spec.mode}) from {stats.distinct_curves} distinct; "
        f"vocab_coverage={stats.vocab_coverage:.4f} token_coverage={stats.token_coverage:.4f}"
    )
    print(f"wrote {out}")
    return 0


def cmd_augment_preview(args, cfg: Config) -> int:
    clip = audio_io.read_wav(args.input)
    if clip.sample_rate != audio_io.TARGET_RATE:
        clip = audio_io.resample(clip, audio_io.TARGET_RATE)
    specs = augment_specs(cfg) or augment.default_pipeline(1.0)
    rng = np.random.default_rng(args.seed)
    out_samples = augment.apply_pipeline(clip.samples, specs, rng)
    peak = np.max(np.abs(out_samples), initial=0.0)
    if peak > 1.0:  # keep the preview listenable after amplification
        out_samples = out_samples / peak
    out = args.out or (Path(args.input).stem + "_augmented.wav")
    audio_io.write_wav(out, clip.with_samples(out_samples))
    print(f"wrote {out}")
    return 0


def _run_training(args, cfg: Config, base: model_mod.Checkpoint | None) -> int:
    manifest = load_dataset(cfg)
    tcfg = train_config(cfg, args.seed)
    mcfg = model_config(cfg, tcfg.pipeline, tcfg.window_samples,
                        classes=len(manifest.class_names))
    if base is None:
        result = train.train_loop(manifest, mcfg, tcfg)
    else:
        result = train.finetune(base, manifest, tcfg, model_cfg=mcfg)
    out_dir = Path(args.out or "runs")
    out_dir.mkdir(parents=True, exist_ok=True)
    model_mod.save_checkpoint(out_dir / "best.tsck", result.best.params,
                              result.best.opt_tensors, result.best.step,
                              result.best.metadata)
    model_mod.save_checkpoint(out_dir / "last.tsck", result.last.params,
                              result.last.opt_tensors, result.last.step,
                              result.last.metadata)
    train.write_metrics_csv(out_dir / "metrics.csv", result.metrics)
    best_acc = result.best.metadata["val_acc"]
    print(f"best val_acc={best_acc:.4f}; checkpoints and metrics.csv in {out_dir}")
    return 0


def cmd_train(args, cfg: Config) -> int:
    return _run_training(args, cfg, None)


def cmd_finetune(args, cfg: Config) -> int:
    base = model_mod.load_checkpoint(args.base)
    return _run_training(args, cfg, base)


def cmd_eval(args, cfg: Config) -> int:
    manifest = load_dataset(cfg)
    ckpt = model_mod.load_checkpoint(args.ckpt)
    tcfg = train_config(cfg, args.seed)
    _, val_entries = train.split_manifest(manifest, tcfg)
    acc = train.evaluate(ckpt.params, val_entries, tcfg)
    print(f"accuracy {acc:.4f} over {len(val_entries)} held-out clips")
    return 0


def cmd_predict(args, cfg: Config) -> int:
    tcfg = train_config(cfg, args.seed)
    clip = audio_io.read_wav(args.input)
    if clip.sample_rate != audio_io.TARGET_RATE:
        clip = audio_io.resample(clip, audio_io.TARGET_RATE)
    window = audio_io.center_slice(clip, tcfg.window_samples)
    example = tcfg.pipeline.extract(window)
    if args.quantized:
        qparams = deploy.load_quantized(args.ckpt)
        metadata = qparams.metadata
        logits = deploy.qforward(qparams, example[None, ...])[0]
    else:
        ckpt = model_mod.load_checkpoint(args.ckpt)
        metadata = ckpt.metadata
        logits = model_mod.forward(ckpt.params, example[None, ...], training=False)[0]
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    names = metadata.get("class_names") or [str(i) for i in range(len(probs))]
    order = np.argsort(probs)[::-1]
    print(f"prediction: {names[order[0]]}")
    for i in order:
        print(f"  {names[i]}: {probs[i]:.4f}")
    return 0


def cmd_count(args, cfg: Config) -> int:
    pipeline = pipeline_config(cfg)
    window = cfg.get_int("window_samples", 220_500)
    classes = cfg.get_int("classes", 6)
    mcfg = model_config(cfg, pipeline, window, classes)
    params = model_mod.count_params(mcfg)
    print(f"parameters: {params:,}")
    print(f"mult-adds (per-position convention): {model_mod.count_mult_adds(mcfg, model_mod.PER_POSITION):,}")
    print(f"mult-adds (total forward pass): {model_mod.count_mult_adds(mcfg, model_mod.TOTAL):,}")
    return 0


def cmd_quantize(args, cfg: Config) -> int:
    ckpt = model_mod.load_checkpoint(args.ckpt)
    qparams = deploy.quantize_dynamic(ckpt.params, metadata=ckpt.metadata)
    out = args.out or (str(Path(args.ckpt).with_suffix("")) + ".tscq")
    deploy.save_quantized(out, qparams)
    f32_bytes = deploy.weight_payload_bytes(ckpt.params)
    q_bytes = deploy.weight_payload_bytes(qparams)
    print(f"wrote {out} (weight payload {q_bytes} bytes, {q_bytes / f32_bytes:.1%} of float32)")
    return 0


def cmd_bench(args, cfg: Config) -> int:
    tcfg = train_config(cfg, args.seed)
    if args.quantized:
        target = deploy.load_quantized(args.ckpt)
    else:
        target = model_mod.load_checkpoint(args.ckpt).params
    report = deploy.bench(target, tcfg.pipeline, tcfg.window_samples, n_runs=args.runs)
    print(report.to_json_line())
    return 0


_SWEEP_KEYS = {
    "sweep_n_mels": "n_mels",
    "sweep_hop_length": "hop_length",
    "sweep_layers": "layers",
    "sweep_heads": "heads",
    "sweep_window_samples": "window_samples",
    "sweep_augment": "augment",
}


def cmd_sweep(args, cfg: Config) -> int:
    manifest = load_dataset(cfg)
    axes = []
    for sweep_key, target_key in _SWEEP_KEYS.items():
        raw = cfg.get(sweep_key)
        if raw is not None:
            values = [v.strip() for v in raw.split(",") if v.strip()]
            if values:
                axes.append((target_key, values))
    if not axes:
        raise ConfigError("sweep needs at least one sweep_* config key with values")
    points = list(itertools.product(*(vals for _, vals in axes)))
    if args.budget is not None and args.budget < len(points):
        rng = np.random.default_rng(args.seed if args.seed is not None else cfg.get_int("seed", 0))
        chosen = rng.choice(len(points), size=args.budget, replace=False)
        points = [points[i] for i in sorted(chosen)]

    rows = []
    for point in points:
        overrides = dict(cfg.values)
        overrides.update({key: value for (key, _), value in zip(axes, point)})
        point_cfg = Config(overrides)
        tcfg = train_config(point_cfg, args.seed)
        mcfg = model_config(point_cfg, tcfg.pipeline, tcfg.window_samples,
                            classes=len(manifest.class_names))
        result = train.train_loop(manifest, mcfg, tcfg)
        best = max((m["val_acc"] for m in result.metrics), default=float("nan"))
        label = ";".join(f"{key}={value}" for (key, _), value in zip(axes, point))
        rows.append((label, best))
        print(f"{label}: best_val_acc={best:.4f}")

    out = args.out or "sweep.csv"
    with open(out, "w") as fh:
        fh.write("point,best_val_acc\n")
        for label, best in rows:
            fh.write(f"{label},{best}\n")
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tinysound",
        description="Tiny-transformer environmental sound classification toolkit.",
    )
    sub = parser.add_subparsers(dest="command")

    def add(name, needs_input=False, needs_ckpt=False, needs_base=False):
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        if needs_input:
            p.add_argument("input", help="input wav file")
        if needs_ckpt:
            p.add_argument("--ckpt", required=True, help="checkpoint path")
        if needs_base:
            p.add_argument("--base", required=True, help="base checkpoint to finetune")
        return p

    add("featurize", needs_input=True)
    add("build-vocab")
    add("augment-preview", needs_input=True)
    add("train")
    add("finetune", needs_base=True)
    add("eval", needs_ckpt=True)
    p = add("predict", needs_input=True, needs_ckpt=True)
    p.add_argument("--quantized", action="store_true")
    add("count")
    add("quantize", needs_ckpt=True)
    p = add("bench", needs_ckpt=True)
    p.add_argument("--quantized", action="store_true")
    p.add_argument("--runs", type=int, default=10)
    p = add("sweep")
    p.add_argument("--budget", type=int, default=None)
    return parser


_HANDLERS = {
    "featurize": cmd_featurize,
    "build-vocab": cmd_build_vocab,
    "augment-preview": cmd_augment_preview,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "count": cmd_count,
    "quantize": cmd_quantize,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits on usage errors and --help
        return 0 if exc.code == 0 else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        config = Config(parse_config_file(args.config) if args.config else {})
        if args.seed is None:
            seed = config.get("seed")
            args.seed = int(seed) if seed is not None else 0
        return _HANDLERS[args.command](args, config)
    except (TinySoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
