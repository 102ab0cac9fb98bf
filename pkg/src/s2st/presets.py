"""Named configuration bundles and the flat key=value schema behind them.

A preset resolves to a flat string-to-string item dict; the dict is what
config files, ``--set`` overrides, and ``preset-dump`` all speak, so a dump
fed back as a config reproduces the run exactly. ``build_preset`` turns items
into the typed configs and rejects unknown or missing keys.
"""

from dataclasses import dataclass

from .corpus import FeederConfig
from .encoder import EncoderConfig
from .errors import ConfigError, FormatError
from .signal import MelConfig
from .synthesizer import SynthesizerConfig
from .training import ModelConfig, TrainConfig
from .translator import TranslatorConfig


@dataclass(frozen=True)
class Preset:
    name: str
    input_mel: MelConfig
    output_mel: MelConfig
    model: ModelConfig
    train: TrainConfig
    feeder: FeederConfig


# Shared rows of the three full-scale recipes. Per-recipe dicts below override
# the columns that differ.
_FULL_SHARED = {
    "input.mels": "80",
    "input.fmin": "125",
    "input.window_ms": "25",
    "input.step_ms": "10",
    "output.sample_rate": "24000",
    "output.mels": "128",
    "output.fmin": "20",
    "output.fmax": "12000",
    "output.window_ms": "50",
    "output.step_ms": "12.5",
    "augment.enabled": "true",
    "augment.freq_blocks": "2",
    "augment.time_blocks": "10",
    "augment.freq_ratio": "0.33",
    "augment.time_ratio": "0.05",
    "augment.concat_prob": "0",
    "encoder.dim": "144",
    "encoder.blocks": "16",
    "encoder.heads": "4",
    "encoder.kernel": "32",
    "encoder.subsample": "4",
    "encoder.ff_mult": "4",
    "encoder.dropout": "0.1",
    "encoder.rel_cap": "64",
    "decoder.vocab": "64",
    "decoder.zoneout": "0.1",
    "decoder.smoothing": "0.1",
    "duration.range_floor": "0.1",
    "synth.decoder": "ar",
    "synth.lstm": "1024x2",
    "synth.zoneout": "0.1",
    "synth.prenet": "128x2",
    "synth.prenet_dropout": "0.5",
    "synth.postnet_kernel": "5",
    "synth.postnet_channels": "512",
    "synth.postnet_layers": "5",
    "synth.nar": "512x6",
    "synth.nar_heads": "8",
    "synth.nar_kernel": "8",
    "synth.nar_dropout": "0.1",
    "synth.max_seconds": "30",
    "loss.phoneme": "10",
    "loss.duration": "1",
    "loss.spec": "1",
    "loss.l2": "1e-06",
    "train.steps": "200000",
    "train.clip": "1",
    "train.seed": "0",
    "train.log_every": "20",
    "train.ckpt_every": "2000",
    "train.eval_every": "2000",
}

_PRESET_ITEMS = {
    "fisher": {
        **_FULL_SHARED,
        "input.sample_rate": "8000",
        "input.fmax": "3800",
        "attention.out": "256",
        "attention.hidden": "512",
        "attention.heads": "4",
        "attention.dropout": "0.1",
        "decoder.lstm": "256x4",
        "decoder.embedding": "96",
        "duration.lstm": "64x2",
        "train.peak_lr": "0.0042",
        "train.warmup": "10000",
        "train.batch": "1024",
    },
    "covost2": {
        **_FULL_SHARED,
        "input.sample_rate": "48000",
        "input.fmax": "7600",
        "attention.out": "512",
        "attention.hidden": "512",
        "attention.heads": "8",
        "attention.dropout": "0.2",
        "decoder.lstm": "512x6",
        "decoder.embedding": "256",
        "duration.lstm": "128x2",
        "train.peak_lr": "0.0022",
        "train.warmup": "20000",
        "train.batch": "768",
    },
    "conversational": {
        **_FULL_SHARED,
        # source audio is mixed 16-48 kHz; analysis standardizes on 16 kHz
        "input.sample_rate": "16000",
        "input.fmax": "7600",
        "attention.out": "512",
        "attention.hidden": "512",
        "attention.heads": "8",
        "attention.dropout": "0.2",
        "decoder.lstm": "512x4",
        "decoder.embedding": "256",
        "duration.lstm": "128x2",
        "train.peak_lr": "0.0033",
        "train.warmup": "10000",
        "train.batch": "768",
    },
    # reduced bundle sized for CPU runs on the synthetic corpus; input and
    # output mels share a channel count so source/prediction speaker
    # statistics live in one space
    "toy": {
        "input.sample_rate": "16000",
        "input.mels": "32",
        "input.fmin": "125",
        "input.fmax": "7600",
        "input.window_ms": "25",
        "input.step_ms": "10",
        "output.sample_rate": "16000",
        "output.mels": "32",
        "output.fmin": "125",
        "output.fmax": "7600",
        "output.window_ms": "50",
        "output.step_ms": "12.5",
        "augment.enabled": "false",
        "augment.freq_blocks": "2",
        "augment.time_blocks": "10",
        "augment.freq_ratio": "0.33",
        "augment.time_ratio": "0.05",
        "augment.concat_prob": "0",
        "encoder.dim": "64",
        "encoder.blocks": "4",
        "encoder.heads": "4",
        "encoder.kernel": "8",
        "encoder.subsample": "4",
        "encoder.ff_mult": "4",
        "encoder.dropout": "0.1",
        "encoder.rel_cap": "64",
        "attention.out": "64",
        "attention.hidden": "128",
        "attention.heads": "4",
        "attention.dropout": "0.1",
        "decoder.vocab": "15",
        "decoder.lstm": "96x2",
        "decoder.zoneout": "0.1",
        "decoder.embedding": "32",
        "decoder.smoothing": "0.1",
        "duration.lstm": "32x2",
        "duration.range_floor": "0.1",
        "synth.decoder": "ar",
        "synth.lstm": "128x1",
        "synth.zoneout": "0.1",
        "synth.prenet": "16x2",
        "synth.prenet_dropout": "0.5",
        "synth.postnet_kernel": "5",
        "synth.postnet_channels": "64",
        "synth.postnet_layers": "3",
        "synth.nar": "64x2",
        "synth.nar_heads": "4",
        "synth.nar_kernel": "8",
        "synth.nar_dropout": "0.1",
        "synth.max_seconds": "30",
        "loss.phoneme": "10",
        "loss.duration": "1",
        "loss.spec": "1",
        "loss.l2": "1e-06",
        "train.peak_lr": "0.002",
        "train.warmup": "300",
        "train.batch": "8",
        "train.steps": "5000",
        "train.clip": "1",
        "train.seed": "0",
        "train.log_every": "20",
        "train.ckpt_every": "1000",
        "train.eval_every": "500",
    },
}

PRESET_NAMES = tuple(sorted(_PRESET_ITEMS))

_SUBSAMPLE_LAYERS = {"2": 1, "4": 2, "8": 3}


def preset_items(name: str) -> dict[str, str]:
    """Fresh copy of a preset's flat items."""
    try:
        return dict(_PRESET_ITEMS[name])
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")


def dump_items(items: dict[str, str]) -> str:
    return "".join(f"{key}={items[key]}\n" for key in sorted(items))


def parse_config_text(text: str) -> dict[str, str]:
    """Flat key=value lines; blank lines and #-comments are skipped."""
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise FormatError(f"config line {lineno}: expected key=value, got {line!r}")
        items[key.strip()] = value.strip()
    return items


def _pair(text: str) -> tuple[int, int]:
    left, sep, right = text.partition("x")
    if not sep:
        raise ValueError(text)
    return int(left), int(right)


def _bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError(text)


def build_preset(name: str, items: dict[str, str]) -> Preset:
    """Typed configs from flat items; every key must be known and present."""
    left = dict(items)

    def take(key, parse):
        try:
            raw = left.pop(key)
        except KeyError:
            raise ConfigError(f"missing config key {key!r}")
        try:
            return parse(raw)
        except (ValueError, TypeError, KeyError):
            raise ConfigError(f"bad value for {key}: {raw!r}")

    def mel(side):
        return MelConfig(take(f"{side}.sample_rate", int), take(f"{side}.mels", int),
                         take(f"{side}.fmin", float), take(f"{side}.fmax", float),
                         take(f"{side}.window_ms", float), take(f"{side}.step_ms", float))

    input_mel = mel("input")
    output_mel = mel("output")
    encoder = EncoderConfig(
        n_mels=input_mel.n_mels,
        dim=take("encoder.dim", int),
        n_blocks=take("encoder.blocks", int),
        n_heads=take("encoder.heads", int),
        conv_kernel=take("encoder.kernel", int),
        dropout=take("encoder.dropout", float),
        ff_mult=take("encoder.ff_mult", int),
        subsample_layers=take("encoder.subsample", lambda t: _SUBSAMPLE_LAYERS[t]),
        rel_cap=take("encoder.rel_cap", int),
    )
    dec_hidden, dec_layers = take("decoder.lstm", _pair)
    translator = TranslatorConfig(
        vocab_size=take("decoder.vocab", int),
        emb_dim=take("decoder.embedding", int),
        hidden=dec_hidden,
        n_layers=dec_layers,
        zoneout=take("decoder.zoneout", float),
        attn_hidden=take("attention.hidden", int),
        attn_heads=take("attention.heads", int),
        attn_out=take("attention.out", int),
        attn_dropout=take("attention.dropout", float),
    )
    duration_hidden, duration_layers = take("duration.lstm", _pair)
    synth_hidden, synth_layers = take("synth.lstm", _pair)
    prenet_dim, prenet_count = take("synth.prenet", _pair)
    nar_dim, nar_blocks = take("synth.nar", _pair)
    synthesizer = SynthesizerConfig(
        in_dim=translator.feature_dim,
        n_mels=output_mel.n_mels,
        duration_hidden=duration_hidden,
        duration_layers=duration_layers,
        range_floor=take("duration.range_floor", float),
        decoder=take("synth.decoder", str),
        lstm_hidden=synth_hidden,
        lstm_layers=synth_layers,
        zoneout=take("synth.zoneout", float),
        prenet_dims=(prenet_dim,) * prenet_count,
        prenet_dropout=take("synth.prenet_dropout", float),
        postnet_kernel=take("synth.postnet_kernel", int),
        postnet_channels=take("synth.postnet_channels", int),
        postnet_layers=take("synth.postnet_layers", int),
        nar_dim=nar_dim,
        nar_blocks=nar_blocks,
        nar_heads=take("synth.nar_heads", int),
        nar_kernel=take("synth.nar_kernel", int),
        nar_dropout=take("synth.nar_dropout", float),
        max_seconds=take("synth.max_seconds", float),
    )
    if synthesizer.decoder not in ("ar", "nar"):
        raise ConfigError(f"bad value for synth.decoder: {synthesizer.decoder!r}")
    model = ModelConfig(encoder=encoder, translator=translator,
                        synthesizer=synthesizer,
                        seconds_per_frame=output_mel.seconds_per_frame)
    train = TrainConfig(
        steps=take("train.steps", int),
        peak_lr=take("train.peak_lr", float),
        warmup_steps=take("train.warmup", int),
        clip_norm=take("train.clip", float),
        l2_weight=take("loss.l2", float),
        phoneme_weight=take("loss.phoneme", float),
        duration_weight=take("loss.duration", float),
        spec_weight=take("loss.spec", float),
        label_smoothing=take("decoder.smoothing", float),
        seed=take("train.seed", int),
        log_every=take("train.log_every", int),
        ckpt_every=take("train.ckpt_every", int),
        eval_every=take("train.eval_every", int),
    )
    feeder = FeederConfig(
        batch_size=take("train.batch", int),
        concat_prob=take("augment.concat_prob", float),
        augment=take("augment.enabled", _bool),
        n_freq_blocks=take("augment.freq_blocks", int),
        n_time_blocks=take("augment.time_blocks", int),
        freq_ratio=take("augment.freq_ratio", float),
        time_ratio=take("augment.time_ratio", float),
    )
    if left:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(left))}")
    return Preset(name=name, input_mel=input_mel, output_mel=output_mel,
                  model=model, train=train, feeder=feeder)
