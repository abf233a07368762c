"""Run configuration: flat ``key = value`` TOML with a fixed key list.

Every key has a type and a default; presets overlay a handful of keys, and
the file then overlays the preset. Unknown keys are errors.

Documented keys (section ``model`` feeds the checkpoint digest)::

    preset                       name of the base preset
    model.extractor              "lspc" | "vgg"
    model.alphabet               characters of the vocabulary (set by training)
    model.conv1_channels         LSPC first conv channels (both streams)
    model.conv2_channels         LSPC second conv channels
    model.parallel_channels      channels per parallel branch
    model.parallel_kernels       three odd kernel heights, e.g. [3, 5, 7]
    model.pool_time              time pooling factor
    model.fbank_pool_feature     feature pooling of the 80-dim stream
    model.spec_pool_feature      feature pooling of the 201-dim stream
    model.projection_dim         LSPC output width
    model.fusion_mode            "trainable" | "fixed"
    model.fusion_beta            beta when fixed
    model.encoder_layers / encoder_hidden / post_hidden / post_activation / encoder_dim
    model.decoder_embed / decoder_hidden / attention_dim
    model.attention_variant      "location" | "content"
    model.location_channels / location_kernel
    loss.ctc_weight / loss.count_eos / loss.label_smoothing
    decode.beam_width / decode.ctc_weight / decode.lm_weight
    decode.max_output_length     0 means the number of encoder frames
    decode.sweep_widths          extra widths decoded one block each ([] for none)
    frontend.window / frontend.pre_emphasis / frontend.normalize
    augment.specaugment / freq_masks / freq_width / time_masks / time_width
    augment.speed_factors / augment.noise / snr_min / snr_max / noise_kind / seed
    optim.learning_rate / batch_size / max_steps / clip_norm / seed / deterministic
    optim.precision              "float32" | "float64" for training and decoding
    optim.checkpoint_every / log_every
    paths.train_manifest / dev_manifest / test_manifest / out_dir / checkpoint / lm
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .frontend import AugmentPolicy, FrontendOptions, NoisePolicy, SpecAugmentPolicy
from .model import LspcConfig, ModelConfig
from .search import BeamConfig

DEFAULTS: dict[str, object] = {
    "preset": "desk",
    "model.extractor": "lspc",
    "model.alphabet": "",
    "model.conv1_channels": 16,
    "model.conv2_channels": 16,
    "model.parallel_channels": 8,
    "model.parallel_kernels": [3, 5, 7],
    "model.pool_time": 2,
    "model.fbank_pool_feature": 2,
    "model.spec_pool_feature": 3,
    "model.projection_dim": 1024,
    "model.fusion_mode": "trainable",
    "model.fusion_beta": 0.3,
    "model.encoder_layers": 4,
    "model.encoder_hidden": 128,
    "model.post_hidden": 160,
    "model.post_activation": True,
    "model.encoder_dim": 160,
    "model.decoder_embed": 32,
    "model.decoder_hidden": 128,
    "model.attention_dim": 128,
    "model.attention_variant": "location",
    "model.location_channels": 8,
    "model.location_kernel": 15,
    "loss.ctc_weight": 0.3,
    "loss.count_eos": True,
    "loss.label_smoothing": 0.0,
    "decode.beam_width": 16,
    "decode.ctc_weight": 0.3,
    "decode.lm_weight": 0.5,
    "decode.max_output_length": 0,
    "decode.sweep_widths": [],
    "frontend.window": "hamming",
    "frontend.pre_emphasis": 0.0,
    "frontend.normalize": False,
    "augment.specaugment": False,
    "augment.freq_masks": 2,
    "augment.freq_width": 15,
    "augment.time_masks": 2,
    "augment.time_width": 20,
    "augment.speed_factors": [],
    "augment.noise": False,
    "augment.snr_min": 5.0,
    "augment.snr_max": 15.0,
    "augment.noise_kind": "white",
    "augment.seed": 0,
    "optim.learning_rate": 1e-3,
    "optim.batch_size": 8,
    "optim.max_steps": 800,
    "optim.clip_norm": 5.0,
    "optim.seed": 0,
    "optim.deterministic": True,
    "optim.precision": "float32",
    "optim.checkpoint_every": 500,
    "optim.log_every": 10,
    "paths.train_manifest": "",
    "paths.dev_manifest": "",
    "paths.test_manifest": "",
    "paths.out_dir": "run",
    "paths.checkpoint": "",
    "paths.lm": "",
}

_SPEED = [0.9, 1.0, 1.1]

# augmentation and decoding variants on top of the desk model
PRESETS: dict[str, dict[str, object]] = {
    "desk": {},
    "desk-content": {"model.attention_variant": "content"},
    "aug-none": {},
    "aug-specaugment": {"augment.specaugment": True},
    "aug-speed": {"augment.speed_factors": _SPEED},
    "aug-noise": {"augment.noise": True},
    "aug-speed-noise": {"augment.speed_factors": _SPEED, "augment.noise": True},
    "beam8": {"decode.beam_width": 8},
    "beam12": {"decode.beam_width": 12},
    "beam16": {"decode.beam_width": 16},
    "beam16-lm": {"decode.beam_width": 16, "decode.lm_weight": 0.5},
    "beam-sweep": {"decode.sweep_widths": [8, 12, 16]},
}

SECTIONS = ("model", "loss", "decode", "frontend", "augment", "optim", "paths")


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        )
    return False


def _coerce(default, value):
    if isinstance(default, float) and not isinstance(default, bool):
        return float(value)
    if isinstance(default, list):
        return list(value)
    return value


def _flatten(table, prefix=""):
    out = {}
    for k, v in table.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


class RunConfig:
    """Validated flat key/value configuration."""

    def __init__(self, values: dict | None = None, preset: str | None = None):
        values = dict(values or {})
        preset = preset or values.get("preset", DEFAULTS["preset"])
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; known: {', '.join(sorted(PRESETS))}")
        self.values = copy.deepcopy(DEFAULTS)
        self.values.update(copy.deepcopy(PRESETS[preset]))
        self.values["preset"] = preset
        self.update(values)

    def update(self, values: dict):
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in values.items():
            default = DEFAULTS[key]
            if not _type_ok(default, value):
                raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
            self.values[key] = _coerce(default, value)
        self.validate()
        return self

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def section(self, name: str) -> dict:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}

    # -- derived objects ----------------------------------------------------

    def model_config(self) -> ModelConfig:
        m = self.section("model")
        vocab_size = max(len(m["alphabet"]), 1)
        common = dict(
            conv1_channels=m["conv1_channels"], conv2_channels=m["conv2_channels"],
            parallel_channels_each=m["parallel_channels"],
            parallel_kernel_sizes=tuple(int(k) for k in m["parallel_kernels"]),
            pool_time_size=m["pool_time"], projection_dim=m["projection_dim"],
        )
        cfg = ModelConfig(
            vocab_size=vocab_size, extractor=m["extractor"],
            fbank=LspcConfig(input_dim=80, pool_feature_size=m["fbank_pool_feature"], **common),
            spectrogram=LspcConfig(input_dim=201, pool_feature_size=m["spec_pool_feature"], **common),
            fusion_mode=m["fusion_mode"], fusion_beta=m["fusion_beta"],
            encoder_layers=m["encoder_layers"], encoder_hidden=m["encoder_hidden"],
            post_hidden=m["post_hidden"], post_activation=m["post_activation"],
            encoder_dim=m["encoder_dim"], decoder_embed=m["decoder_embed"],
            decoder_hidden=m["decoder_hidden"], attention_dim=m["attention_dim"],
            attention_variant=m["attention_variant"], location_channels=m["location_channels"],
            location_kernel=m["location_kernel"],
        )
        cfg.validate()
        return cfg

    def beam_config(self, with_lm: bool, width: int | None = None) -> BeamConfig:
        d = self.section("decode")
        return BeamConfig(
            width=width or d["beam_width"], ctc_weight=d["ctc_weight"],
            lm_weight=d["lm_weight"] if with_lm else 0.0,
            max_output_length=d["max_output_length"] or None,
        )

    def frontend_options(self) -> FrontendOptions:
        f = self.section("frontend")
        return FrontendOptions(window=f["window"], pre_emphasis=f["pre_emphasis"],
                               normalize=f["normalize"])

    def augment_policy(self) -> AugmentPolicy | None:
        a = self.section("augment")
        spec = (SpecAugmentPolicy(a["freq_masks"], a["freq_width"], a["time_masks"], a["time_width"])
                if a["specaugment"] else None)
        noise = NoisePolicy(a["snr_min"], a["snr_max"], a["noise_kind"]) if a["noise"] else None
        if spec is None and noise is None and not a["speed_factors"]:
            return None
        return AugmentPolicy(spec, tuple(float(f) for f in a["speed_factors"]), noise, a["seed"])

    def digest(self) -> bytes:
        """SHA-256 of the canonical model section; ties checkpoints to configs."""
        blob = json.dumps(self.section("model"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).digest()

    # -- validation ---------------------------------------------------------

    def validate(self):
        v = self.values
        for key in ("loss.ctc_weight", "decode.ctc_weight"):
            if not 0.0 <= v[key] <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1]")
        if v["decode.lm_weight"] < 0:
            raise ConfigError("decode.lm_weight must be non-negative")
        if v["decode.beam_width"] < 1 or any(w < 1 for w in v["decode.sweep_widths"]):
            raise ConfigError("beam widths must be >= 1")
        if v["decode.max_output_length"] < 0:
            raise ConfigError("decode.max_output_length must be >= 0")
        if v["optim.batch_size"] < 1 or v["optim.max_steps"] < 0:
            raise ConfigError("optim.batch_size must be >= 1 and optim.max_steps >= 0")
        if not (v["optim.learning_rate"] > 0 and math.isfinite(v["optim.learning_rate"])):
            raise ConfigError("optim.learning_rate must be positive")
        if len(set(v["model.alphabet"])) != len(v["model.alphabet"]):
            raise ConfigError("model.alphabet has repeated characters")
        if v["optim.precision"] not in ("float32", "float64"):
            raise ConfigError("optim.precision must be 'float32' or 'float64'")
        if v["frontend.window"] not in ("hamming", "rectangular"):
            raise ConfigError("frontend.window must be 'hamming' or 'rectangular'")
        for f in v["augment.speed_factors"]:
            if not 0.5 <= f <= 2.0:
                raise ConfigError(f"speed factor {f} outside [0.5, 2]")
        if v["augment.snr_min"] > v["augment.snr_max"]:
            raise ConfigError("augment.snr_min exceeds augment.snr_max")

    def check_paths(self, *keys):
        """Every named, non-empty path must exist."""
        missing = [f"{k}={self.values[k]}" for k in keys
                   if self.values[k] and not Path(self.values[k]).exists()]
        if missing:
            raise ConfigError("missing paths: " + ", ".join(missing))

    # -- text form ----------------------------------------------------------

    def dumps(self) -> str:
        lines = [f"preset = {_fmt(self.values['preset'])}"]
        for sec in SECTIONS:
            lines.append("")
            for key in DEFAULTS:
                if key.startswith(sec + "."):
                    lines.append(f"{key} = {_fmt(self.values[key])}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ConfigError(f"non-finite value {value}")
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, list):
        return "[" + ", ".join(_fmt(x) for x in value) + "]"
    raise ConfigError(f"cannot serialize {value!r}")


def loads(text: str) -> RunConfig:
    try:
        table = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    return RunConfig(_flatten(table))


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)
