#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
配置常量和默认值
"""

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from src.errors import InputError, ParseError

# 评估协议 (observation / prediction ratios)
EVAL_ALPHAS = (0.2, 0.3)
EVAL_BETAS = (0.1, 0.2, 0.3, 0.5)
TRAIN_BETA = 0.5

# 分词器
DEFAULT_TOKEN_BUCKETS = 512

# 检查点格式
CHECKPOINT_MAGIC = b"ALLM"
CHECKPOINT_VERSION = 1

# 特征文件格式
FEATURE_MAGIC = b"AFV1"

# 数值精度
RUN_DTYPE = "float32"
TEST_DTYPE = "float64"
LOG_CLAMP = 1e-12

# 训练/验证划分
VALIDATION_FRACTION = 0.1

# published scale of the full system, reported but not reproduced at desk scale
REFERENCE_LEARNABLE = 4.21e6
REFERENCE_FROZEN = 7e9

CMIB_MODES = ("full", "self", "cross", "none")
QUERY_INITS = ("constant", "zero", "normal")
LOSS_TERMS = ("T", "V", "A", "D")
SWEEP_AXES = {
    "N": "num_queries",
    "d_c": "cmib_dim",
    "L_MA": "tune_dim",
}

# 日志配置
LOG_FORMAT = "%(name)s - %(message)s"


# 数据集预设
DATASET_PRESETS = {
    "breakfast": {
        "sample_rate": 6,
        "train_start_max": 0,
        "lr": 1e-4,
        "train_alphas": (0.2, 0.3, 0.5),
        "num_queries": 20,
    },
    "salads50": {
        "sample_rate": 8,
        "train_start_max": 7,
        "lr": 1e-3,
        "train_alphas": (0.1, 0.2, 0.3, 0.4, 0.5),
        "num_queries": 20,
    },
    "synthetic": {
        "sample_rate": 4,
        "train_start_max": 3,
        "lr": 1e-3,
        "train_alphas": (0.2, 0.3),
        "num_classes": 8,
        "feature_dim": 32,
        "embed_dim": 64,
        "cmib_dim": 32,
        "num_queries": 8,
        # the frozen stub sees F_M through the tuning residual, not the 4-dim bottleneck alone
        "tuning_residual": True,
        "cmib_depth": 2,
        # fixed length: duration targets are horizon fractions, so T must follow from θ₀
        "synth_min_frames": 400,
        "synth_max_frames": 400,
        "synth_feature_noise": 0.5,
    },
}


@dataclass
class ModelConfig:
    """Every dimension, count, seed and rate that instantiates one model."""

    num_classes: int = 48
    feature_dim: int = 2048
    embed_dim: int = 64
    adapter_dim: int = 0  # 0 -> embed_dim // 2
    cmib_dim: int = 128
    cmib_heads: int = 4
    cmib_depth: int = 1
    cmib_ffn_mult: int = 2
    cmib_mode: str = "full"
    tune_dim: int = 4
    tune_kernel: int = 1
    tune_dropout: float = 0.1
    tuning_residual: bool = False
    num_queries: int = 20
    query_init: str = "constant"
    query_const: float = 0.5
    stub_depth: int = 2
    stub_heads: int = 4
    stub_ffn_mult: int = 2
    stub_seed: int = 1234
    token_buckets: int = DEFAULT_TOKEN_BUCKETS
    rms_eps: float = 1e-6
    shared_projections: bool = False
    shared_past_head: bool = False
    use_text: bool = True
    init_seed: int = 0

    @property
    def hidden_adapter_dim(self):
        return self.adapter_dim or max(1, self.embed_dim // 2)

    def validate(self):
        if self.cmib_dim % self.cmib_heads:
            raise InputError(f"cmib_dim {self.cmib_dim} not divisible by cmib_heads {self.cmib_heads}")
        if self.stub_depth and self.embed_dim % self.stub_heads:
            raise InputError(f"embed_dim {self.embed_dim} not divisible by stub_heads {self.stub_heads}")
        if self.cmib_depth < 1:
            raise InputError("cmib_depth must be >= 1")
        if self.cmib_mode not in CMIB_MODES:
            raise InputError(f"unknown cmib_mode {self.cmib_mode!r}, expected one of {CMIB_MODES}")
        if self.query_init not in QUERY_INITS:
            raise InputError(f"unknown query_init {self.query_init!r}, expected one of {QUERY_INITS}")
        if self.tune_kernel < 1 or self.tune_kernel % 2 == 0:
            raise InputError("tune_kernel must be a positive odd number")
        if not 0.0 <= self.tune_dropout <= 1.0:
            raise InputError("tune_dropout must lie in [0, 1]")
        for name in ("num_classes", "feature_dim", "embed_dim", "cmib_dim", "tune_dim", "num_queries", "token_buckets"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        return self

    def to_text(self):
        return _dump_fields(self)

    @classmethod
    def from_values(cls, values, source=None):
        config = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        for key, value in values.items():
            if key not in known:
                raise ParseError(f"unknown model key {key!r}", path=source)
            setattr(config, key, _coerce(value, getattr(config, key), key, source))
        return config

    def fingerprint(self):
        """SHA-256 prefix over the sorted architectural key=value block."""
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


@dataclass
class RunConfig:
    """A model configuration plus everything one run needs around it."""

    model: ModelConfig = field(default_factory=ModelConfig)
    preset: str = "synthetic"
    data_root: str = "data/synthetic"
    train_split: str = "train"
    eval_split: str = "test"
    output_dir: str = "runs"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 1
    sample_rate: int = 4
    train_start_max: int = 0
    eval_start: int = 0
    train_alphas: tuple = (0.2, 0.3)
    train_beta: float = TRAIN_BETA
    eval_alphas: tuple = EVAL_ALPHAS
    eval_betas: tuple = EVAL_BETAS
    noise_p: float = 0.2
    use_predicted: bool = False
    loss_mean: bool = False
    loss_terms: str = "T,V,A,D"
    val_fraction: float = VALIDATION_FRACTION
    seed: int = 0
    freeze_audit: bool = False
    backend: str = "serial"
    workers: int = 0
    synth_train_videos: int = 60
    synth_test_videos: int = 20
    synth_min_frames: int = 400
    synth_max_frames: int = 400
    synth_feature_noise: float = 0.5
    synth_partial_start: bool = False

    @classmethod
    def from_preset(cls, name):
        if name not in DATASET_PRESETS:
            raise InputError(f"unknown preset {name!r}, expected one of {sorted(DATASET_PRESETS)}")
        config = cls(preset=name)
        config.update(DATASET_PRESETS[name])
        if name != "synthetic":
            config.data_root = f"data/{name}"
        return config

    @classmethod
    def from_file(cls, path, preset=None):
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise InputError(f"cannot read config file {path}: {e}") from e
        values = parse_key_values(text, path)
        config = cls.from_preset(preset or values.get("preset", "synthetic"))
        config.update(values, source=path)
        return config

    def update(self, values, source=None):
        """Set fields by flat key; model fields and run fields share one namespace."""
        model_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
        run_fields = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "model"}
        for key, value in values.items():
            if key in model_fields:
                target = self.model
            elif key in run_fields:
                target = self
            else:
                raise ParseError(f"unknown config key {key!r}", path=source)
            current = getattr(target, key)
            setattr(target, key, _coerce(value, current, key, source))
        return self

    @property
    def loss_term_set(self):
        terms = {t.strip() for t in self.loss_terms.split(",") if t.strip()}
        unknown = terms - set(LOSS_TERMS)
        if unknown:
            raise InputError(f"unknown loss terms {sorted(unknown)}, expected a subset of {LOSS_TERMS}")
        return frozenset(terms)

    def validate(self):
        self.model.validate()
        self.loss_term_set
        if self.sample_rate < 1:
            raise InputError("sample_rate must be >= 1")
        if not 0 <= self.train_start_max < self.sample_rate:
            raise InputError("train_start_max must lie in [0, sample_rate)")
        if not 0.0 <= self.noise_p <= 1.0:
            raise InputError("noise_p must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise InputError("epochs must be >= 0 and batch_size >= 1")
        for alpha in self.train_alphas:
            if alpha + self.train_beta > 1.0 + 1e-9:
                raise InputError(f"train alpha {alpha} + beta {self.train_beta} exceeds 1")
        return self

    def to_text(self):
        run_part = _dump_fields(self, skip=("model",))
        return self.model.to_text() + run_part

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")


def parse_key_values(text, source=None):
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {raw!r}", path=source, line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParseError("empty key", path=source, line=lineno)
        values[key] = value
    return values


def _dump_fields(obj, skip=()):
    lines = []
    for f in sorted(dataclasses.fields(obj), key=lambda f: f.name):
        if f.name in skip:
            continue
        value = getattr(obj, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, (tuple, list)):
            value = ",".join(repr(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name}={value}\n")
    return "".join(lines)


def _coerce(value, current, key, source):
    if not isinstance(value, str):
        if isinstance(current, tuple):
            return tuple(float(v) for v in value)
        return type(current)(value)
    try:
        if isinstance(current, bool):
            lowered = value.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return lowered in ("true", "1", "yes")
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            return tuple(float(v) for v in value.split(",") if v.strip())
        return value
    except ValueError as e:
        raise ParseError(f"bad value {value!r} for {key}", path=source) from e
