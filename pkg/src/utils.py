#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
工具函数模块
"""

import itertools
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, ModelConfig, parse_key_values
from src.errors import InputError, IntegrityError, ParseError

logger = logging.getLogger(__name__)

_U32 = struct.Struct("<I")
_SHAPE = struct.Struct("<II")


def format_count(count):
    """
    格式化参数数量显示

    Args:
        count: 参数个数

    Returns:
        格式化的字符串
    """
    if count < 1000:
        return f"{count:.0f}"
    elif count < 1000000:
        return f"{count/1000:.2f}K"
    elif count < 1000000000:
        return f"{count/1000000:.2f}M"
    else:
        return f"{count/1000000000:.2f}B"


def format_seconds(seconds):
    if seconds < 60:
        return f"{seconds:.1f}s"
    minutes, seconds = divmod(seconds, 60)
    return f"{int(minutes)}m{seconds:04.1f}s"


def chunks(iterable, size):
    """
    将可迭代对象分割为指定大小的块

    Args:
        iterable: 可迭代对象
        size: 块大小

    Returns:
        生成器，每次生成一个块
    """
    it = iter(iterable)
    while True:
        chunk = list(itertools.islice(it, size))
        if not chunk:
            break
        yield chunk


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    class_names: list
    params: OrderedDict

    @property
    def fingerprint(self):
        return self.config.fingerprint()


def _config_block(model):
    return model.config.to_text() + "class_names=" + "|".join(model.vocab.names) + "\n"


def save_checkpoint(path, model):
    """
    保存检查点

    Layout: magic "ALLM", u32 version, u32 config length, config block
    (key=value text), u32 param count, then per Param: u32 name length,
    name, u32 rows, u32 cols, float32 row-major data.

    Args:
        path: 检查点文件路径
        model: ActionLLM
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    block = _config_block(model).encode("utf-8")
    params = model.named_params()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(_U32.pack(CHECKPOINT_VERSION))
        f.write(_U32.pack(len(block)))
        f.write(block)
        f.write(_U32.pack(len(params)))
        for name, p in params.items():
            raw = name.encode("utf-8")
            f.write(_U32.pack(len(raw)))
            f.write(raw)
            f.write(_SHAPE.pack(*p.value.shape))
            f.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    logger.info("checkpoint written to %s (%d params, config %s)", path, len(params), model.config.fingerprint())
    return path


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise IntegrityError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return _U32.unpack(self.take(4))[0]


def load_checkpoint(path, expected_fingerprint=None):
    """
    加载检查点

    Args:
        path: 检查点文件路径
        expected_fingerprint: refuse the file unless its config matches

    Returns:
        Checkpoint
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise InputError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(blob, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version}")
    try:
        values = parse_key_values(r.take(r.u32()).decode("utf-8"), path)
        names = values.pop("class_names").split("|")
        config = ModelConfig.from_values(values, source=path)
    except (UnicodeDecodeError, KeyError, ParseError) as e:
        raise IntegrityError(f"{path}: corrupt config block ({e})") from e

    if expected_fingerprint is not None and config.fingerprint() != expected_fingerprint:
        raise IntegrityError(
            f"config mismatch: checkpoint {config.fingerprint()} vs requested {expected_fingerprint}"
        )

    params = OrderedDict()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        rows, cols = _SHAPE.unpack(r.take(_SHAPE.size))
        data = np.frombuffer(r.take(4 * rows * cols), dtype="<f4").reshape(rows, cols)
        params[name] = data
    if r.pos != len(blob):
        raise IntegrityError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return Checkpoint(config, names, params)


def restore_model(checkpoint, token_buckets=None):
    """Rebuild an ActionLLM from a Checkpoint; every Param must match by name and shape."""
    from src.adapters import Vocabulary
    from src.backbone import ActionLLM

    vocab = Vocabulary(checkpoint.class_names, token_buckets or checkpoint.config.token_buckets)
    model = ActionLLM(checkpoint.config, vocab)
    own = model.named_params()
    if list(own) != list(checkpoint.params):
        missing = sorted(set(own) ^ set(checkpoint.params))
        raise IntegrityError(f"checkpoint params do not match the model: {missing[:5]}")
    for name, p in own.items():
        data = checkpoint.params[name]
        if data.shape != p.value.shape:
            raise IntegrityError(f"param {name}: checkpoint shape {data.shape} vs model {p.value.shape}")
        p.value[...] = data
    return model
