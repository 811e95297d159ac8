#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
ActionLLM包初始化文件
"""

import logging

from rich.logging import RichHandler

from .config import LOG_FORMAT, ModelConfig, RunConfig
from .errors import ActionLLMError, InputError, IntegrityError, NumericError


def setup_logging(level="INFO"):
    """安装rich日志处理器 (called once by the CLI)"""
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=LOG_FORMAT,
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_path=False)],
        force=True,
    )


__all__ = [
    'ActionLLMError', 'InputError', 'IntegrityError', 'NumericError',
    'ModelConfig', 'RunConfig', 'setup_logging',
]
