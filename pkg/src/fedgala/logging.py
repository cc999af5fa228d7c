from __future__ import annotations

import logging

_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# torch 只在测试里作为 autograd 对照加载
_NOISY_LOGGERS = ("torch", "matplotlib", "numba")


def setup_logging(level: int = logging.INFO) -> logging.Logger:
    logger = logging.getLogger()
    logger.setLevel(level)

    for name in _NOISY_LOGGERS:
        logging.getLogger(name).setLevel(max(level, logging.INFO))

    # 重复调用 (例如测试里多次跑 cli_main) 时不要叠加 handler
    for handler in logger.handlers:
        if getattr(handler, "_fedgala", False):
            handler.setLevel(level)
            return logger

    formatter = logging.Formatter(_FORMAT)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    console_handler._fedgala = True  # type: ignore[attr-defined]
    logger.addHandler(console_handler)

    return logger
