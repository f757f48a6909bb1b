"""
Structured logging configuration for the FVIN toolkit

Numeric modules log through stdlib loggers named after their module ("core.*", "services.*"); the CLI and
services emit structlog events whose run context (command, system, variant, seed) is bound per command.
"""
import logging
import logging.config
from pathlib import Path
from typing import Any, Dict, Optional

import structlog
import yaml

from core.settings import get_settings

# Logger trees whose level follows FVIN_LOG_LEVEL
PROJECT_LOGGERS = ("core", "services", "fvin")

_FALLBACK_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


def _resolve_level(name: str) -> int:
    level = logging.getLevelName(name.upper())
    return level if isinstance(level, int) else logging.INFO


def load_logging_config() -> Optional[Dict[str, Any]]:
    """Read the dictConfig YAML; None when the file is missing"""
    config_path = Path(get_settings().log_config_path)
    if not config_path.is_absolute() and not config_path.exists():
        config_path = Path(__file__).resolve().parent.parent / config_path
    if not config_path.exists():
        return None
    with open(config_path, "r") as f:
        return yaml.safe_load(f)


def setup_structlog(level: int, json_output: bool):
    """Route structlog events through stdlib handlers; JSON lines in production, console otherwise"""
    callsite = structlog.processors.CallsiteParameterAdder(
        parameters=[
            structlog.processors.CallsiteParameter.MODULE,
            structlog.processors.CallsiteParameter.LINENO,
        ]
    )
    processors = [
        structlog.contextvars.merge_contextvars,
        structlog.processors.add_log_level,
        structlog.stdlib.add_logger_name,
        structlog.processors.TimeStamper(fmt="iso", utc=True),
        structlog.processors.StackInfoRenderer(),
        structlog.processors.format_exc_info,
    ]
    if json_output:
        processors += [structlog.processors.dict_tracebacks, structlog.processors.JSONRenderer(sort_keys=True)]
    else:
        processors += [callsite, structlog.dev.ConsoleRenderer(colors=False)]

    structlog.configure(
        processors=processors,
        wrapper_class=structlog.make_filtering_bound_logger(level),
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=True,
    )


def setup_logging():
    """
    Apply the YAML handlers, override project logger levels from settings and configure structlog

    Safe to call once per CLI invocation; a broken YAML file degrades to basicConfig on stderr.
    """
    cfg = get_settings()
    level = _resolve_level(cfg.log_level)
    try:
        config = load_logging_config()
        if config is None:
            logging.basicConfig(level=level, format=_FALLBACK_FORMAT)
        else:
            logging.config.dictConfig(config)
    except (OSError, ValueError, yaml.YAMLError) as e:
        logging.basicConfig(level=level, format=_FALLBACK_FORMAT)
        logging.getLogger("fvin.setup").warning(f"Unusable logging config ({e}); using basicConfig")

    for name in PROJECT_LOGGERS:
        logging.getLogger(name).setLevel(level)

    setup_structlog(level, json_output=cfg.is_production)
    logger = structlog.get_logger("fvin.setup")
    logger.debug("Logging configured", level=logging.getLevelName(level), json=cfg.is_production)
    return logger


def get_logger(name: Optional[str] = None) -> structlog.BoundLogger:
    """structlog logger; names under "fvin." share the CLI handler"""
    return structlog.get_logger(name or "fvin")


def bind_run_context(command: Optional[str] = None, system: Optional[str] = None,
                     variant: Optional[str] = None, seed: Optional[int] = None, **extra):
    """Attach run identifiers to every structlog event until clear_run_context()"""
    context = {"command": command, "system": system, "variant": variant, "seed": seed, **extra}
    structlog.contextvars.bind_contextvars(**{k: v for k, v in context.items() if v is not None})


def clear_run_context():
    structlog.contextvars.clear_contextvars()
