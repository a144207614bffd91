import functools
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone


def setup_logger(name=None):
    """
    Configure a structured JSON logger.

    Records go to stderr so that stdout stays reserved for the
    machine-readable result documents printed by the CLI.

    Args:
        name (str): Logger name (optional)

    Returns:
        logging.Logger: Configured logger
    """
    if name is None:
        name = __name__

    logger = logging.getLogger(name)

    # One handler per logger name
    if logger.handlers:
        return logger

    log_level = os.getenv('LOG_LEVEL', 'INFO').upper()

    level_mapping = {
        'DEBUG': logging.DEBUG,
        'INFO': logging.INFO,
        'WARNING': logging.WARNING,
        'ERROR': logging.ERROR,
        'CRITICAL': logging.CRITICAL
    }

    logger.setLevel(level_mapping.get(log_level, logging.INFO))

    handler = logging.StreamHandler(sys.stderr)
    handler.setLevel(logger.level)
    handler.setFormatter(StructuredFormatter())
    logger.addHandler(handler)

    logger.propagate = False

    return logger


class StructuredFormatter(logging.Formatter):
    """
    Render each log record as a single JSON object.
    """

    def format(self, record):
        log_entry = {
            'timestamp': datetime.now(timezone.utc).isoformat().replace('+00:00', 'Z'),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'module': record.module,
            'function': record.funcName,
            'line': record.lineno
        }

        self._add_run_context(log_entry)

        if record.exc_info:
            log_entry['exception'] = {
                'type': record.exc_info[0].__name__ if record.exc_info[0] else None,
                'message': str(record.exc_info[1]) if record.exc_info[1] else None,
                'traceback': self.formatException(record.exc_info)
            }

        if record.stack_info:
            log_entry['stack_info'] = record.stack_info

        self._add_custom_fields(log_entry, record)

        try:
            return json.dumps(log_entry, ensure_ascii=False, default=str)
        except (TypeError, ValueError) as e:
            fallback_entry = {
                'timestamp': datetime.now(timezone.utc).isoformat().replace('+00:00', 'Z'),
                'level': 'ERROR',
                'message': f'Failed to serialize log record: {str(e)}',
                'original_message': str(record.getMessage())
            }
            return json.dumps(fallback_entry, ensure_ascii=False)

    def _add_run_context(self, log_entry):
        """
        Attach the pipeline run identity when the CLI has exported it.

        Args:
            log_entry (dict): Entry being built
        """
        run_vars = {
            'run_id': os.getenv('URBANPULSE_RUN_ID'),
            'threads': os.getenv('URBANPULSE_THREADS'),
        }

        run_context = {k: v for k, v in run_vars.items() if v}

        if run_context:
            log_entry['run'] = run_context

    def _add_custom_fields(self, log_entry, record):
        """
        Copy the `extra=` fields of a record into a `custom` block.

        Args:
            log_entry (dict): Entry being built
            record (logging.LogRecord): Original record
        """
        standard_fields = {
            'name', 'msg', 'args', 'levelname', 'levelno', 'pathname',
            'filename', 'module', 'lineno', 'funcName', 'created',
            'msecs', 'relativeCreated', 'thread', 'threadName',
            'processName', 'process', 'getMessage', 'exc_info',
            'exc_text', 'stack_info', 'taskName'
        }

        custom_fields = {}
        for key, value in record.__dict__.items():
            if key not in standard_fields and not key.startswith('_'):
                custom_fields[key] = value

        if custom_fields:
            log_entry['custom'] = custom_fields


class ContextLogger(logging.LoggerAdapter):
    """
    Adapter that merges a mutable context (stage, method, fingerprint) into
    the ``extra`` fields of every record.
    """

    def __init__(self, logger, context=None):
        super().__init__(logger, dict(context or {}))

    @property
    def context(self):
        return self.extra

    def process(self, msg, kwargs):
        kwargs['extra'] = {**(kwargs.get('extra') or {}), **self.extra}
        return msg, kwargs

    def add_context(self, **kwargs):
        self.extra.update(kwargs)

    def remove_context(self, *keys):
        for key in keys:
            self.extra.pop(key, None)


def get_logger_with_context(name=None, **context):
    """
    Build a ContextLogger on top of a structured logger.

    Args:
        name (str): Logger name
        **context: Initial context

    Returns:
        ContextLogger: Logger carrying the context
    """
    return ContextLogger(setup_logger(name), context)


def log_function_call(func):
    """
    Log entry, success and failure of the decorated function.
    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        logger = setup_logger(func.__module__)

        logger.info(f"Calling {func.__name__}", extra={
            'target': func.__name__,
            'args_count': len(args),
            'kwargs_keys': list(kwargs.keys())
        })

        try:
            result = func(*args, **kwargs)

            logger.info(f"{func.__name__} finished", extra={
                'target': func.__name__,
                'success': True
            })

            return result

        except Exception as e:
            logger.error(f"{func.__name__} failed: {str(e)}", extra={
                'target': func.__name__,
                'success': False,
                'error_type': type(e).__name__
            }, exc_info=True)
            raise

    return wrapper


def log_execution_time(func):
    """
    Log the wall-clock duration of the decorated function.
    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        logger = setup_logger(func.__module__)

        start_time = time.perf_counter()

        try:
            result = func(*args, **kwargs)
            execution_time = (time.perf_counter() - start_time) * 1000

            logger.info(f"{func.__name__} completed", extra={
                'target': func.__name__,
                'execution_time_ms': round(execution_time, 2),
                'success': True
            })

            return result

        except Exception as e:
            execution_time = (time.perf_counter() - start_time) * 1000

            logger.error(f"{func.__name__} failed", extra={
                'target': func.__name__,
                'execution_time_ms': round(execution_time, 2),
                'success': False,
                'error_type': type(e).__name__
            })

            raise

    return wrapper
