import functools
import logging

import click
from pydantic import ValidationError

from config import format_validation_error
from errors import ConfigError, ToolkitError

logger = logging.getLogger(__name__)


def _guard(name: str, callback):
    @functools.wraps(callback)
    def wrapper(*args, **kwargs):
        try:
            return callback(*args, **kwargs)
        except ToolkitError as exc:
            # Log the exception details for internal diagnostics.
            logger.error("%s failed: %s", name, exc.detail, exc_info=True)
            click.echo(f"Error: {exc.detail}", err=True)
            raise click.exceptions.Exit(exc.exit_code)
        except ValidationError as exc:
            detail = format_validation_error(exc)
            logger.error("%s failed on invalid input: %s", name, detail, exc_info=True)
            click.echo(f"Error: {detail}", err=True)
            raise click.exceptions.Exit(ConfigError.exit_code)
    return wrapper


def register_global_exception_handlers(group: click.Group):
    """Map toolkit errors raised by any command onto its exit status."""
    for name, command in group.commands.items():
        if command.callback is not None:
            command.callback = _guard(name, command.callback)
