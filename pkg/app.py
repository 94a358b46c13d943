import logging

import click

# Commands Import
from commands.run import run_command
from commands.ablate import ablate_command
from commands.sweep import sweep_command
from commands.gradcheck import gradcheck_command
from commands.global_exception_handler import register_global_exception_handlers

# Environment-backed settings (.env is loaded on import)
from config import log_level, output_root
from run_store import TOOLKIT_VERSION

# Configure logging
logging.basicConfig(
    level=log_level(),
    format="%(asctime)s [%(levelname)s] %(message)s",
    datefmt='%Y-%m-%d %H:%M:%S'
)
logger = logging.getLogger(__name__)


@click.group()
@click.version_option(TOOLKIT_VERSION, prog_name="ega")
def cli():
    """Embedding graph alignment distillation experiments."""
    logger.debug("Output root: %s", output_root())


# Include commands
cli.add_command(run_command)
cli.add_command(ablate_command)
cli.add_command(sweep_command)
cli.add_command(gradcheck_command)

# Register the global exception handlers
register_global_exception_handlers(cli)

if __name__ == "__main__":
    cli()
