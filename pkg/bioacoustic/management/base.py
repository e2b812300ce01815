import argparse
import logging
import os

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError, DjangoHelpFormatter

from bioacoustic.config import config_help, load_run_config, parse_overrides
from bioacoustic.exceptions import ConfigError, DataError

logger = logging.getLogger('bioacoustic.commands')

EXIT_CONFIG = 1
EXIT_DATA = 2


class HelpFormatter(DjangoHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


class PipelineCommand(BaseCommand):
    """Base for the pipeline commands: config flags, help listing every config key, exit codes.

    Subclasses implement ``run(config, **options)``. ConfigError exits with
    code 1 and DataError with code 2.
    """

    def create_parser(self, prog_name, subcommand, **kwargs):
        kwargs.setdefault('formatter_class', HelpFormatter)
        kwargs.setdefault('epilog', config_help())
        return super().create_parser(prog_name, subcommand, **kwargs)

    def add_arguments(self, parser):
        parser.add_argument(
            '--config',
            type=str,
            default=None,
            help='Config file of "key = value" lines (default: $FSBED_CONFIG_FILE)',
        )
        parser.add_argument(
            '--set',
            action='append',
            default=[],
            metavar='KEY=VALUE',
            help='Override one config key; may be repeated',
        )
        parser.add_argument('--seed', type=int, default=None, help='Root seed (config key "seed")')
        parser.add_argument('--jobs', type=int, default=None, help='Files processed in parallel (config key "jobs")')

    def load_config(self, options):
        overrides = parse_overrides(options.get('set'))
        for key in ('seed', 'jobs'):
            if options.get(key) is not None:
                overrides[key] = options[key]
        return load_run_config(
            options.get('config') or settings.FSBED_CONFIG_FILE,
            overrides,
            environ=os.environ,
            prefix=settings.FSBED_ENV_PREFIX,
        )

    def handle(self, *args, **options):
        try:
            config = self.load_config(options)
            # The --config path is consumed by load_config; it must not clash with run()'s ``config``.
            run_options = {k: v for k, v in options.items() if k != 'config'}
            return self.run(config, **run_options)
        except ConfigError as exc:
            logger.error('%s', exc)
            raise CommandError(str(exc), returncode=EXIT_CONFIG) from exc
        except (DataError, OSError) as exc:
            logger.error('%s', exc)
            raise CommandError(str(exc), returncode=EXIT_DATA) from exc

    def run(self, config, **options):
        raise NotImplementedError
