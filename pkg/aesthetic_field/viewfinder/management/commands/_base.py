"""
Shared behaviour of the pipeline commands: the global --seed / --threads
flags and the mapping from pipeline errors to process exit codes.
"""

import argparse
import logging
import math

from django.conf import settings
from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from viewfinder.exceptions import (DivergenceError, DomainError, FormatError, NoViableViewpointError,
                                   UndefinedCorrelationError)

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_MALFORMED = 4
EXIT_DIVERGENCE = 5
EXIT_NO_VIEWPOINT = 6
EXIT_UNDEFINED_METRIC = 7


def at_least(minimum, kind=int):
    """argparse type for finite values of `kind` >= minimum; anything else is a usage error"""
    def parse(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} value: '{text}'")
        if not math.isfinite(value) or value < minimum:
            raise argparse.ArgumentTypeError(f"must be >= {minimum}, got {text}")
        return value

    parse.__name__ = kind.__name__
    return parse


def positive(text):
    """argparse type for finite floats > 0"""
    value = at_least(0.0, float)(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


class PipelineCommand(BaseCommand):
    """Base class; subclasses implement add_command_arguments() and run()"""

    requires_system_checks = []

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        if not parser.called_from_command_line:
            def error(message):
                raise CommandError(f"Error: {message}", returncode=EXIT_USAGE)

            parser.error = error
        return parser

    def add_arguments(self, parser):
        parser.add_argument('--seed', type=at_least(0), required=True, help='Seed for every random choice (>= 0)')
        parser.add_argument('--threads', type=at_least(1), default=settings.AESFIELD_THREADS,
                            help='Worker threads (outputs do not depend on it)')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def run(self, **options):
        raise NotImplementedError

    def handle(self, *args, **options):
        if options['threads'] < 1:
            raise CommandError("--threads must be >= 1", returncode=EXIT_USAGE)
        if options['seed'] < 0:
            raise CommandError("--seed must be >= 0", returncode=EXIT_USAGE)
        try:
            return self.run(**options)
        except CommandError:
            raise
        except DivergenceError as e:
            raise CommandError(str(e), returncode=EXIT_DIVERGENCE)
        except NoViableViewpointError as e:
            raise CommandError(str(e), returncode=EXIT_NO_VIEWPOINT)
        except UndefinedCorrelationError as e:
            raise CommandError(f"Undefined correlation: {e}", returncode=EXIT_UNDEFINED_METRIC)
        except ValidationError as e:
            raise CommandError(' '.join(e.messages), returncode=EXIT_MALFORMED)
        except (FormatError, DomainError) as e:
            raise CommandError(str(e), returncode=EXIT_MALFORMED)
        except OSError as e:
            raise CommandError(f"I/O error: {e}", returncode=EXIT_IO)
        except ValueError as e:
            raise CommandError(str(e), returncode=EXIT_MALFORMED)
