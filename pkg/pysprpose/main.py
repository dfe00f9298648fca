import logging
import sys

from .SprBaseHandler import default_log_level
from .SprCommandHandler import SprCommandHandler

"""
Main entry point of the spr-pose command line.

    spr-pose [-v] <command> [flags]

The log level comes from SPR_POSE_LOG_LEVEL (WARNING when unset); -v raises
it to INFO and -vv to DEBUG.
"""

logger = logging.getLogger(__name__)


def _log_level(argv):
    verbosity = 0
    rest = []
    for arg in argv:
        if arg in ("-v", "--verbose"):
            verbosity += 1
        elif arg == "-vv":
            verbosity += 2
        else:
            rest.append(arg)
    if verbosity >= 2:
        return logging.DEBUG, rest
    if verbosity == 1:
        return logging.INFO, rest
    return default_log_level(), rest


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    level, argv = _log_level(argv)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger("pysprpose").setLevel(level)
    logger.debug("Executing spr-pose with %s", argv)

    handler = SprCommandHandler()
    return handler.process_request(argv)
