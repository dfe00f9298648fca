import abc
import argparse
import json
import logging
import os
import sys

from .encoder import TAU_RADIUS, TAU_SQUARED
from .errors import UsageError
from .tensorio import atomic_write_text

PROG = "spr-pose"
THREADS_ENV = "SPR_POSE_THREADS"
LOG_LEVEL_ENV = "SPR_POSE_LOG_LEVEL"

MODES = ("vanilla", "hier", "hierarchical")


def default_workers():
    """Worker count from SPR_POSE_THREADS, 1 when unset."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise UsageError("{0} must be an integer, got '{1}'".format(THREADS_ENV, raw))
    if value < 1:
        raise UsageError("{0} must be >= 1, got {1}".format(THREADS_ENV, value))
    return value


def default_log_level():
    name = os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.WARNING


class _Parser(argparse.ArgumentParser):

    def error(self, message):
        raise UsageError(message)


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers, got '{0}'".format(text))


def _resolutions(text):
    try:
        return tuple(tuple(int(v) for v in item.split("x")) for item in text.split(",") if item)
    except ValueError:
        raise argparse.ArgumentTypeError("expected HxW[,HxW...], got '{0}'".format(text))


class SprBaseHandler(object, metaclass=abc.ABCMeta):
    """
    Base class of the spr-pose command line.  Concrete implementations
    provide one on_ hook per command; process_request parses the arguments,
    dispatches and turns failures into on_processing_error responses.
    """

    def __init__(self, workers=None, out=None, err=None):
        # level comes from the pysprpose package logger configured in main
        self.logger = logging.getLogger(__name__)
        self._workers = workers
        self.out = out if out is not None else sys.stdout
        self.err = err if err is not None else sys.stderr
        self.parser = self._build_parser()

    @property
    def workers(self):
        return self._workers if self._workers is not None else default_workers()

    @abc.abstractmethod
    def on_encode(self, args):
        """
        Encode a pose dataset into confidence and displacement map files.
        :return: exit code
        """
        pass

    @abc.abstractmethod
    def on_decode(self, args):
        """
        Decode map files written by encode into a predictions dataset.
        :return: exit code
        """
        pass

    @abc.abstractmethod
    def on_roundtrip(self, args):
        pass

    @abc.abstractmethod
    def on_tau_sweep(self, args):
        pass

    @abc.abstractmethod
    def on_train_toy(self, args):
        pass

    @abc.abstractmethod
    def on_eval(self, args):
        pass

    @abc.abstractmethod
    def on_bench(self, args):
        pass

    @abc.abstractmethod
    def on_scaling(self, args):
        pass

    @abc.abstractmethod
    def on_synth(self, args):
        pass

    @abc.abstractmethod
    def on_compare_modes(self, args):
        pass

    @abc.abstractmethod
    def on_processing_error(self, argv, exc):
        """
        Called when parsing or a command fails, giving the concrete handler
        the chance to report the error.
        :param exc: exception instance
        :return: exit code
        """
        pass

    def process_request(self, argv):
        """
        Parse argv and dispatch to the matching on_ hook.
        :param argv: argument list without the program name
        :return: process exit code
        """
        try:
            try:
                args = self.parser.parse_args(list(argv))
            except SystemExit as done:
                # --help and --version
                return done.code or 0
            if args.command is None:
                raise UsageError("a command is required, see --help")
            hook = getattr(self, "on_" + args.command.replace("-", "_"))
            self.logger.debug("Dispatching %s", args.command)
            response = hook(args)
        except Exception as exc:
            self.logger.error("%s failed: %s", argv[0] if argv else PROG, exc)
            response = self.on_processing_error(argv, exc)
        return response

    # --------------- Helpers that build reports ----------------------
    def _build_report(self, command, **fields):
        """
        Internal helper assembling a command report
        :return: dict with the command name first
        """
        report = {"command": command}
        report.update(fields)
        return report

    def _emit(self, report, path=None):
        """Write a report as JSON to path, or to stdout when path is None or '-'."""
        text = json.dumps(report, indent=1, sort_keys=True)
        if path is None or path == "-":
            self.out.write(text + "\n")
        else:
            atomic_write_text(path, text + "\n")
            self.logger.info("Wrote %s", path)

    def _say(self, text):
        self.out.write(text + "\n")

    def _build_parser(self):
        parser = _Parser(prog=PROG, description="Structured pose representation codec, decoder, "
                                                "toy trainer and evaluation toolkit.")
        sub = parser.add_subparsers(dest="command", parser_class=_Parser)

        p = sub.add_parser("encode", help="encode a pose dataset into map tensor files")
        p.add_argument("--dataset", required=True, help="pose dataset JSON file")
        p.add_argument("--mode", choices=MODES, default="vanilla")
        self._encoder_flags(p)
        p.add_argument("--out", required=True, help="output directory")

        p = sub.add_parser("decode", help="decode map tensor files into predictions")
        p.add_argument("--maps", required=True, help="directory written by encode")
        p.add_argument("--mode", choices=MODES, default="vanilla")
        self._nms_flags(p)
        p.add_argument("--out", required=True, help="predictions dataset JSON file")

        p = sub.add_parser("roundtrip", help="encode and decode synthetic scenes, report recovery")
        p.add_argument("--synth-seed", type=int, default=7)
        p.add_argument("--n", type=int, default=50, help="number of scenes")
        p.add_argument("--mode", choices=MODES, default="vanilla")
        p.add_argument("--max-persons", type=int, default=10)
        p.add_argument("--image-size", type=int, default=160)
        p.add_argument("--skeleton", default="toy6")
        self._encoder_flags(p)
        self._nms_flags(p)
        p.add_argument("--report", default=None, help="JSON report file (stdout when omitted)")

        p = sub.add_parser("tau-sweep", help="mAP and overlap statistics over a range of tau")
        p.add_argument("--from", dest="tau_from", type=float, default=1.0)
        p.add_argument("--to", dest="tau_to", type=float, default=20.0)
        p.add_argument("--step", type=float, default=1.0)
        p.add_argument("--tau-mode", choices=(TAU_SQUARED, TAU_RADIUS), default=TAU_RADIUS)
        p.add_argument("--synth-seed", type=int, default=3)
        p.add_argument("--n", type=int, default=20, help="number of scenes")
        p.add_argument("--overlap", type=float, default=0.5)
        p.add_argument("--mode", choices=MODES, default="vanilla")
        p.add_argument("--sigma", type=float, default=7.0)
        p.add_argument("--report", default=None)

        p = sub.add_parser("train-toy", help="train the toy regressor on rendered synthetic scenes")
        p.add_argument("--synth-seed", type=int, default=0)
        p.add_argument("--scenes", type=int, default=5)
        p.add_argument("--size", type=int, default=64)
        p.add_argument("--max-persons", type=int, default=2)
        p.add_argument("--epochs", type=int, default=500)
        p.add_argument("--lr", type=float, default=0.003)
        p.add_argument("--milestones", type=_int_list, default=())
        p.add_argument("--stages", type=int, default=2)
        p.add_argument("--beta", type=float, default=0.01)
        p.add_argument("--mode", choices=MODES, default="vanilla")
        p.add_argument("--seed", type=int, default=0, help="weight initialization and shuffling seed")
        p.add_argument("--progress", action="store_true")
        p.add_argument("--out", required=True, help="checkpoint file")
        p.add_argument("--history", default=None, help="loss history file (default: <out>.loss.tsv)")

        p = sub.add_parser("eval", help="score predictions against ground truth")
        p.add_argument("--pred", required=True)
        p.add_argument("--gt", required=True)
        p.add_argument("--metric", choices=("map", "pck3d"), default="map")
        p.add_argument("--alpha", type=float, default=0.5)
        p.add_argument("--radius", type=float, default=150.0)
        p.add_argument("--report", default=None)

        p = sub.add_parser("bench", help="time the decoder on synthetic maps")
        p.add_argument("--height", type=int, default=96)
        p.add_argument("--width", type=int, default=96)
        p.add_argument("--k", type=int, default=16)
        p.add_argument("--n", type=int, default=8)
        p.add_argument("--reps", type=int, default=100)
        p.add_argument("--mode", choices=MODES, default="vanilla")
        p.add_argument("--seed", type=int, default=0)

        p = sub.add_parser("scaling", help="decode latency scaling study")
        p.add_argument("--persons", type=_int_list, default=(1, 2, 4, 8, 16))
        p.add_argument("--joints", type=_int_list, default=(8, 16))
        p.add_argument("--resolutions", type=_resolutions, default=((64, 64), (128, 128)))
        p.add_argument("--reps", type=int, default=20)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--report", default=None)

        p = sub.add_parser("synth", help="write a synthetic pose dataset with PPM images")
        p.add_argument("--synth-seed", type=int, default=0)
        p.add_argument("--n", type=int, default=10, help="number of scenes")
        p.add_argument("--min-persons", type=int, default=1)
        p.add_argument("--max-persons", type=int, default=3)
        p.add_argument("--size", type=int, default=128)
        p.add_argument("--skeleton", default="toy6")
        p.add_argument("--overlap", type=float, default=0.0)
        p.add_argument("--no-render", action="store_true")
        p.add_argument("--out", required=True, help="output directory")

        p = sub.add_parser("compare-modes", help="vanilla vs hierarchical decoding under displacement noise")
        p.add_argument("--synth-seed", type=int, default=11)
        p.add_argument("--n", type=int, default=20)
        p.add_argument("--skeleton", default="mpii16")
        p.add_argument("--relative-noise", type=float, default=0.15)
        p.add_argument("--tau", type=float, default=2.0)
        p.add_argument("--report", default=None)
        return parser

    def _encoder_flags(self, p):
        p.add_argument("--sigma", type=float, default=7.0)
        p.add_argument("--tau", type=float, default=7.0)
        p.add_argument("--tau-mode", choices=(TAU_SQUARED, TAU_RADIUS), default=TAU_SQUARED)
        p.add_argument("--stride", type=int, default=1)

    def _nms_flags(self, p):
        p.add_argument("--nms-window", type=int, default=3)
        p.add_argument("--threshold", type=float, default=0.3)
        p.add_argument("--max-peaks", type=int, default=30)
        p.add_argument("--refine", action="store_true")
