# htclab/cli.py - command line: run, sweep, compare, serve
import argparse
import logging
import sys
from typing import List, Optional, Sequence

from config.settings import settings
from htclab import harness
from htclab.errors import ConfigError, SimulationFault
from htclab.models import ResultRow
from htclab.scenario import load_scenario

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAULT = 1
EXIT_CONFIG = 2


def configure_logging(level: Optional[str] = None) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if settings.LOG_FILE:
        handlers.append(logging.FileHandler(settings.LOG_FILE))
    logging.basicConfig(
        level=getattr(logging, (level or settings.LOG_LEVEL).upper(), logging.INFO),
        format=settings.LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="htclab",
        description=settings.APP_DESCRIPTION,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--log-level", default=settings.LOG_LEVEL, help="logging level")
    commands = parser.add_subparsers(dest="command", required=True)

    def scenario_args(sub: argparse.ArgumentParser, many: bool = False) -> None:
        if many:
            sub.add_argument("-c", "--config", action="append", required=True, help="scenario file (repeat)")
        else:
            sub.add_argument("-c", "--config", required=True, help="scenario file")
        sub.add_argument("--seed", type=int, default=None, help="override scenario.seed")
        sub.add_argument("--out", default=settings.OUT_DIR, help="output directory")
        sub.add_argument("--scale", type=float, default=None, help="override scenario.scale (0, 1]")
        sub.add_argument("--jobs", type=int, default=settings.SWEEP_JOBS, help="worker processes")

    scenario_args(commands.add_parser("run", help="run one scenario (every sweep point, if any)",
                                      formatter_class=argparse.ArgumentDefaultsHelpFormatter))
    scenario_args(commands.add_parser("sweep", help="run a scenario's [sweep] section",
                                      formatter_class=argparse.ArgumentDefaultsHelpFormatter))
    scenario_args(commands.add_parser("compare", help="run several scenarios side by side",
                                      formatter_class=argparse.ArgumentDefaultsHelpFormatter), many=True)

    serve = commands.add_parser("serve", help="start the HTTP API",
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    serve.add_argument("--host", default=settings.APP_HOST)
    serve.add_argument("--port", type=int, default=settings.APP_PORT)
    serve.add_argument("--reload", action="store_true", default=settings.APP_RELOAD)
    return parser


def _print_rows(rows: Sequence[ResultRow]) -> None:
    print(f"{'label':<40} {'thr Mb/s':>10} {'delay ms':>9} {'jitter ms':>9} {'ratio':>6} {'retrieval s':>11}")
    for row in rows:
        s = row.stats
        retrieval = f"{s.retrieval_time_s:.4f}" if s.retrieval_time_s is not None else "-"
        print(
            f"{row.label:<40} {s.throughput_bps / 1e6:>10.2f} {s.avg_delay_s * 1e3:>9.3f} "
            f"{s.jitter_s * 1e3:>9.4f} {s.delivery_ratio:>6.3f} {retrieval:>11}"
        )


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "serve":
        import uvicorn

        uvicorn.run("main:app", host=args.host, port=args.port, reload=args.reload)
        return EXIT_OK

    if args.command == "compare":
        configs = [load_scenario(path) for path in args.config]
        table = harness.compare(configs, args.out, args.seed, args.scale, args.jobs)
        _print_rows(table.rows)
        for metric, label in table.verdicts.items():
            print(f"highest {metric}: {label}")
        return EXIT_OK

    config = load_scenario(args.config)
    runner = harness.sweep if args.command == "sweep" else harness.run
    result = runner(config, args.out, args.seed, args.scale, args.jobs)
    _print_rows(result.rows)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        logger.error(f"invalid configuration: {exc}")
        return EXIT_CONFIG
    except SimulationFault as exc:
        logger.error(f"simulation fault: {exc}")
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
