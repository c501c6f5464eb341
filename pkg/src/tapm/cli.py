"""``tapm`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 2 configuration error, 3 missing upstream stage,
4 numerical failure (divergence, non-finite gradients).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .attacks import AttackError
from .config import ABLATIONS, ConfigError, load_config
from .data_zoo import TrainingDivergedError
from .experiments import (CACHE_ENV, PIPELINE, STAGES, LedgerError, StageDependencyError,
                          Workspace, run_pipeline, stage_ablate)
from .game import GameError
from .pubdef import PubDefError
from .tensor_core import GraphError

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("tapm")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--seed", type=int, help="override the config's global seed")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--resume", action="store_true",
                        help="redo a stage whose earlier run stopped part way")
    common.add_argument("--quiet", action="store_true")
    p = argparse.ArgumentParser(prog="tapm", description=__doc__.splitlines()[0],
                                epilog=f"cache root: ${CACHE_ENV} (default <out>/cache)")
    sub = p.add_subparsers(dest="command", required=True)
    for name in PIPELINE:
        sub.add_parser(name, parents=[common])
    ab = sub.add_parser("ablate", parents=[common])
    ab.add_argument("ablation", choices=ABLATIONS)
    ab.add_argument("--replicates", type=int)
    sub.add_parser("run", parents=[common], help="every stage in order")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config, args.seed)
        ws = Workspace(args.out, cfg, jobs=args.jobs, resume=args.resume, log=log.info)
        if args.command == "run":
            run_pipeline(ws)
        elif args.command == "ablate":
            stage_ablate(ws, args.ablation, args.replicates)
        else:
            STAGES[args.command](ws)
    except (ConfigError, LedgerError) as err:
        log.error("config error: %s", err)
        return EXIT_CONFIG
    except (StageDependencyError, FileNotFoundError) as err:
        log.error("dependency error: %s", err)
        return EXIT_DEPENDENCY
    except (TrainingDivergedError, GraphError, FloatingPointError, AttackError) as err:
        log.error("numerical failure: %s", err)
        return EXIT_NUMERICAL
    except (PubDefError, GameError) as err:
        log.error("config error: %s", err)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
