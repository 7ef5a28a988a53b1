"""Command line entry point: ``moue {train,convert,topo,analyze}``.

Exit codes: 0 ok, 1 usage or invalid config, 2 data or format problem,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..checkpoint import CheckpointError
from ..model import DivergenceError
from ..topology import TopologyError
from ..warmstart import ConversionError
from .config import ConfigError, describe, load_config
from .experiment import run_analyze, run_convert, run_topo, run_train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="moue", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory (overrides output.dir)")

    common(sub.add_parser("train", help="train on the synthetic corpus"))
    common(sub.add_parser("topo", help="connectivity, exposure, path count and budget reports"))
    sp = sub.add_parser("convert", help="warm-start a MoUE checkpoint from a layer-local MoE")
    sp.add_argument("source", help="source MoE checkpoint")
    common(sp)
    sp = sub.add_parser("analyze", help="CKA, universal routing share and heatmaps")
    sp.add_argument("checkpoint")
    common(sp)
    sub.add_parser("config", help="print every config key with its default")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "config":
        sys.stdout.write(describe())
        return EXIT_OK
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.set("seed", args.seed)
        out = Path(args.out or cfg["output.dir"])
        if args.command == "train":
            run_train(cfg, out)
        elif args.command == "topo":
            run_topo(cfg, out)
        elif args.command == "convert":
            src = Path(args.source)
            if not src.is_file():
                print(f"error: not found: {src}", file=sys.stderr)
                return EXIT_DATA
            run_convert(src, cfg, out)
        else:
            src = Path(args.checkpoint)
            if not src.is_file():
                print(f"error: not found: {src}", file=sys.stderr)
                return EXIT_DATA
            run_analyze(src, cfg, out)
    except (ConfigError, TopologyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: not found: {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError:
        print("error: diverged", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, ConversionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
