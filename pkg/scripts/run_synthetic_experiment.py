"""Prepare, route and run the full model comparison on the bundled synthetic config.

    python3 scripts/run_synthetic_experiment.py [--config configs/synthetic.yaml] [--jobs N]
"""
import argparse
import sys
from pathlib import Path

from llmoe import cli

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "synthetic.yaml"))
    p.add_argument("--jobs", default="1")
    args = p.parse_args()
    for command in ("prepare", "route", "run"):
        extra = ["--jobs", args.jobs] if command == "run" else []
        code = cli.main([command, "--config", args.config, *extra])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
