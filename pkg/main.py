#!/usr/bin/env python3
import sys

from dotenv import load_dotenv

from src.interface.cli import cli


def main() -> None:
    """Entry point: `python main.py <command> ...`."""
    # HAMFLOW_THREADS may come from a local .env file
    load_dotenv()
    cli(obj={})


if __name__ == "__main__":
    sys.exit(main())
