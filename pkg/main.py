"""density-adapt entry point: ``python main.py <command> [options]``."""

import sys

from density_adapt.cli import main

if __name__ == "__main__":
    sys.exit(main())
