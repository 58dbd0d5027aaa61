#!/usr/bin/env python3
"""Main entry point for the localizer phenotype pipeline."""

import sys

from src.cli import main

if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\nRun stopped by user", file=sys.stderr)
        sys.exit(130)
