#!/usr/bin/env python3
"""Show that averaging adapter factors differs from averaging their deltas;
thin wrapper over `svdlora gap-demo`.

Usage: python scripts/gap_demo.py [--seed N] [--identical]
"""
import sys

from svdlora.cli import main

if __name__ == "__main__":
    sys.exit(main(["gap-demo", *sys.argv[1:]]))
