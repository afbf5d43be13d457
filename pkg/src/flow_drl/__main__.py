#!/usr/bin/env python3
"""
flow-drl - Entry Point

Allows running the command line with:
    python -m flow_drl

Copyright (c) 2026 flow-drl authors
"""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
