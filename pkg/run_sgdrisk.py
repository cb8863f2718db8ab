#!/usr/bin/env python3
"""
Launcher for the sgdrisk command-line tool
"""

import os
import sys

# Make the src package importable from a checkout
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
