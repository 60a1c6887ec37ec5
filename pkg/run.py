#!/usr/bin/env python3
"""
Hybrid trajectory tracking - command-line entry point

Usage:
    python run.py simulate --config bouncing_ball
    python run.py certify --config scenarios/dissipative_oscillator.yaml
    python run.py track --config bouncing_ball --out output/
    python run.py figures

Outputs (CSV data and JSON/text reports) are written under ./output unless
--out or HYBRID_OUTPUT_DIR says otherwise.
"""

import os
import sys

# Add the project root to Python path
project_root = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, project_root)


def main():
    from app.main import main as cli_main

    sys.exit(cli_main())


if __name__ == "__main__":
    main()
