"""Run the dynamic flow command line: ``python app.py <command> [options]``."""
from __future__ import annotations

import sys

from dotenv import load_dotenv

from dynamic_flow.cli import main

load_dotenv()


if __name__ == "__main__":
    sys.exit(main())
