"""
edgefit - shape model fitting from landmarks and edges
"""

# File: main.py
import logging
import sys

from src.cli import run
from src.config import settings

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)


def main():
    """Main entry point for the command line."""
    try:
        code = run()
    except KeyboardInterrupt:
        logging.info("Stopped by user")
        code = 130
    sys.exit(code)


if __name__ == "__main__":
    main()
