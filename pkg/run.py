"""
Main Entry Point for qdm-fa

Loads .env, configures logging, then hands argv to the CLI.
Run this file with a subcommand, e.g. `python run.py simulate --scenario s.json --out b.qfm`.
"""

import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables before any module reads them at import time
env_path = Path(__file__).parent / '.env'
load_dotenv(dotenv_path=env_path)

stream_level = logging.getLevelName(os.getenv('QDM_LOG_LEVEL', 'WARNING').upper())
if not isinstance(stream_level, int):
    stream_level = logging.WARNING
stream_handler = logging.StreamHandler()
stream_handler.setLevel(stream_level)
handlers = [stream_handler]

# The file always gets INFO, whatever the console shows
log_file = os.getenv('QDM_LOG_FILE')
if log_file:
    file_handler = logging.FileHandler(log_file)
    file_handler.setLevel(logging.INFO)
    handlers.append(file_handler)

# Configure logging
logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=min(h.level for h in handlers),
    handlers=handlers
)
logger = logging.getLogger(__name__)


if __name__ == "__main__":
    from cli import main
    sys.exit(main())
