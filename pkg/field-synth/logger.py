import logging
import sys
from logging.handlers import RotatingFileHandler
import os

from config import settings

# Create logs directory relative to the working directory unless configured otherwise
logs_dir = os.path.abspath(settings.log_dir)
if not os.path.exists(logs_dir):
    os.makedirs(logs_dir, exist_ok=True)

# Configure logger
logger = logging.getLogger("field_synth")
logger.setLevel(settings.log_level.upper())

# Format for the logs
formatter = logging.Formatter(
    "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)

if not logger.handlers:
    # Console Handler (for all logs)
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    # File Handler for all logs
    file_handler = RotatingFileHandler(
        os.path.join(logs_dir, settings.log_file),
        maxBytes=10485760,  # 10MB
        backupCount=5
    )
    file_handler.setLevel(settings.log_level.upper())
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)
