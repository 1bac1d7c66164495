import logging
import os

from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler

# Load environment variables from .env file
load_dotenv()

# --- Registry ---
REGISTRY_URL = os.getenv("SAFETY_REGISTRY_URL", "http://127.0.0.1:8080")
REGISTRY_ROOT = os.getenv("SAFETY_REGISTRY_ROOT", "./registry_data")
HOST = os.getenv("HOST", "0.0.0.0")
PORT = int(os.getenv("PORT", "8080"))
HTTP_TIMEOUT = float(os.getenv("SAFETY_HTTP_TIMEOUT", "10"))

# --- Logging ---
LOG_LEVEL = os.getenv("SAFETY_LOG_LEVEL", "INFO").upper()
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
RICH_LOG_FORMAT = "%(name)s - %(message)s"  # RichHandler renders time and level itself
NOISY_LOGGERS = ("urllib3", "httpx", "uvicorn.access")


def setup_logging(level: str | None = None, rich: bool = False) -> None:
    """
    Configure the root logger. The server logs plain LOG_FORMAT lines; the
    CLI passes rich=True to log through a RichHandler on stderr.
    """
    level = (level or LOG_LEVEL).upper()
    if rich:
        handler = RichHandler(console=Console(stderr=True), show_path=False)
        logging.basicConfig(format=RICH_LOG_FORMAT, level=level, handlers=[handler])
    else:
        logging.basicConfig(format=LOG_FORMAT, level=level)
    logging.getLogger().setLevel(level)
    for name in NOISY_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)
