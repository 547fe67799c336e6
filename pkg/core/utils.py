import logging
import logging.handlers

from core.platform_utils import get_log_dir

# Configure logging with both console and file output
LOG_DIR = get_log_dir()
LOG_FILE = LOG_DIR / "pmp.log"

_logger = logging.getLogger("PMP")
_logger.setLevel(logging.DEBUG)
_logger.propagate = False

_console_handler = None

if not _logger.handlers:
    _console_handler = logging.StreamHandler()
    _console_handler.setLevel(logging.INFO)
    _console_handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(message)s'))
    _logger.addHandler(_console_handler)

    try:
        LOG_DIR.mkdir(parents=True, exist_ok=True)
        _file_handler = logging.handlers.RotatingFileHandler(
            LOG_FILE, maxBytes=5 * 1024 * 1024, backupCount=3, encoding="utf-8"
        )
        _file_handler.setLevel(logging.DEBUG)
        _file_handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s [%(name)s] %(message)s'))
        _logger.addHandler(_file_handler)
    except OSError as e:
        _logger.warning(f"File logging disabled ({LOG_FILE}): {e}")


def get_logger(name: str = "PMP") -> logging.Logger:
    return logging.getLogger(name)


def set_console_level(level: int):
    """Adjust console verbosity (the file log always records DEBUG)."""
    if _console_handler is not None:
        _console_handler.setLevel(level)


def human_count(n: int) -> str:
    units = ["", "K", "M", "B"]
    x = float(n)
    for u in units:
        if abs(x) < 1000 or u == units[-1]:
            return f"{x:.0f}{u}" if u == "" else f"{x:.2f}{u}"
        x /= 1000
    return str(n)
