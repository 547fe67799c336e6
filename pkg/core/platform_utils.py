"""
Platform abstraction layer for PMP.
Keeps OS-specific paths and shell-outs in one place.
"""

import os
import subprocess
import sys
import logging
from pathlib import Path
from typing import Optional

IS_WINDOWS = sys.platform == "win32"

logger = logging.getLogger("PMP.platform")


# -------------------------
# Paths & Directories
# -------------------------

def get_app_data_dir() -> Path:
    if IS_WINDOWS:
        base = os.environ.get("LOCALAPPDATA", os.path.expanduser("~"))
    else:
        base = os.environ.get("XDG_DATA_HOME", os.path.join(os.path.expanduser("~"), ".local", "share"))
    return Path(base) / "PMP"


def get_log_dir() -> Path:
    override = os.environ.get("PMP_LOG_DIR")
    if override:
        return Path(override)
    return get_app_data_dir() / "logs"


def get_default_font() -> str:
    if IS_WINDOWS:
        return "Segoe UI"
    return "Sans"


# -------------------------
# Build identity
# -------------------------

def git_commit(repo_dir: Path) -> Optional[str]:
    """HEAD commit of the checkout at *repo_dir*, or None outside a git work tree."""
    try:
        p = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=str(repo_dir),
            capture_output=True, text=True, timeout=5,
        )
        if p.returncode == 0:
            return p.stdout.strip() or None
    except Exception as e:
        logger.debug(f"git rev-parse failed: {e}")
    return None


# -------------------------
# File Manager
# -------------------------

def open_in_file_manager(path: str):
    try:
        p = Path(path)
        if IS_WINDOWS:
            subprocess.run(["explorer", str(p)], check=False)
        else:
            target = str(p.parent) if p.exists() and p.is_file() else str(p)
            subprocess.run(["xdg-open", target], check=False)
    except Exception as e:
        logger.warning(f"Failed to open in file manager: {path}: {e}")


def open_text_file(path: str):
    try:
        if IS_WINDOWS:
            os.startfile(path)  # type: ignore[attr-defined]
        else:
            subprocess.run(["xdg-open", path], check=False)
    except Exception as e:
        logger.warning(f"Failed to open text file: {path}: {e}")
