"""Path handling shared by the agent tools."""

import os

from ..settings import get_settings


def workspace_path(path: str) -> str:
    """Resolve ``path`` against AGE_SIR_WORKSPACE unless it is already absolute."""
    if os.path.isabs(path):
        return path
    return os.path.join(get_settings().workspace, path)


def results_path(name: str) -> str:
    out_dir = os.path.join(get_settings().workspace, "results")
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


def error(message: str) -> dict:
    return {"status": "error", "message": message}
