import subprocess
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import List, Optional

PACKAGE_NAME = "langneck"


def run_git_command(args: List[str], cwd: Optional[Path] = None, check: bool = True) -> subprocess.CompletedProcess:
    """Run a git command and return the completed process."""
    try:
        return subprocess.run(
            ["git"] + args,
            capture_output=True,
            text=True,
            check=check,
            cwd=cwd,
        )
    except subprocess.CalledProcessError as e:
        if check:
            raise e
        return e


def package_version() -> str:
    try:
        return version(PACKAGE_NAME)
    except PackageNotFoundError:
        from langneck import __version__

        return __version__


def describe_version(cwd: Optional[Path] = None) -> str:
    """`git describe --always --dirty` of the source checkout, else `v<package version>`."""
    cwd = cwd or Path(__file__).resolve().parent
    try:
        result = run_git_command(["describe", "--always", "--dirty"], cwd=cwd, check=False)
    except OSError:
        result = None
    if result is not None and result.returncode == 0 and result.stdout.strip():
        return result.stdout.strip()
    return f"v{package_version()}"
