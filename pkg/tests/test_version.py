import subprocess
from unittest import mock

from langneck import __version__
from langneck.version import describe_version, package_version, run_git_command


def test_run_git_command():
    with mock.patch("subprocess.run") as mock_run:
        mock_run.return_value = subprocess.CompletedProcess(["git", "status"], 0, stdout="ok", stderr="")
        result = run_git_command(["status"])
        assert result.stdout == "ok"
        mock_run.assert_called_once_with(["git", "status"], capture_output=True, text=True, check=True, cwd=None)


def test_run_git_command_unchecked_failure():
    error = subprocess.CalledProcessError(128, ["git", "describe"])
    with mock.patch("subprocess.run", side_effect=error):
        assert run_git_command(["describe"], check=False) is error


def test_describe_version_from_git():
    with mock.patch("langneck.version.run_git_command") as mock_git:
        mock_git.return_value = subprocess.CompletedProcess([], 0, stdout="a1b2c3d-dirty\n", stderr="")
        assert describe_version() == "a1b2c3d-dirty"


def test_describe_version_without_git():
    with mock.patch("langneck.version.run_git_command", side_effect=FileNotFoundError("git")):
        with mock.patch("langneck.version.package_version", return_value="0.1.0"):
            assert describe_version() == "v0.1.0"

    with mock.patch("langneck.version.run_git_command") as mock_git:
        mock_git.return_value = subprocess.CompletedProcess([], 128, stdout="", stderr="fatal")
        assert describe_version().startswith("v")


def test_package_version_fallback():
    from importlib.metadata import PackageNotFoundError

    with mock.patch("langneck.version.version", side_effect=PackageNotFoundError("langneck")):
        assert package_version() == __version__
