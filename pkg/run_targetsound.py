"""Launch the targetsound command line from a source checkout, keeping the console open."""

from __future__ import annotations

import sys
from pathlib import Path


def _pause() -> None:
    """Wait for the user so a double-clicked console window stays visible."""

    if not sys.stdin.isatty():
        return
    try:
        input("\nPress Enter to close this window.")
    except EOFError:
        pass


def _prepare_path() -> None:
    """Make the local copy of the package importable when run as a script."""

    script_dir = Path(__file__).resolve().parent
    if str(script_dir) not in sys.path:
        sys.path.insert(0, str(script_dir))


def _launch(argv: list[str] | None = None) -> int:
    _prepare_path()

    try:
        from targetsound.cli import main as cli_main
    except ModuleNotFoundError as exc:
        print(
            f"Could not start targetsound ({exc})."
            "\nKeep run_targetsound.py next to the 'targetsound' directory and"
            "\ninstall its dependencies with 'pip install -e .'."
        )
        _pause()
        return 1

    exit_code = cli_main(argv)
    if argv is None and len(sys.argv) <= 1:
        _pause()
    return exit_code


if __name__ == "__main__":
    raise SystemExit(_launch())
