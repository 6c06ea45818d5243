"""
Entry point for atom-steering.

Usage:
    python -m atom_steering <command>
    atom-steer <command>  # If installed via pip
"""

import sys


def main() -> int:
    """Main entry point."""
    from atom_steering.cli import main as cli_main

    try:
        return cli_main()
    except KeyboardInterrupt:
        return 2


if __name__ == "__main__":
    sys.exit(main())
