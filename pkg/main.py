import sys

from App.api.cli_routes import cli_dispatch
from App.core.logging import configure_logging


def main() -> int:
    configure_logging()
    return cli_dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
