import sys

from dotenv import load_dotenv

load_dotenv()

from deepca.api.cli import main  # noqa: E402
from deepca.core.config import Settings  # noqa: E402
from deepca.core.logging import configure_logging  # noqa: E402

if __name__ == "__main__":
    configure_logging(Settings())
    sys.exit(main())
