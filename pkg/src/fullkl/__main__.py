"""Allow ``python -m fullkl`` as an alias for the ``fullkl`` console script."""

import sys

from .runner import main

if __name__ == "__main__":
    sys.exit(main())
