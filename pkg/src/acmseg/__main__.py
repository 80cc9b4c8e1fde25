"""Allow ``python3 -m acmseg``."""

import sys

from .cli import main

sys.exit(main())
