import sys

from graftkit.cli import main

sys.exit(main())
