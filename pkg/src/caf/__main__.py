import sys

from caf.cli import main

sys.exit(main())
