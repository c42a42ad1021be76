import sys

from htclab.cli import main

sys.exit(main())
