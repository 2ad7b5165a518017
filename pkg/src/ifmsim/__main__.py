import sys

from ifmsim.cli import main

sys.exit(main())
