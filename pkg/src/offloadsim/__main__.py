import sys

from offloadsim.cli import main

sys.exit(main())
