import sys

from gmlab.cli import main

sys.exit(main())
