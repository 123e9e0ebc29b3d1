import sys

from leaklab.harness.cli import main

sys.exit(main())
