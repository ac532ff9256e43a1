import sys

from lindit.harness.cli import main

sys.exit(main())
