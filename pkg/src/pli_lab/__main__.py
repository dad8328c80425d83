import sys

from pli_lab.harness.cli import main

sys.exit(main())
