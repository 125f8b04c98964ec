import sys

from disdiff.cli import main

sys.exit(main())
