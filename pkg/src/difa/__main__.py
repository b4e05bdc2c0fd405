import sys

from difa.cli import main

sys.exit(main())
