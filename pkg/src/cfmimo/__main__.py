import sys

from cfmimo.cli import main

sys.exit(main())
