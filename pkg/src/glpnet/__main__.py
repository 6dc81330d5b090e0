import sys

from glpnet.cli import main

sys.exit(main())
