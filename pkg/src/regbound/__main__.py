import sys

from regbound.cli import main

sys.exit(main())
