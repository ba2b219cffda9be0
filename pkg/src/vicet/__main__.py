import sys

from vicet.cli import main

sys.exit(main())
