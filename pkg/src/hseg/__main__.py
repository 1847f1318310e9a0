import sys

from hseg.cli import main

sys.exit(main())
