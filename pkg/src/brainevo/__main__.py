import sys

from brainevo.cli import main

sys.exit(main())
