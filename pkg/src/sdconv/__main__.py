import sys

from sdconv.cli import main

sys.exit(main())
