import sys

from i2vgan.cli import main

sys.exit(main())
