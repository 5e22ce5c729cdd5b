import sys

from dualdistill.cli import main

sys.exit(main())
