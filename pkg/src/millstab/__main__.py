import sys

from millstab.cli import main

sys.exit(main())
