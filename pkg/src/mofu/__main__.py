import sys

from mofu.cli import main

sys.exit(main())
