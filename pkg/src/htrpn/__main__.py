import sys

from htrpn.cli import main

sys.exit(main())
