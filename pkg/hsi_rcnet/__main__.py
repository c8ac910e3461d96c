import sys

from hsi_rcnet.cli import main

sys.exit(main())
