import sys

from qkuramoto.cli import main

sys.exit(main())
