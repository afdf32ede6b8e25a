import sys

from usefullab.cli import main

sys.exit(main())
