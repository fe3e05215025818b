import sys

from guarded_tuning.cli import main

sys.exit(main())
