import sys

from confound_audit.cli import main

sys.exit(main())
