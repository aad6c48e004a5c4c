import sys

from .cli_orchestrator import main

sys.exit(main())
