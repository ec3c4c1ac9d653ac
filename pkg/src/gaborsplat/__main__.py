import sys

from gaborsplat.cli import main

sys.exit(main())
