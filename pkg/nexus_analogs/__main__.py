import sys

from nexus_analogs.cli import main

if __name__ == '__main__':
    sys.exit(main())
