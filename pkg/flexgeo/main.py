# input:  [Process argv]
# output: [Process exit status from the flexgeo CLI]
# pos:    [Script entry point inside the flexgeo folder (python flexgeo/main.py <subcommand>)]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

from pathlib import Path
import sys

FLEXGEO_DIR = Path(__file__).resolve().parent
if str(FLEXGEO_DIR) not in sys.path:
    sys.path.insert(0, str(FLEXGEO_DIR))

from cli import main


if __name__ == "__main__":
    raise SystemExit(main())
