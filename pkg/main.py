from pathlib import Path
import sys

FLEXGEO_DIR = Path(__file__).resolve().parent / "flexgeo"
if str(FLEXGEO_DIR) not in sys.path:
    sys.path.insert(0, str(FLEXGEO_DIR))

from cli import main


if __name__ == "__main__":
    raise SystemExit(main())
