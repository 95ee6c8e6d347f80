"""Access to the bundled toy niche-modelling workflow."""

import shutil
from importlib import resources
from pathlib import Path

ENM_SCRIPT = "setup_enm.py"
ENM_INPUT = "data/occurrences.csv"
ENM_OUTPUT = "out/sdmdata.txt"
ENM_DRIFT_VAR = "ENMTOY_DRIFT"


def copy_enm_fixture(dest) -> Path:
    """Copy the toy workflow into ``dest`` (created if needed) and return it."""
    dest = Path(dest)
    source = resources.files("reprokit") / "fixtures" / "enm"
    with resources.as_file(source) as src:
        shutil.copytree(src, dest, dirs_exist_ok=True, ignore=shutil.ignore_patterns("__pycache__"))
    return dest
