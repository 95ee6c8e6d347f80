import hashlib
import sys
from pathlib import Path

import pytest

from reprokit.model import (
    ArtifactRole,
    DataArtifact,
    Ecosystem,
    ExperimentManifest,
    FunctionInfo,
    FunctionKind,
    HardwareInfo,
    OperatingSystemInfo,
    OsPackage,
    Parameter,
    ScriptInfo,
    ScriptPackage,
    UserInfo,
)

FIXTURES = Path(__file__).parent / "fixtures"


def sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def make_manifest(**overrides) -> ExperimentManifest:
    fields = dict(
        user=UserInfo("Ada", "0000-0002-1825-0097"),
        hardware=HardwareInfo("Xeon E5", 8, 16 * 2**30, "x86_64"),
        os=OperatingSystemInfo("Ubuntu", "22.04", "5.15.0"),
        script=ScriptInfo("setup.R", Ecosystem.R, sha(b"library(raster)\n")),
        os_packages=frozenset({OsPackage("gdal", "3.4.1"), OsPackage("runtime:R", "4.1.2")}),
        functions=frozenset(
            {
                FunctionInfo("setup", FunctionKind.defined),
                FunctionInfo("kfold", FunctionKind.called, "dismo"),
            }
        ),
        script_packages=frozenset(
            {ScriptPackage("raster", "3.5-15", Ecosystem.R), ScriptPackage("dismo", "1.3-5", Ecosystem.R)}
        ),
        inputs=frozenset({DataArtifact("data/occ.csv", ArtifactRole.input, sha(b"occ"), 3)}),
        parameters=frozenset({Parameter("seed", "512")}),
    )
    fields.update(overrides)
    return ExperimentManifest(**fields)


@pytest.fixture
def manifest():
    return make_manifest()


@pytest.fixture
def python():
    return sys.executable
