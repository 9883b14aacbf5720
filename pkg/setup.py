from pathlib import Path

from setuptools import setup

# get this directory
THISDIR = Path(__file__).parent

# get scripts path
scripts_path = THISDIR / "maskfill" / "scripts"

setup(
    entry_points={
        "console_scripts": [
            f"{f.stem}=maskfill.scripts.{f.stem}:main" for f in scripts_path.glob("*.py") if f.name != "__init__.py"
        ]
    },
)
