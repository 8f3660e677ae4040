"""Test suite package initialiser to configure shared settings."""

from pathlib import Path
import os
import tempfile

TEST_OUTPUT_DIR = Path(tempfile.gettempdir()) / "tacq-tests"
os.environ.setdefault("TACQ_OUTPUT_DIR", str(TEST_OUTPUT_DIR))
