"""Tests for utility functions."""

import shutil
import tempfile
from pathlib import Path

import pytest

from malmm.utils import (
    ensure_directory_exists,
    get_default_seed,
    normalize_path,
    parse_int_list,
    safe_open_text,
)


class TestUtils:
    """Test cases for utility functions."""

    def setup_method(self):
        """Set up test fixtures."""
        self.temp_dir = Path(tempfile.mkdtemp())

    def teardown_method(self):
        """Clean up test fixtures."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_parse_int_list(self):
        """Test comma-separated integer parsing."""
        assert parse_int_list("10,100,1000") == [10, 100, 1000]
        assert parse_int_list(" 1, 2 ,") == [1, 2]
        assert parse_int_list("") == []
        with pytest.raises(ValueError):
            parse_int_list("1,x")

    def test_default_seed(self, monkeypatch):
        """Test the MALMM_SEED environment variable."""
        monkeypatch.delenv("MALMM_SEED", raising=False)
        assert get_default_seed() == 0

        monkeypatch.setenv("MALMM_SEED", " ")
        assert get_default_seed() == 0

        monkeypatch.setenv("MALMM_SEED", "42")
        assert get_default_seed() == 42

        monkeypatch.setenv("MALMM_SEED", "4.2")
        with pytest.raises(ValueError):
            get_default_seed()

    def test_ensure_directory_exists(self):
        """Test nested directory creation."""
        path = ensure_directory_exists(self.temp_dir / "a" / "b")

        assert path.is_dir()
        assert path.is_absolute()
        assert ensure_directory_exists(path) == path

    def test_normalize_path(self):
        """Test home expansion."""
        assert normalize_path("~") == Path.home().resolve()

    def test_safe_open_text(self):
        """Test UTF-8 text with Unix line endings."""
        path = self.temp_dir / "note.txt"
        with safe_open_text(path, "w") as f:
            f.write("µ\n")

        assert path.read_bytes() == "µ\n".encode("utf-8")
        with safe_open_text(path) as f:
            assert f.read() == "µ\n"
