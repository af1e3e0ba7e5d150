import pytest

from metastab.settings_manager import reset_settings


@pytest.fixture(autouse=True)
def default_settings():
    """Every test starts from DEFAULT_SETTINGS"""
    reset_settings()
    yield
    reset_settings()
