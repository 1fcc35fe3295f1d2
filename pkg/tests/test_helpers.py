import logging
import sys

from sensing.src.helpers import LOG_FORMAT, config_section, configure_logger


def test_config_section_reads_packaged_defaults():
    """Test a known section of config.yaml and the empty default."""
    scene = config_section("scene")

    assert scene["beampattern_samples"] >= 181
    assert 0 < scene["beampattern_ridge"] < 1
    assert config_section("no_such_section") == {}


def test_configure_logger_single_stderr_handler():
    """Test the stderr handler, its format and that repeated calls add nothing."""
    name = "sensing.tests.helpers_logger"
    logger = configure_logger(name)
    again = configure_logger(name)

    assert again is logger
    assert len(logger.handlers) == 1
    handler = logger.handlers[0]
    assert isinstance(handler, logging.StreamHandler)
    assert handler.stream is sys.stderr
    assert handler.formatter._fmt == LOG_FORMAT
    assert logger.level == logging.getLevelName(config_section("logging")["level"])
