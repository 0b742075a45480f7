import logging

LOG_FORMAT = (
    "%(asctime)s %(levelname)s %(name)s "
    "[%(filename)s:%(lineno)d in %(funcName)s] %(message)s"
)

logger = logging.getLogger("trace_signals")


def setup_logging(log_level: str = "INFO", log_file: str | None = None):
    level = getattr(logging, str(log_level).upper(), logging.INFO)
    logger.setLevel(level)
    if not logger.hasHandlers():
        formatter = logging.Formatter(LOG_FORMAT)

        stream_handler = logging.StreamHandler()
        stream_handler.setFormatter(formatter)
        logger.addHandler(stream_handler)

        if log_file:
            file_handler = logging.FileHandler(log_file)
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)
