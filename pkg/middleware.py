import time
import logging
from contextlib import contextmanager

from models.config import SLOW_THRESHOLD_S

# Logger configuration
logger = logging.getLogger("g2c-middleware")


class CommandMiddleware:
    """
    Wraps a command handler ``app(command, args) -> exit code``

    Subclasses override dispatch and call ``call_next`` to continue the chain.
    """

    def __init__(self, app):
        self.app = app

    def __call__(self, command, args):
        return self.dispatch(command, args, self.app)

    def dispatch(self, command, args, call_next):
        return call_next(command, args)


class PerformanceMiddleware(CommandMiddleware):
    """
    Measures how long each subcommand runs and logs slow ones
    """

    def __init__(self, app, slow_threshold_s=SLOW_THRESHOLD_S):
        super().__init__(app)
        self.slow_threshold_s = slow_threshold_s

    def dispatch(self, command, args, call_next):
        start_time = time.time()
        code = call_next(command, args)
        elapsed = time.time() - start_time

        if elapsed > self.slow_threshold_s:
            logger.warning(
                f"Slow command detected: {command} - "
                f"{elapsed:.2f}s (threshold: {self.slow_threshold_s}s)"
            )
        logger.debug(f"Command: {command} - {elapsed:.2f}s - exit {code}")
        return code


class CommandLoggingMiddleware(CommandMiddleware):
    """
    Logs start, completion and failure of each subcommand
    """

    def dispatch(self, command, args, call_next):
        start_time = time.time()
        logger.info(f"Command started: {command}")
        try:
            code = call_next(command, args)
            logger.info(f"Command completed: {command} - exit {code} - {time.time() - start_time:.2f}s")
            return code
        except Exception as e:
            logger.error(f"Command failed: {command} - Error: {str(e)}")
            raise


@contextmanager
def stage_timer(name, slow_threshold_s=None):
    """Times a block (an epoch, a grid row); yields a dict that receives 'seconds'"""
    threshold = SLOW_THRESHOLD_S if slow_threshold_s is None else slow_threshold_s
    timing = {"seconds": 0.0}
    start_time = time.time()
    try:
        yield timing
    finally:
        timing["seconds"] = time.time() - start_time
        if timing["seconds"] > threshold:
            logger.warning(f"Slow stage: {name} - {timing['seconds']:.2f}s (threshold: {threshold}s)")
        else:
            logger.debug(f"Stage: {name} - {timing['seconds']:.2f}s")
