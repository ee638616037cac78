from __future__ import annotations

import logging
import time
from typing import Callable, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")


class TransientError(RuntimeError):
    """A failure worth retrying (timeouts, rate limits, 5xx)."""

    def __init__(self, message: str = "", retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


def retry_with_backoff(
    fn: Callable[[], T],
    max_attempts: int = 5,
    base_delay: float = 1.0,
    max_delay: float = 30.0,
    sleep: Callable[[float], None] = time.sleep,
) -> T:
    """Call ``fn`` until it succeeds, doubling the delay after each TransientError.

    A server-provided ``retry_after`` takes precedence over the computed delay;
    either is capped at ``max_delay``.
    The last TransientError is re-raised once ``max_attempts`` is exhausted.
    """
    for attempt in range(1, max_attempts + 1):
        try:
            return fn()
        except TransientError as exc:
            if attempt == max_attempts:
                raise
            delay = exc.retry_after if exc.retry_after is not None else base_delay * 2 ** (attempt - 1)
            delay = min(max_delay, delay)
            logger.warning("attempt %d/%d failed (%s); retrying in %.1fs", attempt, max_attempts, exc, delay)
            sleep(delay)
    raise AssertionError("unreachable")
