import os
import json
import logging
import hashlib
from functools import wraps

from pydantic import ValidationError

from storage.files import atomic_write_text

# Logger for the result cache
logger = logging.getLogger("g2c-storage")

RESULT_NAME = "result.json"

# Hit/miss counters for the current process
stats = {"hits": 0, "misses": 0, "writes": 0}


def cache_key(kind, params=None):
    """Builds a cache key from a kind tag and its parameters"""
    # Parameters become canonical JSON
    params_str = json.dumps(params, sort_keys=True) if params is not None else "None"
    return hashlib.md5(f"{kind}:{params_str}".encode()).hexdigest()


def config_hash(config):
    """md5 of a pydantic config's canonical JSON"""
    return cache_key(type(config).__name__, config.model_dump(mode="json"))


def get_from_cache(directory, key):
    """Returns the stored result in directory if it was produced under key"""
    path = os.path.join(directory, RESULT_NAME)
    if not os.path.exists(path):
        logger.debug(f"Cache miss: {key[:8]}... (no result in {directory})")
        stats["misses"] += 1
        return None
    try:
        with open(path, "r", encoding="utf-8") as f:
            stored = json.load(f)
    except (OSError, json.JSONDecodeError) as error:
        logger.warning(f"Ignoring unreadable cached result {path}: {error}")
        stats["misses"] += 1
        return None
    if not isinstance(stored, dict) or stored.get("cache_key") != key:
        # Produced under a different configuration
        logger.debug(f"Cache stale: {key[:8]}... in {directory}")
        stats["misses"] += 1
        return None
    logger.debug(f"Cache hit: {key[:8]}...")
    stats["hits"] += 1
    return stored.get("data")


def set_in_cache(directory, key, data):
    atomic_write_text(
        os.path.join(directory, RESULT_NAME),
        json.dumps({"cache_key": key, "data": data}, indent=2, sort_keys=True),
    )
    stats["writes"] += 1
    logger.debug(f"Cache set: {key[:8]}... in {directory}")
    return True


def cached_result(model_cls):
    """
    Decorator caching a pydantic result on disk, one directory per call

    The wrapped function takes (directory, key, ...) and returns a model_cls
    instance; a result stored under the same key is returned without calling it.
    """
    def decorator(func):
        @wraps(func)
        def wrapper(directory, key, *args, bypass_cache=False, **kwargs):
            if not bypass_cache:
                cached = get_from_cache(directory, key)
                if cached is not None:
                    try:
                        return model_cls.model_validate(cached)
                    except ValidationError as error:
                        logger.warning(f"Recomputing malformed cached result in {directory}: {error}")

            result = func(directory, key, *args, **kwargs)
            set_in_cache(directory, key, result.model_dump(mode="json"))
            return result
        return wrapper
    return decorator


def get_cache_stats():
    return dict(stats)


def reset_cache_stats():
    for k in stats:
        stats[k] = 0
