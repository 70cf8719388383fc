from threading import Lock
from typing import Any

from cachetools import LRUCache
from cachetools.keys import hashkey


def threadsafe_lru_cache(func: Any = None, maxsize: int = 4096) -> Any:
    """Memoize a pure function behind an LRU cache shared by all threads.

    Keys are built from the positional and keyword arguments, so every
    argument must be hashable.
    """
    cache: Any = LRUCache(maxsize=maxsize)
    lock = Lock()

    def decorator(decorated_func: Any) -> Any:
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            key = hashkey(*args, **kwargs)
            with lock:
                if key in cache:
                    return cache[key]
            value = decorated_func(*args, **kwargs)
            with lock:
                # first writer wins so concurrent callers agree on one object
                return cache.setdefault(key, value)

        wrapper.cache = cache  # type: ignore[attr-defined]
        wrapper.__name__ = getattr(decorated_func, "__name__", "wrapper")
        wrapper.__doc__ = decorated_func.__doc__
        return wrapper

    # Allows to call the decorator with or without parenthesis
    return decorator(func) if callable(func) else decorator
