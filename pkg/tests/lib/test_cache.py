from concurrent.futures import ThreadPoolExecutor

from lib.cache import threadsafe_lru_cache


class TestThreadsafeLruCache:
    """Tests for the shared memoization decorator"""

    def test_memoizes(self) -> None:
        calls = []

        @threadsafe_lru_cache
        def square(n: int) -> int:
            """Squares n"""
            calls.append(n)
            return n * n

        assert square(3) == 9
        assert square(3) == 9
        assert calls == [3]
        assert square.__name__ == "square"
        assert square.__doc__ == "Squares n"

    def test_keyword_arguments_are_part_of_the_key(self) -> None:
        @threadsafe_lru_cache()
        def scaled(n: int, factor: int = 1) -> int:
            return n * factor

        assert scaled(2) == 2
        assert scaled(2, factor=3) == 6
        assert len(scaled.cache) == 2

    def test_evicts_least_recent(self) -> None:
        @threadsafe_lru_cache(maxsize=2)
        def identity(n: int) -> int:
            return n

        for n in (1, 2, 3):
            identity(n)
        assert len(identity.cache) == 2

    def test_concurrent_callers_share_one_value(self) -> None:
        @threadsafe_lru_cache
        def fresh(n: int) -> list[int]:
            return [n]

        with ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(fresh, [5] * 32))
        assert all(r is results[0] for r in results)
