import contextlib
import time

CRITERIA: dict[int, str] = {}


@contextlib.contextmanager
def criterion(number: int, title: str, budget_s: float | None = None):
    """Record one PASS/FAIL line for an acceptance criterion; the block's assertions decide."""
    details: list[str] = []
    start = time.perf_counter()
    try:
        yield details
        elapsed = time.perf_counter() - start
        if budget_s is not None:
            details.append(f"{elapsed:.1f}s of {budget_s:.0f}s budget")
            assert elapsed < budget_s, f"runtime {elapsed:.1f}s exceeds {budget_s}s"
    except BaseException as exc:
        CRITERIA[number] = f"criterion {number:2d} FAIL  {title}: {exc}".splitlines()[0]
        raise
    CRITERIA[number] = f"criterion {number:2d} PASS  {title}" + (f" ({'; '.join(details)})" if details else "")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
