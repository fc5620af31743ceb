"""Registry of acceptance outcomes, printed in the pytest terminal summary."""

from contextlib import contextmanager

RESULTS: dict[int, tuple[str, bool, str]] = {}


@contextmanager
def criterion(number: int, title: str):
    """Record PASS only if the block finishes; put measurements in ``info["detail"]``."""
    info = {"detail": ""}
    ok = False
    try:
        yield info
        ok = True
    finally:
        RESULTS[number] = (title, ok, info["detail"])


def summary_lines() -> list[str]:
    lines = []
    for number in sorted(RESULTS):
        title, ok, detail = RESULTS[number]
        lines.append(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else ""))
    return lines
