"""Collects one verdict line per acceptance criterion for the terminal summary."""

RESULTS: dict[int, tuple[bool, str, str]] = {}


def record(number: int, title: str, passed: bool, detail: str = "") -> None:
    RESULTS[number] = (bool(passed), title, detail)


def lines() -> list[str]:
    out = []
    for number in sorted(RESULTS):
        passed, title, detail = RESULTS[number]
        out.append(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else ""))
    return out
