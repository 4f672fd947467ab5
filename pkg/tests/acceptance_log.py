"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

LINES: list[str] = []


def record(number: int, title: str, checks: list[tuple[str, bool]]) -> bool:
    ok = all(c for _, c in checks)
    detail = "; ".join(f"{d} [{'ok' if c else 'MISS'}]" for d, c in checks)
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} | {detail}"
    LINES.append(line)
    print(line)
    return ok
