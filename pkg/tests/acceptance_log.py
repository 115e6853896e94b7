"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

LINES: list[str] = []


def record(pid: str, ok: bool, detail: str) -> None:
    LINES.append(f"{pid} {'PASS' if ok else 'FAIL'}  {detail}")
