"""Registry for per-criterion acceptance lines, printed by the conftest
terminal-summary hook (pytest captures ordinary stdout)."""

LINES: list[str] = []


def record(line: str) -> None:
    LINES.append(line)
