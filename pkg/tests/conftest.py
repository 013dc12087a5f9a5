import os

# single-threaded BLAS keeps float sums, and so the reproducibility checks, stable
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

ACCEPTANCE_LINES = {}


def record_acceptance(number, title, ok, detail="", key=None):
    key = key or f"{number:02d}"
    ACCEPTANCE_LINES[key] = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}" + (
        f"  ({detail})" if detail else "")
    print(ACCEPTANCE_LINES[key])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
