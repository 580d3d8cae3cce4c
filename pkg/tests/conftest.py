from _acceptance import RESULTS


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
