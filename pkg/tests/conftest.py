"""Shared pytest wiring.

After any run that includes the acceptance module, a terminal section lists
one PASS/FAIL line per acceptance check so the verdicts are readable without
scanning the full log.
"""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = {}
    for outcome, word in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py" not in nodeid:
                continue
            name = nodeid.split("::")[-1]
            # a FAIL in any phase outranks a PASS recorded for another phase
            if verdicts.get(name) != "FAIL":
                verdicts[name] = word
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for name in sorted(verdicts):
            terminalreporter.write_line(f"{verdicts[name]:4s}  {name}")
