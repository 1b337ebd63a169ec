"""Shared pytest plumbing: a terminal summary that prints one pass/fail
line per acceptance criterion after the run."""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    stats = terminalreporter.stats
    bad, good = set(), set()

    def criterion(nodeid):
        name = nodeid.split("::")[-1]
        if "test_criterion_" not in name:
            return None
        return name.split("[")[0]  # fold parametrized cases together

    for status in ("failed", "error"):
        for rep in stats.get(status, []):
            tag = criterion(getattr(rep, "nodeid", ""))
            if tag:
                bad.add(tag)
    for rep in stats.get("passed", []):
        tag = criterion(getattr(rep, "nodeid", ""))
        if tag:
            good.add(tag)
    names = sorted(good | bad)
    if not names:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name in names:
        tag = name.replace("test_criterion_", "")
        num, _, label = tag.partition("_")
        verdict = "FAIL" if name in bad else "PASS"
        terminalreporter.write_line(
            f"criterion {num} {verdict}: {label.replace('_', ' ')}")
