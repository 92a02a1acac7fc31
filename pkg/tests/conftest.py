import json
import os

import pytest

from ovseg import cli

# Full pipeline at the committed default configuration, run once per session.
# Self-training is included here so the before/after comparison is available;
# the budget/determinism test drives its own subprocess runs separately.
CHAIN = [
    ["gen-data"],
    ["pretrain"],
    ["select-prompt"],
    ["tune-prompt"],
    ["train-proposals"],
    ["train-fcn"],
    ["self-train"],
    ["eval", "--protocol", "all"],
    ["ablate", "--axis", "all"],
]


@pytest.fixture(scope="session")
def chain_run(tmp_path_factory):
    """Run directory and summary of one default-config pipeline run."""
    out = tmp_path_factory.mktemp("chain")
    previous = os.environ.get("OVSEG_OUT")
    os.environ["OVSEG_OUT"] = str(out)
    try:
        for args in CHAIN:
            code = cli.main(args)
            assert code == 0, f"ovseg {' '.join(args)} exited with {code}"
    finally:
        if previous is None:
            os.environ.pop("OVSEG_OUT", None)
        else:
            os.environ["OVSEG_OUT"] = previous
    run_dir = next(p for p in out.iterdir() if p.is_dir())
    summary = json.loads((run_dir / "reports" / "summary.json").read_text())
    return run_dir, summary
