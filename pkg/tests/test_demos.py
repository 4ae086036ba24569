import subprocess
import sys
from pathlib import Path

import pytest

DEMOS = Path(__file__).resolve().parent.parent / "demos"


@pytest.mark.parametrize("script, args", [
    ("planted_walkthrough.py", []),
    ("polynomial_collapse.py", ["--seeds", "10"]),
    ("rank_and_space_ablation.py", ["--seeds", "2", "--d", "512"]),
    ("cli_baselines_and_sweep.py", []),
])
def test_demo_runs(tmp_path, script, args):
    if script != "rank_and_space_ablation.py":
        args = [*args, "--out", str(tmp_path)]
    proc = subprocess.run([sys.executable, str(DEMOS / script), *args],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip()


def test_collapse_report_written(tmp_path):
    subprocess.run([sys.executable, str(DEMOS / "polynomial_collapse.py"), "--seeds", "10", "--out", str(tmp_path)],
                   check=True, capture_output=True)
    report = (tmp_path / "collapse_report.md").read_text()
    assert "| 200 | 20x |" in report
    assert (tmp_path / "collapse_coefficients.csv").exists()
