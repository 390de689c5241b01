import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from bsrnkit.blocks import LeafSpec  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def leaves_for(part, seed: int = 0, scale: float = 1.0, dtype=np.float64) -> dict:
    """Random leaves for a block descriptor; `scale` tames curvature for FD checks."""
    r = np.random.default_rng(seed)
    out = {}
    for path, spec in part.leaves().items():
        if spec.init == "kaiming":
            b = np.sqrt(6.0 / spec.fan_in) * scale
            out[path] = r.uniform(-b, b, size=spec.shape).astype(dtype)
        elif spec.init == "zeros":
            out[path] = (0.1 * scale * r.standard_normal(spec.shape)).astype(dtype)
        else:
            out[path] = (1.0 + 0.1 * scale * r.standard_normal(spec.shape)).astype(dtype)
    return out


# One line per acceptance criterion at the end of the run.
_CRITERIA = {
    "test_c1_complexity_reproduction": "1 complexity reproduction (Params/Multi-Adds tables)",
    "test_c2_bicubic_set5_baseline": "2 bicubic Set5 baseline (28.42 dB / 0.8104)",
    "test_c3a_overfit_smoke": "3a overfit smoke (tiny model, L1 < 0.02)",
    "test_c3b_monotone_loss_trend": "3b monotone loss trend",
    "test_c4_oracle_equivalence": "4 oracle equivalence suite",
    "test_c5_gradient_verification": "5 gradient verification (rel err < 1e-5)",
    "test_c6_structural_invariants": "6 structural invariants",
    "test_c7_ablation_plumbing": "7 ablation plumbing (conv kinds x attention modes)",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for outcome in ("passed", "failed", "skipped", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "location", ("", 0, ""))[2].split("[")[0]
            if name in _CRITERIA:
                lines.append((_CRITERIA[name], outcome.upper()))
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for label, outcome in sorted(set(lines)):
            terminalreporter.write_line(f"criterion {label}: {outcome}")
