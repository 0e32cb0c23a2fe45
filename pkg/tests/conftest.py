import sys

import numpy as np
import pandas as pd
import pytest

from costwatch.records import ClaimRecord, EnrollmentRecord, ViewpointSpec


def full_enrollment(n_members: int, horizon: range, prefix: str = "m") -> pd.DataFrame:
    rows = [(f"{prefix}{i}", t, 1.0) for t in horizon for i in range(n_members)]
    return pd.DataFrame(rows, columns=["enrollee_id", "period", "member_months"])


def random_claims(rng: np.random.Generator, n: int, n_members: int, horizon: range) -> pd.DataFrame:
    """Small random claims frame with gaps in every dimension."""
    conditions = np.array(["D1", "D2", "D3", ""], dtype=object)
    classes = np.array(["A", "B", ""], dtype=object)
    products = np.array(["p1", "p2", "p3", "p4", ""], dtype=object)
    episodes = np.array(["e1", "e2", "e3", ""], dtype=object)
    return pd.DataFrame(
        {
            "enrollee_id": [f"m{i}" for i in rng.integers(0, n_members, n)],
            "period": rng.integers(horizon.start, horizon.stop, n),
            "claim_type": rng.choice(["pharmacy", "inpatient", "outpatient"], n),
            "condition": rng.choice(conditions, n),
            "episode_id": rng.choice(episodes, n),
            "quantity": rng.integers(0, 6, n).astype(float),
            "cost": np.round(rng.gamma(2.0, 30.0, n), 2),
            "therapeutic_class": rng.choice(classes, n),
            "product_name": rng.choice(products, n),
        }
    )


SPECS = [
    ViewpointSpec("cond", ("condition", "claim_type", "therapeutic_class", "product_name")),
    ViewpointSpec("drug", ("therapeutic_class", "product_name")),
]


@pytest.fixture
def specs():
    return list(SPECS)


@pytest.fixture
def tiny_records():
    """Three claims by two enrollees at one key plus a second key."""
    claims = [
        ClaimRecord("a", 0, "pharmacy", 4, 100.0, condition="D", attributes={"product_name": "x"}),
        ClaimRecord("a", 0, "pharmacy", 1, 20.0, condition="D", attributes={"product_name": "x"}),
        ClaimRecord("b", 0, "pharmacy", 2, 30.0, condition="D", attributes={"product_name": "x"}),
        ClaimRecord("c", 1, "outpatient", 1, 50.0, condition="E"),
    ]
    enrollment = [EnrollmentRecord(f"m{i}", t) for t in (0, 1) for i in range(10)]
    return claims, enrollment


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
