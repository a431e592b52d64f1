import numpy as np
import pytest

from careload.tabular import TableSchema, ingest_table


def make_schema(**overrides) -> TableSchema:
    base = dict(
        kinds={
            "pid": "identifier", "team": "identifier", "fac": "identifier",
            "age": "numeric", "can": "numeric", "pc": "numeric", "npc": "numeric",
            "gender": "categorical",
        },
        patient_key="pid",
        team_key="team",
        facility_key="fac",
        responses=("pc", "npc"),
    )
    base.update(overrides)
    return TableSchema(**base)


def make_table(rows, schema=None):
    """Build an ObservationTable from a list of dicts via the ingest path."""
    schema = schema or make_schema()
    header = list(rows[0])
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(row[h]) for h in header))
    return ingest_table("\n".join(lines) + "\n", schema)


@pytest.fixture
def small_table():
    rows = []
    rng = np.random.default_rng(7)
    for i in range(12):
        team = f"T{i % 4}"
        rows.append({
            "pid": f"P{i}", "team": team, "fac": f"F{int(team[1]) % 2}",
            "age": round(float(rng.normal(50, 10)), 3),
            "can": round(float(rng.uniform(1, 99)), 3),
            "gender": "M" if i % 3 else "F",
            "pc": round(float(rng.lognormal(0.5, 0.4)), 4),
            "npc": round(float(rng.lognormal(1.0, 0.5)), 4),
        })
    return make_table(rows)


MINIMAL_CONFIG = """
[data]
patient = pid
team = team
facility = fac
numeric = age, can
categorical = gender

[responses]
names = pc, npc
family = gaussian
scale = none

[design]
standardize_slope_covariates = no

[fixed]
main = age

[random.residual]
shape = unstructured
"""
