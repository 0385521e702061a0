from __future__ import annotations

import random
from decimal import Decimal, getcontext
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_event
from provmesh.model import Status
from provmesh.service import MetricAbsent, correlation_matrix, lineage_report, pearson
from provmesh.store import CampaignConfig, UnknownCampaign

T0 = 1_700_000_000_000_000_000


def exact_pearson(xs, ys):
    """Pearson r in exact rational arithmetic, square root taken at 50 digits."""
    n = len(xs)
    fx = [Fraction(x) for x in xs]
    fy = [Fraction(y) for y in ys]
    mx, my = sum(fx) / n, sum(fy) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(fx, fy))
    sxx = sum((a - mx) ** 2 for a in fx)
    syy = sum((b - my) ** 2 for b in fy)
    if sxx == 0 or syy == 0:
        return None
    getcontext().prec = 50
    r2 = Decimal(sxy.numerator * abs(sxy.numerator)) / Decimal(sxy.denominator**2)
    denom = Decimal((sxx * syy).numerator) / Decimal((sxx * syy).denominator)
    r = (abs(r2) / denom).sqrt()
    return float(r if sxy >= 0 else -r)


def test_pearson_examples():
    assert pearson([1, 2, 3, 4], [2, 4, 6, 8]) == pytest.approx(1.0, abs=1e-12)
    assert pearson([1, 2, 3, 4], [8, 6, 4, 2]) == pytest.approx(-1.0, abs=1e-12)
    assert pearson([1, 2, 3], [5, 5, 5]) is None
    assert pearson([1, 2], [1, 2]) is None
    with pytest.raises(ValueError):
        pearson([1, 2, 3], [1, 2])


@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6)), min_size=3, max_size=60))
def test_pearson_matches_exact_arithmetic(pairs):
    xs, ys = [p[0] for p in pairs], [p[1] for p in pairs]
    want = exact_pearson(xs, ys)
    got = pearson(xs, ys)
    if want is None:
        assert got is None
    elif got is not None:  # near-degenerate spreads may legitimately round to constant
        assert got == pytest.approx(want, abs=1e-9)


def _campaign(store, n=30, seed=1):
    rng = random.Random(seed)
    events = []
    for i in range(n):
        lr = rng.uniform(0.001, 0.1)
        layers = rng.randint(1, 9)
        used = {"lr": lr, "layers": layers, "batch_norm": i % 2 == 0, "opt": "adam"}
        gen = {"loss": 3 * lr + 1.0, "acc": 1.0 - 0.1 * layers, "noise": rng.random()}
        start = T0 + i * 10**9
        events.append(make_event(f"t{i:02d}", Status.RUNNING, start, workflow_id="wf", campaign_id="c", activity_id="train", payload={"used": used}))
        events.append(
            make_event(f"t{i:02d}", Status.FINISHED, start + (i + 1) * 10**8, workflow_id="wf", campaign_id="c", activity_id="train", payload={"used": used, "generated": gen})
        )
    store.bulk_upsert(events)
    return events


def test_correlation_matrix_planted_dependencies(store):
    _campaign(store)
    m = correlation_matrix(store, "c", ["used.lr", "used.layers", "used.batch_norm"], ["generated.loss", "generated.acc", "elapsed"])
    assert m.get("used.lr", "generated.loss") == pytest.approx(1.0, abs=1e-9)
    assert m.get("used.layers", "generated.acc") == pytest.approx(-1.0, abs=1e-9)
    assert abs(m.get("used.batch_norm", "generated.loss")) < 1.0
    assert m.counts[0][0] == 30
    d = m.to_dict()
    assert d["rows"] == ["used.lr", "used.layers", "used.batch_norm"] and len(d["values"][0]) == 3


def test_correlation_constant_and_non_numeric_fields(store):
    _campaign(store)
    store.bulk_upsert([make_event("const", workflow_id="wf", campaign_id="c", payload={"used": {"lr": 1}})])
    m = correlation_matrix(store, "c", ["used.lr"], ["generated.loss"], activity_id="train")
    assert m.counts[0][0] == 30
    flat = correlation_matrix(store, "c", ["used.lr"], ["environment.missing"])
    assert flat.values == [[None]] and flat.counts == [[0]]
    assert correlation_matrix(store, "c", ["used.opt"], ["generated.loss"]).values == [[None]]


def test_correlation_against_exact_oracle(store):
    events = _campaign(store, n=40, seed=9)
    finals = [e for e in events if e.new_status is Status.FINISHED]
    xs = [e.payload["used"]["lr"] for e in finals]
    ys = [e.payload["generated"]["noise"] for e in finals]
    m = correlation_matrix(store, "c", ["used.lr"], ["generated.noise"])
    assert m.values[0][0] == pytest.approx(exact_pearson(xs, ys), abs=1e-12)


def test_unknown_campaign(store):
    with pytest.raises(UnknownCampaign):
        correlation_matrix(store, "nope", ["a"], ["b"])
    with pytest.raises(UnknownCampaign):
        lineage_report(store, "nope", 1, "x")


def _pipeline(store):
    store.put_campaign(CampaignConfig("c", ["wf1", "wf2"]))
    evs = []
    for i in range(3):
        evs.append(make_event(f"prep{i}", Status.FINISHED, T0 + i, workflow_id="wf1", campaign_id="c", payload={"generated": {"d": f"file:///d{i}"}}))
        evs.append(
            make_event(
                f"fit{i}", Status.FINISHED, T0 + 10 + i, workflow_id="wf2", campaign_id="c",
                payload={"used": {"d": f"file:///d{i}"}, "generated": {"loss": [0.3, 0.1, 0.2][i]}},
            )
        )
    evs.append(make_event("fit9", Status.RUNNING, T0, workflow_id="wf2", campaign_id="c", payload={"generated": {"loss": 0.0}}))
    store.bulk_upsert(evs)


def test_lineage_report_orders_and_links(store):
    _pipeline(store)
    rep = lineage_report(store, "c", 2, "generated.loss")
    assert [e["task_id"] for e in rep.entries] == ["fit1", "fit2"]  # running fit9 is ignored
    assert rep.entries[0]["metric_value"] == 0.1
    assert [u["task_id"] for u in rep.entries[0]["upstream"]["wf1"]] == ["prep1"]
    assert rep.entries[0]["edges"][0]["producer"] == "prep1"
    best = lineage_report(store, "c", 1, "generated.loss", minimize=False)
    assert [e["task_id"] for e in best.entries] == ["fit0"]
    assert rep.to_dict()["k"] == 2


def test_lineage_report_k_beyond_population(store):
    _pipeline(store)
    rep = lineage_report(store, "c", 50, "generated.loss")
    assert [e["task_id"] for e in rep.entries] == ["fit1", "fit2", "fit0"]


def test_lineage_report_metric_absent(store):
    _pipeline(store)
    with pytest.raises(MetricAbsent):
        lineage_report(store, "c", 1, "generated.accuracy")
    with pytest.raises(ValueError):
        lineage_report(store, "c", 0, "generated.loss")
