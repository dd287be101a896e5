import json
import os
import threading
from pathlib import Path

import numpy as np
import pytest

import nowcast_xai as nx

SMOKE = Path(__file__).resolve().parents[2] / "configs" / "smoke.json"


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("store")
    cfg = json.loads(SMOKE.read_text())
    rec = nx.run_stage(cfg, root)
    return cfg, root, rec


def test_config_roundtrip():
    cfg = nx.default_config()
    assert nx.canonical_config(cfg) == cfg
    assert nx.run_id(cfg) == nx.run_id(json.loads(json.dumps(cfg)))
    assert cfg["model"]["train"]["epochs"] == 80
    with pytest.raises(ValueError):
        nx.run_id({"bogus": 1})


def test_softmax_and_temperature():
    z = np.array([[[2.0]], [[0.0]], [[-1.0]]])
    p = nx.softmax(z)
    assert p[:, 0, 0].sum() == pytest.approx(1.0)
    assert p[0, 0, 0] == pytest.approx(np.exp(2) / (np.exp(2) + 1 + np.exp(-1)))
    logits = np.array([[4.0, 0.0, 0.0], [4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]])
    labels = np.array([0, 1, 1, 2], dtype=np.uint8)
    t = nx.fit_temperature(logits, labels)
    assert 1.0 < t < 20.0


def brute_counts(pred, truth, mask, positive):
    h = m = fa = cn = 0
    for p, t, v in zip(pred.ravel(), truth.ravel(), mask.ravel()):
        if not v:
            continue
        pp, tt = p in positive, t in positive
        h += pp and tt
        m += tt and not pp
        fa += pp and not tt
        cn += not pp and not tt
    return dict(hit=h, miss=m, false_alarm=fa, correct_negative=cn)


def test_confusions_match_bruteforce():
    rng = np.random.default_rng(3)
    for _ in range(20):
        pred = rng.integers(0, 3, (8, 8), dtype=np.uint8)
        truth = rng.integers(0, 3, (8, 8), dtype=np.uint8)
        mask = rng.integers(0, 2, (8, 8), dtype=np.uint8)
        c1, c10 = nx.confusions(pred, truth, mask)
        assert c1 == brute_counts(pred, truth, mask, {1, 2})
        assert c10 == brute_counts(pred, truth, mask, {2})


def test_ece_hand_case():
    conf = np.array([0.95, 0.95, 0.55, 0.55])
    correct = np.array([1, 0, 1, 1], dtype=np.uint8)
    # bin 9: acc 0.5 vs 0.95, bin 5: acc 1 vs 0.55 -> 0.5*0.45 + 0.5*0.45
    assert nx.ece(conf, correct, 10) == pytest.approx(0.45, abs=1e-12)


def test_pipeline_done(smoke_run):
    cfg, root, rec = smoke_run
    assert rec["status"] == "Done"
    assert rec["completed_stages"] == ["gen-data", "train", "calibrate", "explain", "report"]
    again = nx.run_stage(cfg, root)
    assert again["updated"] == rec["updated"]
    cal = [k for k in rec["artifacts"] if k.startswith("calibrator.") and not k.endswith(".arch")]
    assert len(cal) >= 12


def test_api_cases_and_bundle(smoke_run):
    cfg, root, rec = smoke_run
    api = nx.ApiService(str(root), rec["run_id"])
    status, _, body, etag = api.get("/v1/cases")
    assert status == 200 and etag
    cases = json.loads(body)["cases"]
    assert cases
    cid = cases[0]["id"]
    status, _, body, _ = api.get(f"/v1/cases/{cid}")
    bundle = json.loads(body)
    assert len(bundle["leads"]) == 6
    h, w = cfg["data"]["grid"]
    for name in bundle["grids"]:
        status, ctype, data, etag = api.get(f"/v1/cases/{cid}/grids/{name}")
        assert status == 200 and ctype == "application/octet-stream"
        header, arr = nx.decode_grdf(data)
        assert tuple(arr.shape[-2:]) == (h, w)
        assert etag == bundle["grids"][name]["sha256"]
    assert api.get("/v1/cases/nope")[0] == 404


def test_api_confidence_toggle(smoke_run):
    _, root, rec = smoke_run
    api = nx.ApiService(str(root), rec["run_id"])
    cid = json.loads(api.get("/v1/cases")[2])["cases"][0]["id"]
    raw = json.loads(api.get(f"/v1/confidence/{cid}", {"lead": "2", "calibrated": "false"})[2])
    ts = json.loads(api.get(f"/v1/confidence/{cid}", {"lead": "2", "calibrated": "true"})[2])
    grid = lambda ref: nx.decode_grdf(api.get(ref["url"])[2])[1]
    assert np.array_equal(grid(raw["prediction"]), grid(ts["prediction"]))
    if ts["temperature"] != pytest.approx(1.0):
        assert not np.array_equal(grid(raw["confidence"]), grid(ts["confidence"]))


def test_api_explain_validation_and_single_flight(smoke_run):
    _, root, rec = smoke_run
    api = nx.ApiService(str(root), rec["run_id"])
    cid = json.loads(api.get("/v1/cases")[2])["cases"][0]["id"]
    status, _, body, _ = api.get(f"/v1/explain/{cid}", {"lead": "1", "class": "3"})
    assert status == 400 and json.loads(body)["allowed"] == [0, 1, 2]
    results = []
    query = {"lead": "3", "class": "2", "method": "saliency"}
    threads = [threading.Thread(target=lambda: results.append(api.get(f"/v1/explain/{cid}", query))) for _ in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert api.explain_computations == 1
    assert results[0][2] == results[1][2]
    payload = json.loads(results[0][2])
    _, arr = nx.decode_grdf(api.get(payload["grid"]["url"])[2])
    assert payload["vmax"] == pytest.approx(float(np.abs(arr).max()), rel=1e-6)
    assert payload["vmin"] == -payload["vmax"]


def test_api_reports_match_files(smoke_run):
    _, root, rec = smoke_run
    api = nx.ApiService(str(root), rec["run_id"])
    run_dir = Path(root) / "runs" / rec["run_id"]
    assert api.get("/v1/reports/ece.csv")[2] == (run_dir / "calibration" / "ece.csv").read_bytes()
    perf = json.loads(api.get("/v1/performance")[2])
    assert len(perf["cells"]) == 36
    rel = json.loads(api.get("/v1/reliability", {"lead": "1"})[2])
    ece = json.loads((run_dir / "calibration" / "ece.json").read_text())
    assert rel["leads"][0]["ece_before"] == ece["rows"][0]["before"]


def test_empty_store_lists_nothing(tmp_path):
    api = nx.ApiService(str(tmp_path), "")
    assert json.loads(api.get("/v1/cases")[2])["cases"] == []
    assert json.loads(api.get("/v1/runs")[2])["runs"] == []
