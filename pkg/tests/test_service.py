"""HTTP surface: request validation, status codes, and numerical agreement
with the library calls the endpoints wrap."""

import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from conftest import rand_gains
from uwmmse import metrics, model, netgen, service, wmmse
from uwmmse.netgen import ProblemConfig


@pytest.fixture()
def client():
    return TestClient(service.create_app())


def _checkpoint_doc(tmp_path, seed=0, K=2, F=2, variant="gcn"):
    params = model.init_params(seed, F=F, F_in=1, K=K, variant=variant)
    path = tmp_path / "ckpt.json"
    model.save_checkpoint(path, params, seed=seed)
    return params, json.loads(path.read_text())


def test_health(client):
    r = client.get("/health")
    assert r.status_code == 200
    body = r.json()
    assert body["status"] == "ok" and body["models"] == 0
    assert isinstance(body["version"], str)


def test_channel_reproducible(client):
    req = {"m": 4, "topology_seed": 3, "fading_seed": 7}
    a = client.post("/channel", json=req)
    b = client.post("/channel", json=req)
    assert a.status_code == 200
    assert a.json() == b.json()
    gains = np.asarray(a.json()["gains"])
    state = netgen.sample_channel(4, 3, 7)
    assert np.allclose(gains, state.gains, rtol=0, atol=0)


def test_channel_validates_m(client):
    assert client.post("/channel", json={"m": 0}).status_code == 422
    assert client.post("/channel", json={"m": 513}).status_code == 422


def test_solve_matches_library(client):
    g = rand_gains(3, 500)
    r = client.post("/solve", json={"gains": g.tolist(), "noise_std": 1.0})
    assert r.status_code == 200
    body = r.json()
    res = wmmse.solve(g, wmmse.SolveOptions(noise_std=1.0))
    assert np.allclose(body["p"], res.p, rtol=0, atol=0)
    assert body["iterations"] == res.iterations
    assert body["converged"] == res.converged
    assert np.isclose(body["sum_utility"], metrics.rates(res.p, g, 1.0).sum())
    assert all(0 <= p <= 1.0 for p in body["p"])


def test_solve_rejects_bad_inputs(client):
    ok = rand_gains(3, 501).tolist()
    r = client.post("/solve", json={"gains": [[1.0, 0.2]], "noise_std": 1.0})
    assert r.status_code == 400
    neg = rand_gains(3, 502)
    neg[0, 1] = -0.5
    assert client.post("/solve", json={"gains": neg.tolist(), "noise_std": 1.0}).status_code == 400
    r = client.post("/solve", json={"gains": ok, "noise_std": 1.0, "utility": "log_rate"})
    assert r.status_code == 400
    assert client.post("/solve", json={"gains": ok, "noise_std": 0.0}).status_code == 422


def test_model_registry_round_trip(client, tmp_path):
    params, doc = _checkpoint_doc(tmp_path)
    r = client.post("/models", json={"name": "alpha", "checkpoint": doc})
    assert r.status_code == 201
    assert r.json() == {"name": "alpha", "variant": "gcn", "K": 2, "F": 2, "F_in": 1}

    r = client.post("/models", json={"name": "zed", "checkpoint": doc})
    assert r.status_code == 201
    listed = client.get("/models").json()
    assert [x["name"] for x in listed] == ["alpha", "zed"]
    assert client.get("/health").json()["models"] == 2


def test_model_registry_rejects_bad_doc(client):
    r = client.post("/models", json={"name": "bad", "checkpoint": {"schema_version": 99}})
    assert r.status_code == 400


def test_allocate_matches_forward(client, tmp_path):
    params, doc = _checkpoint_doc(tmp_path, seed=4)
    client.post("/models", json={"name": "m1", "checkpoint": doc})
    g = rand_gains(3, 510)
    r = client.post("/allocate", json={"model_name": "m1", "gains": g.tolist(),
                                       "noise_std": 1.0})
    assert r.status_code == 200
    body = r.json()
    cfg = ProblemConfig(noise_std=1.0, p_max=1.0, utility=metrics.sum_rate())
    p_ref, _ = model.forward(g, None, params, cfg)
    assert np.allclose(body["p"], p_ref, rtol=0, atol=0)
    assert np.allclose(body["rates"], metrics.rates(p_ref, g, 1.0))
    assert np.isclose(body["sum_utility"], metrics.rates(p_ref, g, 1.0).sum())


def test_allocate_unknown_model_404(client):
    g = rand_gains(2, 511)
    r = client.post("/allocate", json={"model_name": "ghost", "gains": g.tolist(),
                                       "noise_std": 1.0})
    assert r.status_code == 404


def test_allocate_validates_feature_shape(client, tmp_path):
    _, doc = _checkpoint_doc(tmp_path)
    client.post("/models", json={"name": "m2", "checkpoint": doc})
    g = rand_gains(3, 512)
    r = client.post("/allocate", json={"model_name": "m2", "gains": g.tolist(),
                                       "noise_std": 1.0,
                                       "features": [[1.0, 2.0]] * 3})
    assert r.status_code == 400
    r = client.post("/allocate", json={"model_name": "m2", "gains": g.tolist(),
                                       "noise_std": 1.0, "features": [[1.0]] * 3})
    assert r.status_code == 200


def test_allocate_scores_non_solver_utility(client, tmp_path):
    # the layer update falls back to the sum-rate rule; the score keeps the
    # requested utility
    params, doc = _checkpoint_doc(tmp_path, seed=6)
    client.post("/models", json={"name": "m3", "checkpoint": doc})
    g = rand_gains(3, 513)
    r = client.post("/allocate", json={"model_name": "m3", "gains": g.tolist(),
                                       "noise_std": 1.0, "utility": "harmonic_rate"})
    assert r.status_code == 200
    body = r.json()
    cfg = ProblemConfig(noise_std=1.0, p_max=1.0, utility=metrics.sum_rate())
    p_ref, _ = model.forward(g, None, params, cfg)
    assert np.allclose(body["p"], p_ref, rtol=0, atol=0)
    c = metrics.rates(p_ref, g, 1.0)
    assert np.isclose(body["sum_utility"], metrics.sum_utility(c, metrics.harmonic_rate()))
