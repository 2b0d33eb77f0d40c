import base64
import io

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from femurcad import data as D
from femurcad import service as svc
from femurcad import vit

TINY = vit.ViTConfig.preset("tiny")


@pytest.fixture(scope="module")
def study_setup(tmp_path_factory):
    manifest, _ = D.synth_generate(3, seed=21, out_dir=tmp_path_factory.mktemp("synthdata"))
    dataset = D.build_array_dataset(manifest, TINY.image_size)
    model = vit.ViTModel(TINY, seed=0)
    truth = {sid: D.LABEL_NAMES[dataset.label_for(sid)] for sid in dataset.ids}
    return model, dataset, truth


def make_client(study_setup, tmp_path, case_pool=None, case_count=10, washout=0.0):
    model, dataset, truth = study_setup
    app = svc.create_app(model=model, dataset=dataset, truth=truth,
                         case_pool=case_pool if case_pool is not None else dataset.ids,
                         store_dir=tmp_path / "sessions",
                         config=svc.ServiceConfig(case_count=case_count,
                                                  washout_seconds=washout, seed=5))
    return TestClient(app)


def png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray((image * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


# -- predict endpoint -----------------------------------------------------------


def test_predict_returns_normalized_probabilities_and_grid(study_setup, tmp_path):
    client = make_client(study_setup, tmp_path)
    img = np.random.default_rng(0).random((64, 64)).astype(np.float32)
    response = client.post("/predict", files={"file": ("x.png", png_bytes(img), "image/png")})
    assert response.status_code == 200
    body = response.json()
    assert len(body["probabilities"]) == 7
    assert abs(sum(body["probabilities"]) - 1.0) < 1e-6
    assert body["grid_size"] == 8  # 64 / 8 for the tiny preset
    assert len(body["heatmap"]) == 8 and len(body["heatmap"][0]) == 8
    assert body["argmax"] in D.LABEL_NAMES


def test_predict_deterministic(study_setup, tmp_path):
    client = make_client(study_setup, tmp_path)
    img = np.random.default_rng(1).random((64, 64)).astype(np.float32)
    blob = png_bytes(img)
    a = client.post("/predict", files={"file": ("x.png", blob, "image/png")})
    b = client.post("/predict", files={"file": ("x.png", blob, "image/png")})
    assert a.json() == b.json()


def test_predict_truncated_upload_rejected(study_setup, tmp_path):
    client = make_client(study_setup, tmp_path)
    blob = png_bytes(np.zeros((32, 32), dtype=np.float32))[:40]
    response = client.post("/predict", files={"file": ("x.png", blob, "image/png")})
    assert response.status_code == 400
    assert "malformed" in response.json()["detail"]


def test_predict_without_model_is_503(study_setup, tmp_path):
    _, dataset, truth = study_setup
    app = svc.create_app(model=None, dataset=dataset, truth=truth,
                         case_pool=dataset.ids, store_dir=tmp_path / "s2")
    client = TestClient(app)
    response = client.post("/predict", files={"file": ("x.png", png_bytes(
        np.zeros((8, 8), dtype=np.float32)), "image/png")})
    assert response.status_code == 503


# -- study flow -----------------------------------------------------------------


def start_session(client, role="resident", case_count=None):
    body = {"role": role}
    if case_count is not None:
        body["case_count"] = case_count
    response = client.post("/study", json=body)
    assert response.status_code == 200
    return response.json()


def test_phase1_payload_has_no_model_fields(study_setup, tmp_path):
    client = make_client(study_setup, tmp_path, case_count=3)
    session = start_session(client)
    payload = client.get(f"/study/{session['session_id']}/next", params={"phase": 1}).json()
    assert payload["done"] is False
    assert set(payload) == {"done", "case_id", "phase", "index", "total",
                            "labels", "image_png_base64"}
    assert "model" not in payload
    blob = base64.b64decode(payload["image_png_base64"])
    with Image.open(io.BytesIO(blob)) as img:
        assert img.size == (64, 64)


def test_phase2_served_only_after_phase1_and_includes_model(study_setup, tmp_path):
    client = make_client(study_setup, tmp_path, case_count=2)
    session = start_session(client)
    sid = session["session_id"]

    # phase 2 for the first case is locked until its phase 1 answer exists
    locked = client.get(f"/study/{sid}/next", params={"phase": 2})
    assert locked.status_code == 409

    while True:
        payload = client.get(f"/study/{sid}/next", params={"phase": 1}).json()
        if payload["done"]:
            break
        ack = client.post(f"/study/{sid}/answer",
                          json={"case_id": payload["case_id"], "phase": 1,
                                "label": "Unbroken"})
        assert ack.status_code == 200

    payload = client.get(f"/study/{sid}/next", params={"phase": 2}).json()
    assert payload["done"] is False
    model_block = payload["model"]
    assert len(model_block["probabilities"]) == 7
    assert model_block["grid_size"] == 8


def test_answer_error_paths(study_setup, tmp_path):
    client = make_client(study_setup, tmp_path, case_count=2)
    session = start_session(client)
    sid = session["session_id"]
    case = client.get(f"/study/{sid}/next", params={"phase": 1}).json()["case_id"]

    assert client.post(f"/study/{sid}/answer",
                       json={"case_id": case, "phase": 2, "label": "A1"}).status_code == 409
    assert client.post(f"/study/{sid}/answer",
                       json={"case_id": "nope", "phase": 1, "label": "A1"}).status_code == 404
    assert client.post(f"/study/{sid}/answer",
                       json={"case_id": case, "phase": 1, "label": "C4"}).status_code == 422
    assert client.post(f"/study/{sid}/answer",
                       json={"case_id": case, "phase": 1, "label": "A1"}).status_code == 200
    duplicate = client.post(f"/study/{sid}/answer",
                            json={"case_id": case, "phase": 1, "label": "A1"})
    assert duplicate.status_code == 409
    assert client.get("/study/missing/report").status_code == 404


def test_washout_policy_blocks_phase2(study_setup, tmp_path):
    client = make_client(study_setup, tmp_path, case_count=1, washout=3600.0)
    session = start_session(client)
    sid = session["session_id"]
    case = client.get(f"/study/{sid}/next", params={"phase": 1}).json()["case_id"]
    client.post(f"/study/{sid}/answer", json={"case_id": case, "phase": 1, "label": "A1"})
    blocked = client.get(f"/study/{sid}/next", params={"phase": 2})
    assert blocked.status_code == 409
    assert "washout" in blocked.json()["detail"]


def scripted_answers(client, sid, truth, phase, correct_count):
    """Answer every case; the first `correct_count` correctly, the rest wrong."""
    answered = 0
    while True:
        payload = client.get(f"/study/{sid}/next", params={"phase": phase}).json()
        if payload["done"]:
            break
        case = payload["case_id"]
        right = truth[case]
        wrong = next(name for name in D.LABEL_NAMES if name != right)
        label = right if answered < correct_count else wrong
        response = client.post(f"/study/{sid}/answer",
                               json={"case_id": case, "phase": phase, "label": label})
        assert response.status_code == 200
        answered += 1
    return answered


def _session_cases(store_dir, sid):
    """Ordered case list straight from the persisted creation event."""
    import json as json_mod

    first_line = (store_dir / f"{sid}.jsonl").read_text().splitlines()[0]
    return json_mod.loads(first_line)["cases"]


def test_scripted_session_reproduces_reader_study_numbers(tmp_path):
    # 150 synthetic cases; phase 1: 87 correct, phase 2: 144 correct
    ids = [f"case-{i:03d}" for i in range(150)]
    truth = {cid: D.LABEL_NAMES[i % 7] for i, cid in enumerate(ids)}
    store_dir = tmp_path / "sessions"
    app = svc.create_app(model=None, dataset=None, truth=truth, case_pool=ids,
                         store_dir=store_dir, config=svc.ServiceConfig(case_count=150))
    client = TestClient(app)
    session = start_session(client, role="resident", case_count=150)
    sid = session["session_id"]
    assert session["total_cases"] == 150
    cases = _session_cases(store_dir, sid)

    for phase, correct in ((1, 87), (2, 144)):
        for index, case in enumerate(cases):
            right = truth[case]
            wrong = next(name for name in D.LABEL_NAMES if name != right)
            label = right if index < correct else wrong
            response = client.post(f"/study/{sid}/answer",
                                   json={"case_id": case, "phase": phase, "label": label})
            assert response.status_code == 200

    report = client.get(f"/study/{sid}/report").json()
    assert report["phase1_accuracy"] == pytest.approx(0.58)
    assert report["phase2_accuracy"] == pytest.approx(0.96)
    assert report["improvement"] == pytest.approx(0.38)
    role_block = report["by_role"]["resident"]
    assert role_block["phase1_accuracy"] == pytest.approx(0.58)
    assert len(role_block["phase1_ci"]) == 2


def test_perfect_answers_give_unit_accuracies(study_setup, tmp_path):
    client = make_client(study_setup, tmp_path, case_count=4)
    _, dataset, truth = study_setup
    session = start_session(client, role="radiologist")
    sid = session["session_id"]
    for phase in (1, 2):
        while True:
            payload = client.get(f"/study/{sid}/next", params={"phase": phase}).json()
            if payload["done"]:
                break
            case = payload["case_id"]
            client.post(f"/study/{sid}/answer",
                        json={"case_id": case, "phase": phase, "label": truth[case]})
    report = client.get(f"/study/{sid}/report").json()
    assert report["phase1_accuracy"] == 1.0
    assert report["phase2_accuracy"] == 1.0
    assert report["improvement"] == 0.0


def test_sessions_survive_restart(study_setup, tmp_path):
    model, dataset, truth = study_setup
    store = tmp_path / "persist"
    config = svc.ServiceConfig(case_count=3, seed=2)
    app1 = svc.create_app(model=model, dataset=dataset, truth=truth,
                          case_pool=dataset.ids, store_dir=store, config=config)
    client1 = TestClient(app1)
    session = start_session(client1)
    sid = session["session_id"]
    payload = client1.get(f"/study/{sid}/next", params={"phase": 1}).json()
    client1.post(f"/study/{sid}/answer",
                 json={"case_id": payload["case_id"], "phase": 1, "label": "A2"})
    before = client1.get(f"/study/{sid}/report").json()

    app2 = svc.create_app(model=model, dataset=dataset, truth=truth,
                          case_pool=dataset.ids, store_dir=store, config=config)
    client2 = TestClient(app2)
    after = client2.get(f"/study/{sid}/report").json()
    assert after == before
    next_case = client2.get(f"/study/{sid}/next", params={"phase": 1}).json()
    assert next_case["case_id"] != payload["case_id"]  # progress preserved
