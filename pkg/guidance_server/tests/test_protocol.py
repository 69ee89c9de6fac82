import base64
import io

import numpy as np
from PIL import Image

from guidance_server.protocol import decode_tensor, encode_tensor


def _png_b64(arr):
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def test_health_advertises_protocol_one(client):
    payload = client.get("/health").json()
    assert payload["protocol"] == "1"
    assert payload["modes"] == ["generate", "edit"]


def test_tensor_roundtrip():
    arr = np.random.default_rng(0).standard_normal((4, 5, 3)).astype(np.float32)
    back = decode_tensor(type("P", (), encode_tensor(arr))())
    np.testing.assert_array_equal(back.astype(np.float32), arr)


def test_missing_field_is_400_with_field_name(client, score_body):
    body = score_body()
    del body["prompt"]
    resp = client.post("/score", json=body)
    assert resp.status_code == 400
    assert resp.json()["field"] == "prompt"


def test_bad_mode_is_400(client, score_body):
    resp = client.post("/score", json=score_body(mode="hallucinate"))
    assert resp.status_code == 400
    assert resp.json()["field"] == "mode"


def test_truncated_tensor_is_400(client, score_body):
    body = score_body()
    body["image"]["shape"] = [32, 32, 3]  # claims more data than carried
    resp = client.post("/score", json=body)
    assert resp.status_code == 400
    assert resp.json()["field"] == "image"


def test_timestep_out_of_schedule_is_400(client, score_body):
    resp = client.post("/score", json=score_body(timestep=1000))
    assert resp.status_code == 400
    assert resp.json()["field"] == "timestep"


def test_cfg_scale_below_one_is_400(client, score_body):
    resp = client.post("/score", json=score_body(cfg_scale=0.5))
    assert resp.status_code == 400
    assert resp.json()["field"] == "cfg_scale"


def test_mismatched_conditioning_resolution_is_400(client, score_body):
    tiny = _png_b64(np.zeros((4, 4, 3), dtype=np.uint8))
    resp = client.post("/score", json=score_body(landmark_png_b64=tiny))
    assert resp.status_code == 400
    assert resp.json()["field"] == "landmark_png_b64"


def test_edit_without_instruction_is_400(client, score_body):
    resp = client.post("/score", json=score_body(mode="edit"))
    assert resp.status_code == 400
    assert resp.json()["field"] == "instruction"


def test_response_shape_equals_request_image(client, score_body):
    resp = client.post("/score", json=score_body())
    assert resp.status_code == 200
    payload = resp.json()
    assert payload["gradient"]["shape"] == [16, 16, 3]
    assert payload["w_t"] > 0
