import numpy as np
import pytest
from fastapi.testclient import TestClient

from guidance_server.app import create_app
from guidance_server.backends import SyntheticBackend
from guidance_server.protocol import encode_tensor


@pytest.fixture(scope="session")
def backend():
    return SyntheticBackend()


@pytest.fixture(scope="session")
def client(backend):
    return TestClient(create_app(backend))


@pytest.fixture
def score_body():
    rng = np.random.default_rng(np.random.PCG64(0))
    image = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)

    def make(**overrides):
        body = {
            "mode": "generate",
            "image": encode_tensor(image),
            "prompt": "a DSLR portrait of a test head, front view",
            "instruction": None,
            "timestep": 400,
            "noise_seed": 1234,
            "cfg_scale": 7.5,
            "edit_scale": 0.6,
            "landmark_png_b64": None,
            "reference_png_b64": None,
        }
        body.update(overrides)
        return body

    return make
