import numpy as np
import pytest

from trifuse.config import AutoencoderConfig, PipelineConfig, SyntheticSceneConfig
from trifuse.core import FlowField

SMALL_SCENE = SyntheticSceneConfig(frame_width=64, frame_height=48, train_frames=30, test_frames=45,
                                   n_train_targets=4, n_normal=2, n_abnormal=3, box_size=(8, 12), seed=11)

SMALL_CONFIG_TEXT = """\
# small, fast scene
seed = 7
motion.ae.epochs = 200
motion.gmm.k = 3
scene.frame_width = 64
scene.frame_height = 48
scene.train_frames = 30
scene.test_frames = 45
scene.n_train_targets = 4
scene.n_normal = 2
scene.n_abnormal = 3
scene.box_size = 8, 12
"""


@pytest.fixture
def small_scene():
    return SMALL_SCENE


@pytest.fixture
def small_config():
    return PipelineConfig(ae=AutoencoderConfig(epochs=200), scene=SMALL_SCENE, seed=7)


@pytest.fixture
def small_config_file(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CONFIG_TEXT)
    return str(path)


def uniform_flow(width, height, u, v, dtype=np.float32):
    vectors = np.empty((height, width, 2), dtype=dtype)
    vectors[..., 0] = u
    vectors[..., 1] = v
    return FlowField(width, height, vectors)
