import numpy as np
import pytest

from wavenerf.config import ModelConfig, SamplerConfig
from wavenerf.geometry import CameraView
from wavenerf.scene import Plane, SyntheticScene, Texture


def shifted_camera(x, size=16, focal=12.0, near=1.0, far=4.0, image=None, name="cam"):
    """Camera at (x, 0, 0) looking down +z with identity rotation."""
    K = np.array([[focal, 0, size / 2], [0, focal, size / 2], [0, 0, 1.0]])
    return CameraView(K=K, R=np.eye(3), t=np.array([-x, 0.0, 0.0]), near=near, far=far,
                      image=image, name=name, height=size, width=size)


def plane_scene(depth=2.5, freq=9.0, seed=0):
    rng = np.random.default_rng(seed)
    dirs = np.array([[1.0, 0.3, 0.0], [0.2, 1.0, 0.0]])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    tex = Texture(base=np.full(3, 0.5), amp=np.full(3, 0.35), dirs=dirs,
                  phase=rng.uniform(0, 6, (3, 2)), freq=freq)
    return SyntheticScene(objects=[Plane(depth, tex)])


def plane_rig(n=3, size=16, depth=2.5, baseline=0.15, **kw):
    scene = plane_scene(depth)
    cams = []
    for i, x in enumerate(np.linspace(-baseline, baseline, n)):
        cam = shifted_camera(x, size=size, name=f"v{i}", **kw)
        cam.image, _ = scene.render(cam)
        cams.append(cam)
    return scene, cams


def micro_model_config():
    return ModelConfig(spatial_channels=(2, 2, 3), freq_channels=2, latent_channels=2,
                       depth_planes=(2, 4, 4), freq_planes=4, token_width=4, heads=2,
                       dir_freqs=1, hidden=4, ae_channels=2)


@pytest.fixture
def micro_cfg():
    return micro_model_config()


@pytest.fixture
def sampler_cfg():
    return SamplerConfig(n_coarse=8, n_fine=4)
