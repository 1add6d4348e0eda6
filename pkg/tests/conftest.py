import numpy as np
import pytest
import torch

from rawfield.camera import CameraMetadata, Intrinsics, Pose


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def simple_meta():
    """64x64 camera at the origin looking down +z, plausible sensor constants."""
    return CameraMetadata(
        white_level=4095,
        black_level=528,
        wb_gains=np.array([0.5, 1.0, 0.6]),
        ccm=np.array([
            [1.06, -0.27, -0.12],
            [-0.43, 1.45, 0.05],
            [-0.05, 0.21, 0.70],
        ]),
        shutter=1.0 / 15.0,
        iso=800.0,
        pose=Pose.identity(),
        intrinsics=Intrinsics(focal=96.0, cx=32.0, cy=32.0, width=64, height=64),
    )


def make_meta(**kwargs):
    defaults = dict(
        white_level=4095,
        black_level=528,
        wb_gains=np.array([0.5, 1.0, 0.6]),
        ccm=np.array([
            [1.06, -0.27, -0.12],
            [-0.43, 1.45, 0.05],
            [-0.05, 0.21, 0.70],
        ]),
        shutter=1.0 / 15.0,
        iso=800.0,
        pose=Pose.identity(),
        intrinsics=Intrinsics(focal=96.0, cx=32.0, cy=32.0, width=64, height=64),
    )
    defaults.update(kwargs)
    return CameraMetadata(**defaults)
