"""Shared helpers: seeded generators and synthetic fixture builders."""

import numpy as np
import pytest

from evframe import CameraRig, ImagePNM


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def gray_image(rng, width: int, height: int) -> ImagePNM:
    pixels = rng.integers(0, 256, size=(height, width, 1)).astype(np.uint8)
    return ImagePNM(width=width, height=height, channels=1, pixels=pixels)


def rgb_image(rng, width: int, height: int) -> ImagePNM:
    pixels = rng.integers(0, 256, size=(height, width, 3)).astype(np.uint8)
    return ImagePNM(width=width, height=height, channels=3, pixels=pixels)


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def small_rig(angle_rgb=0.01, angle_event=-0.015, angle_between=0.02) -> CameraRig:
    return CameraRig(
        k_rgb=np.array([[120.0, 0.0, 32.0], [0.0, 115.0, 24.0], [0.0, 0.0, 1.0]]),
        k_event=np.array([[90.0, 0.0, 30.0], [0.0, 95.0, 22.0], [0.0, 0.0, 1.0]]),
        r_rgb=rot_z(angle_rgb),
        r_event=rot_z(angle_event),
        r_event_rgb=rot_z(angle_between),
    )


@pytest.fixture
def rng():
    return philox(12345)
