import numpy as np
import pytest
from scipy.io import wavfile


def write_wav(path, samples, rate=16_000, dtype=np.int16):
    """Write a test WAV; float input in [-1, 1] is scaled for int dtypes."""
    x = np.asarray(samples, dtype=np.float64)
    if dtype == np.int16:
        data = np.clip(x * 32767.0, -32768, 32767).astype(np.int16)
    elif dtype == np.uint8:
        data = np.clip(x * 127.0 + 128.0, 0, 255).astype(np.uint8)
    else:
        data = x.astype(dtype)
    wavfile.write(path, rate, data)
    return path


def tone(n, rate=16_000, hz=440.0, seed=None):
    t = np.arange(n) / rate
    x = 0.5 * np.sin(2 * np.pi * hz * t)
    if seed is not None:
        x = x + 0.05 * np.random.default_rng(seed).normal(size=n)
    return x


@pytest.fixture(scope="session")
def encoder():
    from w2vexport.export import load_encoder

    return load_encoder("random-base")
