import numpy as np
import torch

from triface.images import downsample2x, load_png, save_png, to_batch, to_hwc, to_tensor


def test_tensor_layout_round_trip():
    rng = np.random.default_rng(0)
    img = rng.random((8, 10, 3)).astype(np.float32)
    t = to_tensor(img)
    assert tuple(t.shape) == (3, 8, 10)
    np.testing.assert_array_equal(to_hwc(t).numpy(), img)


def test_to_batch():
    imgs = [np.zeros((4, 4, 3), np.float32), np.ones((4, 4, 3), np.float32)]
    b = to_batch(imgs)
    assert tuple(b.shape) == (2, 3, 4, 4)


def test_downsample2x_exact_average():
    x = torch.arange(16, dtype=torch.float32).reshape(1, 4, 4).repeat(3, 1, 1)
    d = downsample2x(x)
    assert tuple(d.shape) == (3, 2, 2)
    assert d[0, 0, 0].item() == (0 + 1 + 4 + 5) / 4


def test_png_round_trip_uint8(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (12, 12, 3), dtype=np.uint8)
    p = tmp_path / "x.png"
    save_png(img, p)
    back = load_png(p)
    np.testing.assert_array_equal((back * 255).round().astype(np.uint8), img)
