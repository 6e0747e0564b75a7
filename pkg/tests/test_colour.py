import numpy as np
import pytest
from PIL import Image

from catmap import colour, nnmap
from catmap.cvxgrad import SmoothnessParams, TaylorWitness
from catmap.kernelmap import KernelModel


def random_image(seed, shape=(12, 10), lo=0, hi=256):
    return np.random.default_rng(seed).integers(lo, hi, size=(*shape, 3), dtype=np.uint8)


def save(path, arr, mode=None):
    Image.fromarray(arr, mode=mode).save(path)
    return path


class TestImageIO:
    def test_round_trip_bit_exact(self, tmp_path):
        a = random_image(0)
        img = colour.read_rgb(save(tmp_path / "a.png", a))
        assert img.min() >= 0 and img.max() <= 1
        colour.write_rgb(tmp_path / "b.png", img)
        assert np.array_equal(np.asarray(Image.open(tmp_path / "b.png")), a)

    @pytest.mark.parametrize("mode,shape", [("L", (8, 8)), ("RGBA", (8, 8, 4))])
    def test_non_rgb_rejected(self, tmp_path, mode, shape):
        arr = np.zeros(shape, dtype=np.uint8)
        with pytest.raises(colour.ImageError, match="RGB"):
            colour.read_rgb(save(tmp_path / "x.png", arr, mode))

    def test_unreadable(self, tmp_path):
        p = tmp_path / "x.png"
        p.write_text("not an image")
        with pytest.raises(colour.ImageError, match="unreadable"):
            colour.read_rgb(p)

    def test_clamp_and_round(self):
        assert colour.to_uint8(np.array([[[-0.5, 0.5, 1.5]]])).tolist() == [[[0, 128, 255]]]


class TestCloud:
    def test_budget_without_replacement(self):
        img = np.arange(40 * 40 * 3, dtype=np.float64).reshape(40, 40, 3) / (40 * 40 * 3)
        mu = colour.colour_cloud(img, budget=300, seed=1)
        assert mu.size == 300
        assert np.unique(mu.points, axis=0).shape[0] == 300
        assert np.allclose(mu.weights, 1 / 300)

    def test_seeded(self):
        img = random_image(2, (30, 30)) / 255.0
        a = colour.colour_cloud(img, 100, seed=5)
        b = colour.colour_cloud(img, 100, seed=5)
        c = colour.colour_cloud(img, 100, seed=6)
        assert np.array_equal(a.points, b.points) and not np.array_equal(a.points, c.points)

    def test_small_image_kept_whole(self):
        img = random_image(3, (4, 5)) / 255.0
        assert colour.colour_cloud(img, 4096).size == 20

    def test_invalid_budget(self):
        with pytest.raises(ValueError):
            colour.colour_cloud(np.zeros((2, 2, 3)), 0)


class TestApply:
    def test_identity_bit_exact(self):
        a = random_image(4)
        out = colour.apply_map(colour.identity_map, a / 255.0)
        assert np.array_equal(colour.to_uint8(out), a)

    def test_clamped(self):
        out = colour.apply_map(lambda X: 3 * X - 1, random_image(5) / 255.0)
        assert out.min() >= 0 and out.max() <= 1

    def test_threads_match_serial(self, monkeypatch):
        img = random_image(6, (20, 20)) / 255.0
        g = lambda X: X[:, ::-1] ** 2
        serial = colour.apply_map(g, img, chunk=37)
        monkeypatch.setenv("CATMAP_THREADS", "4")
        assert np.array_equal(colour.apply_map(g, img, chunk=37), serial)

    def test_bad_map(self):
        with pytest.raises(ValueError):
            colour.apply_map(lambda X: X[:, :2], np.zeros((2, 2, 3)))
        with pytest.raises(ValueError):
            colour.apply_map(lambda X: X * np.nan, np.zeros((2, 2, 3)))


class TestModels:
    def test_identity(self):
        g = colour.map_from_dict({"type": "identity"})
        X = np.random.default_rng(0).uniform(size=(5, 3))
        assert np.array_equal(g(X), X)

    def test_network(self):
        net = nnmap.NeuralMap.mlp(3, (4,), 3, offset=True)
        theta = net.init_params(np.random.default_rng(0))
        g = colour.map_from_dict(net.to_dict(theta))
        X = np.random.default_rng(1).uniform(size=(6, 3))
        assert np.allclose(g(X), nnmap.forward(net, theta, X))

    def test_kernel(self):
        C = np.random.default_rng(2).uniform(size=(4, 3))
        m = KernelModel(C, np.ones((4, 3)) * 0.1, 0.1, offset=True)
        g = colour.map_from_dict(m.to_dict())
        assert np.allclose(g(C), m(C))

    def test_witness_of_quadratic(self):
        # gradient of |x|^2 / 2: the bounds are tight, so the map is the identity
        A = np.random.default_rng(3).uniform(size=(5, 3))
        wit = TaylorWitness(A, A, 0.5 * np.sum(A * A, axis=1), SmoothnessParams(0.5, 2.0))
        g = colour.map_from_dict(wit.to_dict())
        assert np.allclose(g(A), A, atol=1e-6)

    def test_unknown(self):
        with pytest.raises(ValueError):
            colour.map_from_dict({"foo": 1})


def small_config(**kw):
    sgd = nnmap.SgdConfig(batch_source=32, batch_target=32, alpha0=0.02, tau=200.0, steps=kw.pop("steps", 150))
    return colour.TransferConfig(budget=512, hidden=(8, 8), sgd=sgd, **kw)


def test_constant_target_pulls_colours():
    rng = np.random.default_rng(7)
    src = rng.uniform(0.2, 0.8, size=(24, 24, 3))
    target_colour = np.array([0.9, 0.2, 0.1])
    tgt = np.broadcast_to(target_colour, (24, 24, 3)).copy()
    model = colour.train_transfer(src, tgt, small_config(steps=300))
    out = colour.apply_map(model, src)
    before = np.linalg.norm(src.reshape(-1, 3).mean(axis=0) - target_colour)
    after = np.linalg.norm(out.reshape(-1, 3).mean(axis=0) - target_colour)
    assert after < 0.5 * before


def test_weight_clipping_limits_outlier_pull():
    rng = np.random.default_rng(8)
    src = rng.uniform(0.3, 0.7, size=(24, 24, 3))
    tgt = np.clip(rng.normal([0.6, 0.4, 0.4], 0.05, size=(24, 24, 3)), 0, 1)
    tgt.reshape(-1, 3)[:12] = [0.0, 0.0, 1.0]
    X = src.reshape(-1, 3)
    disp = {}
    for w in (0.05, 1e6):
        model = colour.train_transfer(src, tgt, small_config(w=w, steps=200))
        disp[w] = np.linalg.norm(model(X) - X, axis=1).max()
    assert disp[0.05] < disp[1e6]


def test_training_deterministic():
    src = np.random.default_rng(9).uniform(size=(10, 10, 3))
    tgt = np.random.default_rng(10).uniform(size=(10, 10, 3))
    a = colour.train_transfer(src, tgt, small_config(steps=20))
    b = colour.train_transfer(src, tgt, small_config(steps=20))
    assert np.array_equal(a.theta, b.theta)
