import json
import math

import numpy as np
import pytest

from lesionkit.errors import ChecksumMismatch, DegenerateBatch, NonFiniteGradient, ShapeMismatch, VersionMismatch
from lesionkit.xmasnet import layers as L
from lesionkit.xmasnet.io import load_model, save_model
from lesionkit.xmasnet.network import NetworkConfig, XmasNet
from lesionkit.xmasnet.optim import AdamState, TrainConfig, adam_step
from lesionkit.xmasnet.train import SampleSet, lesion_auc, predict, train
from oracles import direct_conv, max_rel_error, numeric_grad

TABLE = [
    ("conv1", (32, 32, 32)),
    ("conv2", (32, 32, 32)),
    ("pool1", (16, 16, 32)),
    ("conv3", (16, 16, 64)),
    ("conv4", (16, 16, 64)),
    ("pool2", (8, 8, 64)),
    ("fc1", (1024,)),
    ("fc2", (256,)),
    ("softmax", (2,)),
]

TINY = NetworkConfig(in_channels=3, input_size=8, conv_channels=(2, 3, 3, 2), fc_units=(6, 4))


def proj_loss(out, r):
    return float((out * r).sum())


class TestConv:
    def test_table_shape(self):
        x = np.zeros((1, 3, 32, 32), np.float32)
        w = np.zeros((32, 3, 3, 3), np.float32)
        out, _ = L.conv3x3_forward(x, w, np.zeros(32, np.float32))
        assert out.shape == (1, 32, 32, 32)

    def test_delta_kernel_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 5, 6))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1
        out, _ = L.conv3x3_forward(x, w, np.zeros(1))
        assert np.array_equal(out, x)

    def test_ones_kernel_vs_loops(self):
        x = np.random.default_rng(1).normal(size=(1, 1, 4, 4))
        w = np.ones((1, 1, 3, 3))
        out, _ = L.conv3x3_forward(x, w, np.zeros(1))
        assert np.abs(out - direct_conv(x, w, np.zeros(1))).max() < 1e-6

    @pytest.mark.parametrize("shape", [(1, 1, 3, 3, 1), (2, 3, 4, 5, 2), (3, 2, 6, 4, 3), (1, 4, 5, 5, 2), (2, 2, 2, 6, 4)])
    def test_random_vs_loops(self, shape):
        n, c, h, w_, k = shape
        rng = np.random.default_rng(sum(shape))
        x, w, b = rng.normal(size=(n, c, h, w_)), rng.normal(size=(k, c, 3, 3)), rng.normal(size=k)
        assert np.abs(L.conv3x3_forward(x, w, b)[0] - direct_conv(x, w, b)).max() < 1e-10

    @pytest.mark.parametrize("shape", [(1, 1, 3, 3, 1), (2, 3, 4, 5, 2), (3, 2, 6, 4, 3), (1, 4, 5, 5, 2), (2, 2, 2, 6, 4)])
    def test_gradcheck(self, shape):
        n, c, h, w_, k = shape
        rng = np.random.default_rng(100 + sum(shape))
        x, w, b = rng.normal(size=(n, c, h, w_)), rng.normal(size=(k, c, 3, 3)), rng.normal(size=k)
        r = rng.normal(size=(n, k, h, w_))
        out, cache = L.conv3x3_forward(x, w, b)
        dx, dw, db = L.conv3x3_backward(r, cache)
        f = lambda: proj_loss(L.conv3x3_forward(x, w, b)[0], r)
        assert max_rel_error(dx, numeric_grad(f, x)) < 1e-4
        assert max_rel_error(dw, numeric_grad(f, w)) < 1e-4
        assert max_rel_error(db, numeric_grad(f, b)) < 1e-4

    def test_skip_dx(self):
        x = np.ones((1, 2, 3, 3))
        _, cache = L.conv3x3_forward(x, np.ones((1, 2, 3, 3)), np.zeros(1))
        assert L.conv3x3_backward(np.ones((1, 1, 3, 3)), cache, need_dx=False)[0] is None

    def test_shape_errors(self):
        with pytest.raises(ShapeMismatch):
            L.conv3x3_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))
        with pytest.raises(ShapeMismatch):
            L.conv3x3_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 5, 5)), np.zeros(1))


class TestBatchNorm:
    def fresh(self, c):
        return np.zeros(c), np.ones(c)

    def test_standardizes(self):
        x = np.random.default_rng(2).normal(3, 5, size=(8, 3, 4, 4))
        out, _ = L.batchnorm_forward(x, np.ones(3), np.zeros(3), *self.fresh(3), train=True)
        assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-6
        assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-4

    def test_affine(self):
        x = np.random.default_rng(3).normal(size=(16, 2, 3, 3))
        out, _ = L.batchnorm_forward(x, np.full(2, 2.0), np.full(2, 3.0), *self.fresh(2), train=True)
        assert np.allclose(out.mean(axis=(0, 2, 3)), 3) and np.allclose(out.std(axis=(0, 2, 3)), 2, atol=1e-4)

    def test_running_stats(self):
        x = np.random.default_rng(4).normal(1, 2, size=(10, 2))
        rm, rv = self.fresh(2)
        L.batchnorm_forward(x, np.ones(2), np.zeros(2), rm, rv, train=True)
        assert np.allclose(rm, 0.1 * x.mean(axis=0)) and np.allclose(rv, 0.9 + 0.1 * x.var(axis=0))
        out, _ = L.batchnorm_forward(x, np.ones(2), np.zeros(2), rm, rv, train=False)
        assert np.allclose(out, (x - rm) / np.sqrt(rv + L.BN_EPS))

    def test_single_value(self):
        with pytest.raises(DegenerateBatch):
            L.batchnorm_forward(np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2), *self.fresh(2), train=True)

    @pytest.mark.parametrize("shape", [(2, 4, 3, 3), (3, 2, 2, 2), (5, 3), (2, 1, 4, 1), (7, 2)])
    @pytest.mark.parametrize("train_mode", [True, False])
    def test_gradcheck(self, shape, train_mode):
        rng = np.random.default_rng(len(shape) * 10 + shape[0])
        c = shape[1]
        x, g, be = rng.normal(size=shape), rng.normal(size=c), rng.normal(size=c)
        rm, rv = rng.normal(size=c), rng.uniform(0.5, 2, size=c)
        r = rng.normal(size=shape)

        def f():
            return proj_loss(L.batchnorm_forward(x, g, be, rm.copy(), rv.copy(), train_mode)[0], r)

        _, cache = L.batchnorm_forward(x, g, be, rm.copy(), rv.copy(), train_mode)
        dx, dg, db = L.batchnorm_backward(r, cache)
        assert max_rel_error(dx, numeric_grad(f, x)) < 1e-4
        assert max_rel_error(dg, numeric_grad(f, g)) < 1e-4
        assert max_rel_error(db, numeric_grad(f, be)) < 1e-4


class TestPointwise:
    def test_relu(self):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 3.0])
        out, _ = L.relu_forward(x)
        assert out.tolist() == [0, 0, 0, 0.5, 3.0]

    def test_maxpool_shape(self):
        out, _ = L.maxpool2x2_forward(np.zeros((1, 32, 16, 16)))
        assert out.shape == (1, 32, 8, 8)

    def test_maxpool_tie_first(self):
        x = np.ones((1, 1, 2, 2))
        out, cache = L.maxpool2x2_forward(x)
        d = L.maxpool2x2_backward(np.full((1, 1, 1, 1), 5.0), cache)
        assert d[0, 0].tolist() == [[5, 0], [0, 0]]

    def test_maxpool_odd(self):
        with pytest.raises(ShapeMismatch):
            L.maxpool2x2_forward(np.zeros((1, 1, 3, 4)))

    @pytest.mark.parametrize("shape", [(1, 1, 2, 2), (2, 3, 4, 4), (1, 2, 6, 2), (3, 1, 2, 8), (2, 2, 4, 6)])
    def test_gradcheck_relu_pool(self, shape):
        rng = np.random.default_rng(shape[2] * 7 + shape[3])
        # values spaced well beyond h so no kink or argmax flip happens under perturbation
        n = int(np.prod(shape))
        x = (rng.permutation(n) - n / 2 + 0.5).reshape(shape) * 0.01
        r = rng.normal(size=shape)
        rp = rng.normal(size=(shape[0], shape[1], shape[2] // 2, shape[3] // 2))
        f_relu = lambda: proj_loss(L.relu_forward(x)[0], r)
        f_pool = lambda: proj_loss(L.maxpool2x2_forward(x)[0], rp)
        _, c_relu = L.relu_forward(x)
        _, c_pool = L.maxpool2x2_forward(x)
        assert max_rel_error(L.relu_backward(r, c_relu), numeric_grad(f_relu, x)) < 1e-4
        assert max_rel_error(L.maxpool2x2_backward(rp, c_pool), numeric_grad(f_pool, x)) < 1e-4

    @pytest.mark.parametrize("dims", [(1, 3, 2), (4, 5, 3), (2, 1, 6), (3, 7, 1), (5, 4, 4)])
    def test_gradcheck_fc(self, dims):
        n, i, o = dims
        rng = np.random.default_rng(i * 13 + o)
        x, w, b, r = rng.normal(size=(n, i)), rng.normal(size=(o, i)), rng.normal(size=o), rng.normal(size=(n, o))
        f = lambda: proj_loss(L.fc_forward(x, w, b)[0], r)
        dx, dw, db = L.fc_backward(r, L.fc_forward(x, w, b)[1])
        assert max_rel_error(dx, numeric_grad(f, x)) < 1e-4
        assert max_rel_error(dw, numeric_grad(f, w)) < 1e-4
        assert max_rel_error(db, numeric_grad(f, b)) < 1e-4

    def test_gradcheck_fc_full_width(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 4096))
        w = rng.normal(size=(1024, 4096)) * 0.02
        b = rng.normal(size=1024)
        r = rng.normal(size=(2, 1024))
        f = lambda: proj_loss(L.fc_forward(x, w, b)[0], r)
        dx, dw, _ = L.fc_backward(r, L.fc_forward(x, w, b)[1])
        coords = rng.choice(w.size, 20, replace=False).tolist()
        assert max_rel_error(dw, numeric_grad(f, w, coords=coords)) < 1e-4
        assert max_rel_error(dx, numeric_grad(f, x, coords=list(range(0, 8192, 411)))) < 1e-4


class TestSoftmax:
    def test_equal_logits(self):
        loss, p = L.softmax_xent(np.zeros((3, 2)), [0, 1, 0])
        assert np.allclose(p, 0.5) and abs(loss - math.log(2)) < 1e-15

    def test_confident(self):
        loss, _ = L.softmax_xent(np.array([[30.0, -30.0]]), [0])
        assert loss < 1e-12

    def test_extreme_logits_finite(self):
        loss, p = L.softmax_xent(np.array([[1e4, -1e4], [-1e4, 1e4]]), [1, 0])
        assert np.isfinite(loss) and np.isfinite(p).all()

    @pytest.mark.parametrize("n", [1, 2, 3, 5, 8])
    def test_gradcheck(self, n):
        rng = np.random.default_rng(n)
        z = rng.normal(size=(n, 2)) * 3
        y = rng.integers(0, 2, n)
        _, p = L.softmax_xent(z, y)
        num = numeric_grad(lambda: L.softmax_xent(z, y)[0], z)
        assert max(abs(L.softmax_xent_backward(p, y).reshape(-1)[i] - v) for i, v in num.items()) < 1e-6


class TestNetwork:
    @pytest.mark.parametrize("batch", [1, 64])
    def test_table_shapes(self, batch):
        assert XmasNet(NetworkConfig()).output_shapes(batch) == TABLE
        assert NetworkConfig().layer_shapes() == TABLE

    def test_fc1_width(self):
        assert NetworkConfig().param_shapes()["fc1.weight"] == (1024, 4096)

    def test_bad_input(self):
        with pytest.raises(ShapeMismatch):
            XmasNet(TINY).forward(np.zeros((1, 3, 9, 9)))

    def test_end_to_end_gradcheck(self):
        net = XmasNet(TINY, seed=1, dtype=np.float64)
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 3, 8, 8))
        y = np.array([0, 1, 1])

        def f():
            snap = {k: v.copy() for k, v in net.buffers.items()}
            loss = L.softmax_xent(net.forward(x, train=True), y)[0]
            net.buffers.update(snap)
            return loss

        logits = net.forward(x, train=True)
        _, p = L.softmax_xent(logits, y)
        dx, grads = net.backward(L.softmax_xent_backward(p, y))
        assert max_rel_error(dx, numeric_grad(f, x, coords=list(range(0, x.size, 7)))) < 1e-4
        for name in ("conv1.weight", "bn2.gamma", "conv4.bias", "fc1.weight", "fc3.bias"):
            arr = net.params[name]
            coords = list(range(0, arr.size, max(1, arr.size // 12)))
            assert max_rel_error(grads[name], numeric_grad(f, arr, coords=coords)) < 1e-4, name

    def test_predict_properties(self):
        net = XmasNet(TINY, seed=2)
        x = np.random.default_rng(0).normal(size=(5, 3, 8, 8)).astype(np.float32)
        p = net.predict_proba(np.concatenate([x, x[:1]]))
        assert np.all((p >= 0) & (p <= 1)) and np.abs(p.sum(axis=1) - 1).max() < 1e-6
        assert p[0, 1] == p[5, 1]
        net.params["fc3.weight"][:] = 0
        net.params["fc3.bias"][:] = 0
        assert np.all(predict(net, x) == 0.5)

    def test_input_grad_finite(self):
        net = XmasNet(TINY, seed=3)
        x = np.random.default_rng(1).normal(size=(2, 3, 8, 8)).astype(np.float32) * 100
        _, p = L.softmax_xent(net.forward(x, train=True), [0, 1])
        dx, _ = net.backward(L.softmax_xent_backward(p, [0, 1]))
        assert np.isfinite(dx).all()


class TestAdam:
    def test_zero_grad_noop(self):
        p = {"w": np.array([1.0, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState(), TrainConfig(weight_decay=0))
        assert p["w"].tolist() == [1.0, -2.0]

    def test_first_step_size(self):
        cfg = TrainConfig(weight_decay=0)
        p = {"w": np.zeros(4)}
        adam_step(p, {"w": np.full(4, 0.3)}, AdamState(), cfg)
        step = np.abs(p["w"])
        # m_hat = g, v_hat = g^2 -> lr * g / (g + eps)
        assert np.all((step >= 0.999 * cfg.learning_rate) & (step <= cfg.learning_rate))

    def test_weight_decay_coupled(self):
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5)
        p = {"w": np.array([2.0])}
        adam_step(p, {"w": np.array([0.0])}, AdamState(), cfg)
        # g' = 0.5 * 2 = 1 > 0, first step moves by ~lr against it
        assert abs(p["w"][0] - (2.0 - 0.1 / (1 + 1e-8))) < 1e-12

    def test_counter_and_nonfinite(self):
        s = AdamState()
        p = {"w": np.zeros(2)}
        adam_step(p, {"w": np.ones(2)}, s, TrainConfig())
        assert s.t == 1
        with pytest.raises(NonFiniteGradient):
            adam_step(p, {"w": np.array([np.nan, 0])}, s, TrainConfig())
        assert s.t == 1

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(beta1=1.0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)

    def test_loss_decreases(self):
        net = XmasNet(TINY, seed=4)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(8, 3, 8, 8)).astype(np.float32)
        y = np.array([0, 1] * 4)
        cfg = TrainConfig(learning_rate=1e-3)
        state = AdamState()
        losses = []
        for _ in range(11):
            loss, grads = net.loss_and_grads(x, y)
            losses.append(loss)
            adam_step(net.params, grads, state, cfg)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_deterministic(self):
        def run():
            net = XmasNet(TINY, seed=7)
            x = np.random.default_rng(3).normal(size=(4, 3, 8, 8)).astype(np.float32)
            s = AdamState()
            for _ in range(3):
                _, g = net.loss_and_grads(x, [0, 1, 0, 1])
                adam_step(net.params, g, s, TrainConfig(learning_rate=1e-3))
            return net.snapshot()
        a, b = run(), run()
        assert all(np.array_equal(a[k], b[k]) for k in a)


def toy_samples(n_lesions, seed, signal=True, views=3):
    """Per-lesion patches whose mean sign carries the label when ``signal``."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n_lesions) % 2
    xs, ys, keys, vidx = [], [], [], []
    for i, y in enumerate(labels):
        for v in range(views):
            shift = (1.0 if y else -1.0) if signal else 0.0
            xs.append(rng.normal(shift, 1.0, size=(3, 8, 8)))
            ys.append(y)
            keys.append((f"c{i:03d}", "1"))
            vidx.append(v)
    return SampleSet(np.array(xs, np.float32), np.array(ys), keys, np.array(vidx))


class TestTrain:
    def test_separable(self):
        cfg = TrainConfig(learning_rate=1e-3, batch_size=16, max_steps=60, eval_every=10, patience=3)
        res = train(XmasNet(TINY, seed=0), toy_samples(40, 0), toy_samples(20, 1), cfg)
        assert res.best_auc >= 0.95
        assert res.history[0]["step"] == 10
        assert lesion_auc(res.net, toy_samples(20, 1))[0] == res.best_auc

    def test_deterministic(self):
        cfg = TrainConfig(learning_rate=1e-3, batch_size=8, max_steps=12, eval_every=4, patience=2, seed=3)
        runs = [train(XmasNet(TINY, seed=0), toy_samples(12, 0), toy_samples(6, 1), cfg) for _ in range(2)]
        a, b = (r.net.snapshot() for r in runs)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert runs[0].history == runs[1].history

    def test_patience_stops(self):
        cfg = TrainConfig(learning_rate=1e-3, batch_size=8, max_steps=500, eval_every=1, patience=2)
        res = train(XmasNet(TINY, seed=0), toy_samples(12, 0), toy_samples(6, 1), cfg)
        assert len(res.history) < 500
        assert res.history[-1]["step"] - res.best_step == 2

    def test_unlabeled_rejected(self):
        s = toy_samples(4, 0)
        s.y[0] = -1
        with pytest.raises(ValueError):
            train(XmasNet(TINY), s, s, TrainConfig(max_steps=1))


class TestModelFile:
    def test_roundtrip_bitwise(self, tmp_path):
        net = XmasNet(TINY, seed=11)
        net.buffers["bn1.running_var"][:] = 2.5
        path = save_model(net, tmp_path / "m.json")
        back = load_model(path)
        x = np.random.default_rng(0).normal(size=(100, 3, 8, 8)).astype(np.float32)
        assert np.array_equal(net.predict_proba(x), back.predict_proba(x))
        assert back.config == TINY

    def test_payload_layout(self, tmp_path):
        net = XmasNet(TINY, seed=12)
        path = save_model(net, tmp_path / "m.json")
        manifest = json.loads(path.read_text())
        raw = (tmp_path / "m.f32").read_bytes()
        entry = next(t for t in manifest["tensors"] if t["name"] == "conv2.weight")
        n = int(np.prod(entry["shape"]))
        w = np.frombuffer(raw, "<f4", n, entry["offset"]).reshape(entry["shape"])
        assert entry["shape"] == [3, 2, 3, 3] and np.array_equal(w, net.params["conv2.weight"])

    def test_truncated(self, tmp_path):
        path = save_model(XmasNet(TINY), tmp_path / "m.json")
        data = (tmp_path / "m.f32").read_bytes()
        (tmp_path / "m.f32").write_bytes(data[:-4])
        with pytest.raises(ChecksumMismatch):
            load_model(path)

    def test_wrong_shape(self, tmp_path):
        path = save_model(XmasNet(TINY), tmp_path / "m.json")
        m = json.loads(path.read_text())
        m["tensors"][0]["shape"] = [9, 9]
        path.write_text(json.dumps(m))
        with pytest.raises(ShapeMismatch):
            load_model(path)

    def test_version(self, tmp_path):
        path = save_model(XmasNet(TINY), tmp_path / "m.json")
        m = json.loads(path.read_text())
        m["format_version"] = 99
        path.write_text(json.dumps(m))
        with pytest.raises(VersionMismatch):
            load_model(path)
