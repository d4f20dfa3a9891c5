import numpy as np
import pytest

from conftest import assert_grad_close, central_diff
from pff import trainer as tr
from pff.checkpoint import load_checkpoint, read_header
from pff.degradation import DegradeSpec
from pff.errors import NumericalError
from pff.flow import apply_flow, pad_replicate
from pff.image import PSNR_CAP_DB, psnr, ssim
from pff.optim import TrainState, adam_step
from pff.predictor import NetConfig, build_network, identity_network

SMALL_NET = dict(k=3, deep_depth=3, deep_width=4, pool_before=(1,), upsample_before=(2,), shallow_depth=1, shallow_width=2, fuse_width=4)


def small_cfg(task="motion-blur", steps=6, **kw):
    spec = {
        "motion-blur": DegradeSpec(task="motion-blur", max_len=3, kernel_size=3, seed=2),
        "jpeg": DegradeSpec(task="jpeg", qf=10, seed=2),
        "super-resolution": DegradeSpec(task="super-resolution", sr_factor=2, seed=2),
    }[task]
    net = NetConfig(**{**SMALL_NET, **kw.pop("net", {})})
    opts = dict(patch_size=8, batch_size=2, eval_every=3, tile=8)
    opts.update(kw)
    return tr.TrainConfig(net=net, degrade=spec, steps=steps, **opts)


class TestLoss:
    def test_equal(self):
        x = np.random.default_rng(0).random((2, 1, 4, 4))
        loss, g = tr.l1_loss(x, x.copy())
        assert loss == 0 and np.all(g == 0)

    def test_offset(self):
        t = np.random.default_rng(0).random((2, 1, 4, 4))
        loss, g = tr.l1_loss(t + 0.2, t)
        assert loss == pytest.approx(0.2, abs=1e-12)
        np.testing.assert_array_equal(g, 1 / t.size)

    def test_symmetric(self):
        a, b = np.random.default_rng(1).random((2, 3, 5, 5))
        assert tr.l1_loss(a, b)[0] == tr.l1_loss(b, a)[0]

    def test_mismatch(self):
        with pytest.raises(ValueError):
            tr.l1_loss(np.zeros(3), np.zeros(4))

    def test_regularizer_gradient(self):
        c = np.random.default_rng(2).normal(size=(2, 4, 5, 9))
        _, g = tr.flow_regularizer(c, 0.7, 0.3)
        assert_grad_close(g, central_diff(lambda: tr.flow_regularizer(c, 0.7, 0.3)[0], c), 1e-6)
        assert tr.flow_regularizer(c, 0.0, 0.0)[0] == 0


class TestAdam:
    def _net(self):
        return build_network(NetConfig(**SMALL_NET, dtype="float64"))

    def test_first_step_is_sign(self):
        net = self._net()
        before = {k: v.copy() for k, v in net.parameters().items()}
        rng = np.random.default_rng(0)
        grads = {k: rng.normal(size=v.shape) + np.sign(rng.normal(size=v.shape)) for k, v in before.items()}
        state = adam_step(net, grads, TrainState(), lr=1e-3)
        assert state.step == 1
        for k, p in net.parameters().items():
            np.testing.assert_allclose(p - before[k], -1e-3 * np.sign(grads[k]), rtol=1e-5, atol=1e-9)
        assert all(np.all(v >= 0) for v in state.v.values())

    def test_zero_gradient_no_change(self):
        net = self._net()
        before = {k: v.copy() for k, v in net.parameters().items()}
        adam_step(net, {k: np.zeros_like(v) for k, v in before.items()}, TrainState(), weight_decay=0.0)
        for k, p in net.parameters().items():
            assert p.tobytes() == before[k].tobytes()

    def test_weight_decay_shrinks(self):
        net = self._net()
        w = net.parameters()["head.weight"]
        w[...] = 1.0
        adam_step(net, {k: np.zeros_like(v) for k, v in net.parameters().items()}, TrainState(), lr=0.1, weight_decay=1.0)
        np.testing.assert_allclose(w, 0.9)

    def test_deterministic(self):
        nets = [self._net(), self._net()]
        rng = np.random.default_rng(1)
        grads = {k: rng.normal(size=v.shape) for k, v in nets[0].parameters().items()}
        states = [TrainState(), TrainState()]
        for _ in range(3):
            for n, s in zip(nets, states):
                adam_step(n, grads, s)
        for k, p in nets[0].parameters().items():
            assert p.tobytes() == nets[1].parameters()[k].tobytes()

    def test_non_finite_aborts_untouched(self):
        net = self._net()
        before = {k: v.copy() for k, v in net.parameters().items()}
        grads = {k: np.zeros_like(v) for k, v in before.items()}
        grads["fuse.1.bn.gamma"][0] = np.nan
        with pytest.raises(NumericalError, match="fuse.1.bn.gamma"):
            adam_step(net, grads, TrainState())
        for k, p in net.parameters().items():
            assert p.tobytes() == before[k].tobytes()


def _position_corpus():
    # every pixel value unique so a crop identifies its source location
    a = (np.arange(20 * 24).reshape(1, 20, 24) + 1) / 1000.0
    b = (np.arange(16 * 16).reshape(1, 16, 16) + 600) / 1000.0
    return [a, b]


class TestSampling:
    def test_replay_identical(self, corpus):
        cfg = small_cfg()
        a = tr.sample_batch(corpus, cfg, np.random.default_rng(5))
        b = tr.sample_batch(corpus, cfg, np.random.default_rng(5))
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()

    def test_crops_inside_sources(self):
        corpus = _position_corpus()
        cfg = small_cfg(batch_size=16)
        _, targets = tr.sample_batch(corpus, cfg, np.random.default_rng(0))
        for t in targets:
            src = corpus[0] if t[0, 0, 0] < 0.6 else corpus[1]
            y, x = np.argwhere(src[0] == t[0, 0, 0])[0]
            np.testing.assert_array_equal(src[:, y : y + 8, x : x + 8], t)

    def test_blur_perturbs(self, corpus):
        cfg = small_cfg(batch_size=8)
        cfg.degrade = DegradeSpec(task="motion-blur", max_len=3, kernel_size=3, gaussian_sigma=1.0)
        inputs, targets = tr.sample_batch(corpus, cfg, np.random.default_rng(1))
        assert all(psnr(t, i) < PSNR_CAP_DB for i, t in zip(inputs, targets))

    def test_errors(self, corpus):
        with pytest.raises(ValueError):
            tr.sample_batch([], small_cfg(), np.random.default_rng(0))
        with pytest.raises(ValueError):
            tr.sample_batch([np.zeros((1, 4, 4))], small_cfg(), np.random.default_rng(0))

    def test_rgb_corpus_to_gray_net(self):
        corpus = [np.random.default_rng(0).random((3, 12, 12))]
        x, t = tr.sample_batch(corpus, small_cfg(), np.random.default_rng(0))
        assert x.shape == t.shape == (2, 1, 8, 8)


class TestConfig:
    def test_text_roundtrip(self, tmp_path):
        cfg = small_cfg(task="jpeg", corpus="data/train", lr=1e-3)
        cfg.save(tmp_path / "t.cfg")
        back = tr.TrainConfig.load(tmp_path / "t.cfg")
        assert back == cfg

    def test_partial_text(self):
        cfg = tr.TrainConfig.from_text("steps=5\nnet.k=5\ndegrade.task=jpeg\n# comment\n")
        assert cfg.steps == 5 and cfg.net.k == 5 and cfg.degrade.task == "jpeg"

    def test_invalid(self):
        with pytest.raises(ValueError):
            small_cfg(patch_size=7)
        with pytest.raises(ValueError):
            small_cfg(batch_size=0)
        with pytest.raises(ValueError):
            tr.TrainConfig.from_text("stepz=5\n")


class TestInference:
    def _net(self, **kw):
        return build_network(NetConfig(**{**SMALL_NET, "seed": 4, **kw})).eval()

    def test_single_tile_matches_forward(self):
        net = self._net()
        x = np.random.default_rng(0).random((1, 12, 16))
        out, flow = tr.infer_tiled(net, x, tile=64)
        coeffs = tr.softmax(net.forward(x), axis=-1)
        np.testing.assert_array_equal(flow.coeffs, coeffs)
        np.testing.assert_allclose(out, apply_flow(flow, x), atol=1e-12)

    @pytest.mark.parametrize("hw", [(5, 7), (8, 8), (13, 30), (1, 1)])
    def test_dims_and_simplex(self, hw):
        x = np.random.default_rng(1).random((1,) + hw)
        out, flow = tr.infer_tiled(self._net(), x, tile=8)
        assert out.shape == x.shape
        assert (flow.height, flow.width) == hw and flow.constraint == "simplex"

    def test_convex_combination(self):
        x = np.random.default_rng(2).random((1, 14, 10))
        out, flow = tr.infer_tiled(self._net(), x, tile=8)
        patches = np.lib.stride_tricks.sliding_window_view(pad_replicate(x[0], 1), (3, 3))
        assert np.all(out[0] >= patches.min(axis=(-1, -2)) - 1e-12)
        assert np.all(out[0] <= patches.max(axis=(-1, -2)) + 1e-12)

    def test_bad_tile(self):
        with pytest.raises(ValueError):
            tr.infer_tiled(self._net(), np.zeros((1, 8, 8)), tile=3)

    def test_direct_mode(self):
        net = self._net(head="direct-image")
        out, flow = tr.infer_tiled(net, np.random.default_rng(0).random((1, 9, 9)), tile=8)
        assert flow is None and out.shape == (1, 9, 9)

    def test_identity_stub_exact(self):
        x = np.random.default_rng(3).random((1, 21, 17))
        out, _ = tr.infer_tiled(identity_network(NetConfig()), x, tile=16)
        assert out.tobytes() == x.tobytes()

    def test_threads_bit_identical(self):
        net = build_network(NetConfig(seed=1)).eval()
        x = np.random.default_rng(4).random((1, 70, 50))
        ref, _ = tr.infer_tiled(net, x, 32, threads=1)
        for t in (2, 3):
            assert tr.infer_tiled(net, x, 32, threads=t)[0].tobytes() == ref.tobytes()

    def test_iterate(self):
        net = self._net()
        x = np.random.default_rng(5).random((1, 10, 11))
        outs = tr.iterate_pff(net, x, 3, tile=8)
        assert len(outs) == 3 and all(o.shape == x.shape for o in outs)
        assert outs[0].tobytes() == tr.infer_tiled(net, x, 8)[0].tobytes()
        assert outs[1].tobytes() == tr.infer_tiled(net, outs[0], 8)[0].tobytes()
        with pytest.raises(ValueError):
            tr.iterate_pff(net, x, 0)


class TestEvaluate:
    def test_identity_stub_equals_baseline(self, corpus):
        for task in ("jpeg", "motion-blur", "super-resolution"):
            pairs = tr.make_pairs(corpus, small_cfg(task).degrade)
            report = tr.evaluate(identity_network(), pairs, tile=16)
            for r, (bad, clean) in zip(report.rows, pairs):
                assert r["psnr"] == r["psnr_input"] == psnr(clean, np.clip(bad, 0, 1))
                assert r["ssim"] == r["ssim_input"] == ssim(clean, np.clip(bad, 0, 1))
            assert report.psnr_gain == 0

    def test_means_are_row_means(self, corpus):
        pairs = tr.make_pairs(corpus, small_cfg("jpeg").degrade)
        report = tr.evaluate(build_network(NetConfig(**SMALL_NET)), pairs, tile=8)
        assert report.mean_psnr == pytest.approx(np.mean([r["psnr"] for r in report.rows]), abs=1e-12)
        assert report.mean_ssim_input == pytest.approx(np.mean([r["ssim_input"] for r in report.rows]), abs=1e-12)
        tsv = report.to_tsv().splitlines()
        assert tsv[0].split("\t") == ["name", "psnr_input", "ssim_input", "psnr", "ssim"]
        assert len(tsv) == len(pairs) + 2 and tsv[-1].startswith("mean\t")

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            tr.evaluate(identity_network(), [(np.zeros((1, 16, 16)), np.zeros((1, 16, 12)))])


class TestTraining:
    def test_runs_and_logs(self, corpus, tmp_path):
        cfg = small_cfg()
        res = tr.train(cfg, corpus, corpus, checkpoint_path=tmp_path / "m.ckpt", log_path=tmp_path / "log.tsv")
        assert len(res.losses) == 6 and all(np.isfinite(res.losses))
        lines = (tmp_path / "log.tsv").read_text().splitlines()
        assert lines[0] == "step\tloss\tpsnr\tssim"
        assert [int(line.split("\t")[0]) for line in lines[1:]] == [3, 6]
        net, state = load_checkpoint(tmp_path / "m.ckpt")
        assert state.step == 6

    @pytest.mark.parametrize("task", ["jpeg", "super-resolution"])
    def test_free_and_direct_modes(self, corpus, task):
        for net_kw in ({"constraint": "free"}, {"head": "direct-image"}):
            res = tr.train(small_cfg(task, steps=3, net=net_kw), corpus)
            assert len(res.losses) == 3

    def test_bit_identical_checkpoints(self, corpus, tmp_path):
        cfg = small_cfg(steps=5)
        tr.train(cfg, corpus, checkpoint_path=tmp_path / "a.ckpt")
        tr.train(cfg, corpus, checkpoint_path=tmp_path / "b.ckpt")
        tr.train(cfg, corpus, checkpoint_path=tmp_path / "c.ckpt", threads=3)
        a = (tmp_path / "a.ckpt").read_bytes()
        assert a == (tmp_path / "b.ckpt").read_bytes() == (tmp_path / "c.ckpt").read_bytes()

    def test_resume_matches_uninterrupted(self, corpus, tmp_path):
        full = tr.train(small_cfg(steps=6), corpus, checkpoint_path=tmp_path / "full.ckpt")
        tr.train(small_cfg(steps=3), corpus, checkpoint_path=tmp_path / "half.ckpt")
        net, state = load_checkpoint(tmp_path / "half.ckpt")
        # float32 network: the checkpoint holds exact parameter and moment values
        resumed = tr.train(small_cfg(steps=6), corpus, net=net.train(), state=state)
        for k, p in full.net.parameters().items():
            assert p.tobytes() == resumed.net.parameters()[k].tobytes()

    def test_divergence_keeps_last_checkpoint(self, corpus, tmp_path, monkeypatch):
        real = tr.l1_loss
        calls = {"n": 0}

        def flaky(pred, target):
            calls["n"] += 1
            loss, g = real(pred, target)
            return (float("nan") if calls["n"] == 4 else loss), g

        monkeypatch.setattr(tr, "l1_loss", flaky)
        cfg = small_cfg(steps=6, checkpoint_every=2)
        with pytest.raises(NumericalError):
            tr.train(cfg, corpus, checkpoint_path=tmp_path / "m.ckpt")
        header, _ = read_header(tmp_path / "m.ckpt")
        assert header["step"] == 2
