import numpy as np
import pytest

from gridflow import tensor as T
from gridflow.roadmask import RoadMasks, apply_masks
from gridflow.tensor import Tensor, grad_check
from gridflow.unet import (
    ArchConfig,
    ArchitectureError,
    ModelParams,
    as_tensors,
    build_model,
    census,
    dense_block_forward,
    dense_block_reference,
    expected_shapes,
    forward,
    forward_tensors,
    layer_plan,
    predict,
)

TINY = ArchConfig(depth=2, growth=2, base_channels=3, layers_per_block=2)


@pytest.fixture
def rng():
    return np.random.default_rng(11)


@pytest.fixture(scope="module")
def desk():
    return build_model(ArchConfig(), init_seed=0)


class TestBuild:
    def test_deterministic(self):
        a, b = build_model(TINY, 5), build_model(TINY, 5)
        assert a.equals(b)
        assert not a.equals(build_model(TINY, 6))

    def test_desk_census(self, desk):
        assert census(desk) == {"block_convs": 32, "blocks": 8, "bottleneck": 1, "transpose": 7, "head": 1}
        names = desk.names()
        assert sum(n.startswith("block") and n.endswith(".weight") for n in names) == 8 * 4

    def test_depth_eight_rejects_64px(self):
        with pytest.raises(ArchitectureError):
            build_model(ArchConfig(depth=8), 0, height=64, width=64)
        build_model(ArchConfig(depth=8), 0, height=128, width=128)

    def test_skip_wiring(self):
        cfg = ArchConfig()
        plan = {s.name: s for s in layer_plan(cfg)}
        for i in range(cfg.depth - 1):
            n = cfg.depth - 1 - i
            up = plan[f"up{i}"]
            block_last = plan[f"block{n}.conv{cfg.layers_per_block - 1}"]
            assert up.resolution == block_last.resolution
            incoming = plan["bottleneck"].out_channels if i == 0 else plan[f"up{i - 1}"].out_channels
            assert up.in_channels == incoming + block_last.out_channels
        assert plan["head"].in_channels == plan[f"up{cfg.depth - 2}"].out_channels + plan["block0.conv3"].out_channels
        assert plan["head"].out_channels == 48 and plan["head"].kernel == 1

    def test_widths_come_from_config(self):
        cfg = ArchConfig(depth=3, base_channels=5, growth=7)
        shapes = expected_shapes(cfg)
        assert shapes["block2.conv0.weight"][0] == 5 + 2 * 7
        # later layers read concat(previous output, block input)
        assert shapes["block1.conv2.weight"][1] == (5 + 7) + 5

    def test_init_scale(self, desk):
        w = desk.arrays["block3.conv1.weight"]
        bound = np.sqrt(6 / (w.shape[1] * 9))
        assert np.abs(w).max() <= bound and np.abs(w).max() > 0.9 * bound
        assert not desk.arrays["head.bias"].any()

    def test_checkpoint_round_trip(self, tmp_path):
        p = build_model(TINY, 1)
        p.save(tmp_path / "m.gfck")
        assert ModelParams.load(tmp_path / "m.gfck", TINY).equals(p)
        with pytest.raises(ArchitectureError):
            ModelParams.load(tmp_path / "m.gfck", ArchConfig(depth=2, growth=3, base_channels=3, layers_per_block=2))


class TestDenseBlock:
    def test_preserves_extent(self, rng):
        p = build_model(TINY, 0)
        x = Tensor(rng.random((2, 109, 6, 10)).astype(np.float32))
        out = dense_block_forward(x, as_tensors(p), 0, TINY.layers_per_block)
        assert out.shape == (2, 3, 6, 10)

    def test_zero_weights_give_zero(self, rng):
        p = build_model(TINY, 0)
        zeros = {k: Tensor(np.zeros_like(v)) for k, v in p.arrays.items()}
        out = dense_block_forward(Tensor(rng.random((1, 109, 4, 4)).astype(np.float32)), zeros, 0, 2)
        assert out.shape[1] == 3 and not out.data.any()

    def test_matches_literal_concat(self, rng):
        cfg = ArchConfig(depth=2, growth=3, base_channels=4, layers_per_block=4, in_channels=7)
        p = build_model(cfg, 2, dtype=np.float64)
        x = rng.random((2, 7, 6, 6))
        results = []
        for fn in (dense_block_forward, dense_block_reference):
            weights = as_tensors(p, requires_grad=True)
            xt = Tensor(x.copy(), requires_grad=True)
            out = fn(xt, weights, 0, 4)
            T.tensor_sum(out).backward()
            results.append((out.data, xt.grad, {k: w.grad for k, w in weights.items() if w.grad is not None}))
        (o1, g1, w1), (o2, g2, w2) = results
        np.testing.assert_allclose(o1, o2, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-12)
        assert w1.keys() == w2.keys()
        for k in w1:
            np.testing.assert_allclose(w1[k], w2[k], rtol=1e-11, atol=1e-12)


class TestForward:
    def test_shape_contract(self, rng):
        p = build_model(ArchConfig(depth=3, growth=2, base_channels=2, layers_per_block=1), 0)
        assert forward(p, rng.random((109, 8, 12))).shape == (48, 8, 12)
        assert forward(p, rng.random((2, 109, 8, 12))).shape == (2, 48, 8, 12)

    def test_miniature_shape_chain(self, rng):
        p = build_model(TINY, 0)
        trace = []
        forward_tensors(as_tensors(p), TINY, Tensor(rng.random((1, 109, 4, 4)).astype(np.float32)), trace)
        assert trace == [
            ("block0", (1, 3, 4, 4)),
            ("block1", (1, 5, 2, 2)),
            ("bottleneck", (1, 5, 2, 2)),
            ("up0", (1, 3, 4, 4)),
            ("head", (1, 48, 4, 4)),
        ]

    def test_desk_shape_chain(self, desk):
        trace = []
        x = Tensor(np.zeros((1, 109, 128, 128), dtype=np.float32))
        forward_tensors(as_tensors(desk), desk.arch, x, trace)
        blocks = dict(trace[:8])
        for j in range(8):
            assert blocks[f"block{j}"] == (1, 16 + 16 * j, 128 >> j, 128 >> j)
        ups = dict(trace[9:16])
        for i in range(7):
            n = 7 - i  # block consumed by this stage
            assert ups[f"up{i}"][2] == 2 * blocks[f"block{n}"][2]
            assert ups[f"up{i}"][1] == 16 + 16 * (n - 1)
        assert trace[-1] == ("head", (1, 48, 128, 128))

    def test_end_to_end_gradient(self, rng):
        cfg = ArchConfig(depth=2, growth=2, base_channels=3, layers_per_block=2)
        p = build_model(cfg, 4, dtype=np.float64)
        names = list(p.arrays)
        x = Tensor(rng.random((1, 109, 8, 8)))
        y = Tensor(rng.random((1, 48, 8, 8)))
        inputs = [Tensor(p.arrays[k].copy(), requires_grad=True) for k in names]

        def loss(*ws):
            return T.mse_loss(forward_tensors(dict(zip(names, ws)), cfg, x), y)

        rep = grad_check(loss, inputs, tolerance=1e-3, max_coords=12, seed=1)
        assert rep["pass"], rep["failures"][:3]

    def test_deterministic(self, rng):
        p = build_model(TINY, 0)
        x = rng.random((2, 109, 8, 8)).astype(np.float32)
        assert forward(p, x).tobytes() == forward(p, x).tobytes()

    def test_wrong_channels(self, rng):
        with pytest.raises(ArchitectureError):
            forward(build_model(TINY, 0), rng.random((1, 10, 4, 4)))


class TestPredict:
    @pytest.fixture
    def model(self):
        return build_model(TINY, 3)

    def test_unmasked_is_clamped_forward(self, model, rng):
        x = rng.random((109, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(predict(model, x), np.clip(forward(model, x), 0, 1))

    def test_zero_masks(self, model, rng):
        x = rng.random((109, 8, 8)).astype(np.float32)
        assert not predict(model, x, RoadMasks("c", np.zeros((4, 8, 8)))).any()

    def test_mask_composition(self, model, rng):
        x = rng.random((109, 8, 8)).astype(np.float32)
        masks = RoadMasks("c", rng.integers(0, 2, (4, 8, 8)))
        np.testing.assert_array_equal(predict(model, x, masks), apply_masks(predict(model, x), masks))

    def test_pads_odd_extent(self, model, rng):
        out = predict(model, rng.random((109, 7, 9)).astype(np.float32))
        assert out.shape == (48, 7, 9)
