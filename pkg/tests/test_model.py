import numpy as np
import pytest

from sanet.checks import end_to_end_check
from sanet.errors import ConfigurationError, FormatError
from sanet.model import (
    ModelConfig,
    ToySANet,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    model_state,
    sam_forward,
    save_checkpoint,
    superpixel_ground_truth,
)
from sanet.superpixel import SuperpixelMap, compact_labels, sp_paint
from sanet.tensor import Graph, Tensor, conv2d

SMALL = ModelConfig(height=28, width=28, base_channels=4, seed=3)


def random_map(seed, size=28, regions=10):
    labels = compact_labels(np.random.default_rng(seed).integers(0, regions, (size, size)))
    return SuperpixelMap.from_labels(labels)


def image(seed, n=2, size=28):
    return Tensor(np.random.default_rng(seed).standard_normal((n, 3, size, size)).astype(np.float32))


class TestConfig:
    def test_divisibility(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(height=100, width=140)

    def test_bad_mode(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(sam_mode="mul")


class TestArchitecture:
    def test_default_shapes(self):
        model = ToySANet()
        spmap = random_map(0, 140, 50)
        x = Tensor(np.zeros((1, 3, 140, 140), np.float32))
        feats = model.stage_b(model.stage_a(model.stem(x, "train"), "train"), "train")
        assert feats.shape == (1, 64, 35, 35)
        out = model.forward(x, (spmap,))
        assert out.pixel_logits.shape == (1, 5, 140, 140)
        assert out.probabilities.shape == (spmap.region_count, 5)

    def test_parameter_count_and_determinism(self):
        a, b = ToySANet(SMALL), ToySANet(SMALL)
        assert a.parameter_count() == b.parameter_count()
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.name == pb.name
            np.testing.assert_array_equal(pa.data, pb.data)
        assert ToySANet().parameter_count() == 107893

    def test_unique_names(self):
        names = [p.name for p in ToySANet(SMALL).parameters()]
        assert len(names) == len(set(names))

    def test_outputs(self):
        model = ToySANet(SMALL)
        maps = (random_map(1), random_map(2))
        out = model.forward(image(0), maps)
        p = out.probabilities.data
        assert np.all((p >= 0) & (p <= 1))
        for n, m in enumerate(maps):
            painted = out.pixel_probabilities[n]
            np.testing.assert_array_equal(painted, sp_paint(out.sample_probabilities(n), m))

    def test_eval_deterministic(self):
        model = ToySANet(SMALL)
        maps = (random_map(1), random_map(1))
        model.forward(image(0), maps, mode="train")
        x = image(5, n=1)
        twin = Tensor(np.concatenate([x.data, x.data]))
        out = model.forward(twin, maps, mode="eval")
        np.testing.assert_array_equal(out.pixel_probabilities[0], out.pixel_probabilities[1])

    def test_relabeling_invariance(self):
        model = ToySANet(SMALL)
        spmap = random_map(4)
        perm = np.random.default_rng(0).permutation(spmap.region_count)
        relabeled = SuperpixelMap(perm[spmap.labels], spmap.region_count)
        x = image(6, n=1)
        model.forward(image(0), (spmap, spmap))
        a = model.forward(x, (spmap,), mode="eval").pixel_probabilities
        b = model.forward(x, (relabeled,), mode="eval").pixel_probabilities
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-6)

    def test_mismatched_input(self):
        with pytest.raises(ConfigurationError):
            ToySANet(SMALL).forward(image(0, size=56), (random_map(0, 56),) * 2)


class TestSam:
    def test_identity_doubles_region_constant(self):
        spmap = random_map(0, 6, 4)
        vals = np.random.default_rng(0).standard_normal((spmap.region_count, 3))
        f = Tensor(sp_paint(vals, spmap)[None])
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        out = sam_forward(f, (spmap,), lambda m: conv2d(m, w, Tensor(np.zeros(3))))
        np.testing.assert_allclose(out.data, 2 * f.data, rtol=1e-15)

    def test_zero_kernel(self):
        spmap = random_map(0, 6, 4)
        f = Tensor(np.random.default_rng(1).standard_normal((1, 3, 6, 6)))
        out = sam_forward(f, (spmap,), lambda m: conv2d(m, Tensor(np.zeros((3, 3, 1, 1))), Tensor(np.zeros(3))))
        assert out.shape == f.shape and not out.data.any()

    def test_single_region(self):
        spmap = SuperpixelMap(np.zeros((4, 4), int), 1)
        f = Tensor(np.random.default_rng(2).standard_normal((1, 2, 4, 4)))
        out = sam_forward(f, (spmap,), lambda m: m)
        np.testing.assert_allclose(out.data, f.data + f.data.mean(axis=(2, 3), keepdims=True))

    def test_concat_mode_shape(self):
        model = ToySANet(ModelConfig(height=28, width=28, base_channels=4, sam_mode="concat"))
        out = model.forward(image(0), (random_map(0), random_map(1)))
        assert out.pixel_logits.shape == (2, 5, 28, 28)


class TestGroundTruth:
    def test_coverage_rule(self):
        spmap = SuperpixelMap(np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]), 4)
        masks = np.zeros((5, 4, 4), np.uint8)
        masks[0, :2, :2] = 1  # region 0 fully inside
        masks[1, 0, 2:] = 1  # region 1 exactly half
        masks[2, 2, 2] = 1  # region 3 one quarter
        masks[3, 2:, :2] = 1
        masks[4, 2:, :2] = 1  # overlap: region 2 in two classes
        q = superpixel_ground_truth(masks, spmap)
        assert q[0, 0] == 1 and q[1, 0] == 0
        assert q[1, 1] == 1
        assert q[3, 2] == 0
        assert q[2, 3] == 1 and q[2, 4] == 1

    def test_extent_mismatch(self):
        with pytest.raises(ConfigurationError):
            superpixel_ground_truth(np.zeros((5, 3, 3)), SuperpixelMap(np.zeros((4, 4), int), 1))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = ToySANet(SMALL)
        model.forward(image(0), (random_map(0), random_map(1)))
        for p in model.parameters():
            p.m1 = np.random.default_rng(0).standard_normal(p.data.shape).astype(np.float32)
        path = tmp_path / "a.sanc"
        save_checkpoint(path, model, step=17)
        other = ToySANet(ModelConfig(height=28, width=28, base_channels=4, seed=99))
        assert load_checkpoint(path, other) == 17
        for a, b in zip(model.parameters(), other.parameters()):
            np.testing.assert_array_equal(a.data, b.data)
            np.testing.assert_array_equal(a.m1, b.m1)
        save_checkpoint(tmp_path / "b.sanc", other, step=17)
        assert (tmp_path / "b.sanc").read_bytes() == path.read_bytes()

    def test_layout(self):
        blob = encode_checkpoint({"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
        assert blob[:4] == b"SANC"
        assert blob[4:12] == b"\x01\x00\x00\x00\x01\x00\x00\x00"
        assert blob[12:15] == b"\x01\x00w"
        assert blob[15:17] == b"\x00\x02"
        assert len(blob) == 17 + 8 + 24

    def test_state_names(self):
        names = list(model_state(ToySANet(SMALL), step=3))
        assert names[0] == "stem.conv.weight"
        assert "stem.conv.weight.m1" in names and names[-1] == "optimizer.step"
        assert not any(n.endswith("running_mean") for n in names)

    def test_bad_magic(self):
        with pytest.raises(FormatError) as err:
            decode_checkpoint(b"NOPE" + bytes(8))
        assert err.value.offset == 0

    def test_truncated(self):
        blob = encode_checkpoint({"w": np.ones(4, np.float32)})
        with pytest.raises(FormatError, match="truncated"):
            decode_checkpoint(blob[:-1])

    def test_shape_mismatch(self, tmp_path):
        path = tmp_path / "a.sanc"
        save_checkpoint(path, ToySANet(SMALL))
        with pytest.raises(ConfigurationError):
            load_checkpoint(path, ToySANet(ModelConfig(height=28, width=28, base_channels=8)))


class TestEndToEndGradient:
    def test_small_sweep(self):
        rep = end_to_end_check(trials=3, seed=1)
        assert rep.passed, rep.lines()

    def test_backward_reaches_every_parameter(self):
        model = ToySANet(SMALL)
        maps = (random_map(1), random_map(2))
        with Graph() as g:
            out = model.forward(image(0), maps)
        g.backward(out.probabilities, np.ones(out.probabilities.shape, np.float32))
        assert all(p.grad is not None for p in model.parameters())
