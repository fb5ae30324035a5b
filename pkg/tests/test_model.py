import struct
import time

import numpy as np
import pytest

from resmasknet import functional as F
from resmasknet.checkpoint import load_checkpoint, read_entries, save_checkpoint, write_entries
from resmasknet.errors import (
    BuildError,
    CheckpointError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ShapeError,
    UnknownParameterError,
)
from resmasknet.gradcheck import grad_check
from resmasknet.model import (
    MaskingBlock,
    NetworkSpec,
    build_network,
    count_parameters,
    default_spec,
    describe,
    format_table,
    fuse,
    mini_spec,
    network_forward,
    shape_chain,
    trace_shapes,
)
from resmasknet.rng import Rng
from resmasknet.tensor import Tensor, no_grad, precision, tsum

LAYER_SIZES = [
    ("Conv1", "64×112×112"),
    ("MaxPooling", "64×56×56"),
    ("Resmasking Block 1", "64×56×56"),
    ("Resmasking Block 2", "128×28×28"),
    ("Resmasking Block 3", "256×14×14"),
    ("Resmasking Block 4", "512×7×7"),
    ("Average pooling", "512×1×1"),
    ("FC, Softmax", "7"),
]


@pytest.fixture(scope="module")
def image():
    return Tensor(np.random.default_rng(0).normal(size=(1, 3, 224, 224)).astype(np.float32))


class TestShapes:
    def test_forward_chain_matches_table(self, default_net, image):
        t0 = time.perf_counter()
        with no_grad():
            seen = trace_shapes(default_net, image)
        assert time.perf_counter() - t0 < 60
        got = [("×".join(map(str, s))) for _, s in seen]
        assert got == [size for _, size in LAYER_SIZES]

    def test_describe_rows(self, default_net):
        rows = describe(default_net)
        assert [(r.layer, r.output_size) for r in rows] == LAYER_SIZES
        assert sum(r.params for r in rows) == count_parameters(default_net)
        assert "Resmasking Block 4" in format_table(rows)

    def test_batch_of_two(self, mini_net):
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 64, 64)))
        with no_grad():
            logits = network_forward(mini_net, x, "eval")
        assert logits.shape == (2, 7) and np.isfinite(logits.data).all()
        p = F.softmax(logits).data
        assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-6)

    @pytest.mark.parametrize("n", [1, 3, 8])
    def test_chain_any_batch(self, mini_net, n):
        x = Tensor(np.random.default_rng(n).normal(size=(n, 3, 64, 64)))
        with no_grad():
            seen = trace_shapes(mini_net, x, "train" if n > 1 else "eval")
        assert [s for _, s in seen] == [s for _, s in shape_chain(mini_spec())]

    def test_wrong_input_size(self, mini_net):
        with pytest.raises(ShapeError):
            network_forward(mini_net, Tensor(np.zeros((1, 3, 60, 60))))

    def test_build_error_names_stage(self):
        with pytest.raises(BuildError, match="stage 4"):
            shape_chain(NetworkSpec(depths=(4, 3, 2, 3)))
        with pytest.raises(BuildError, match="stage"):
            build_network(NetworkSpec(input_size=16))


class TestParameters:
    def test_stem(self, default_net):
        assert default_net.stem_conv.weight.size + default_net.stem_conv.bias.size == 64 * 3 * 7 * 7 + 64 == 9472

    def test_full_count_window(self, default_net):
        n = count_parameters(default_net)
        assert 121e6 <= n <= 164e6
        assert abs(n / 142.9e6 - 1) <= 0.15

    def test_backbone_count(self):
        n = count_parameters(build_network(default_spec().backbone_only()))
        assert abs(n / 21.2e6 - 1) <= 0.05

    def test_seed_determinism(self):
        a, b = build_network(mini_spec(), seed=3), build_network(mini_spec(), seed=3)
        c = build_network(mini_spec(), seed=4)
        sa, sb, sc = a.state(), b.state(), c.state()
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)
        assert not np.array_equal(sa["stem_conv.weight"], sc["stem_conv.weight"])

    def test_init_contract(self, mini_net):
        for name, p in mini_net.named_parameters():
            if name.endswith(".bias"):
                assert not p.data.any(), name
            elif name.endswith(".gamma"):
                assert np.all(p.data == 1), name
            elif name.endswith(".beta"):
                assert not p.data.any(), name
        w = mini_net.stages[3].residual[0].conv1.weight.data
        fan_in = 32 * 9
        assert abs(w.std() / np.sqrt(2 / fan_in) - 1) < 0.05

    def test_names_unique_and_readable(self, mini_net):
        names = [n for n, _ in mini_net.named_parameters()] + [n for n, _ in mini_net.named_buffers()]
        assert len(names) == len(set(names))
        assert "stem_conv.weight" in names and "fc.weight" in names
        assert "stages.0.mask.down.0.conv1.weight" in names
        assert "stages.3.residual.0.bn1.running_var" in names

    def test_eval_deterministic(self, mini_net):
        x = Tensor(np.random.default_rng(5).normal(size=(1, 3, 64, 64)))
        with no_grad():
            a = network_forward(mini_net, x, "eval").data
            b = network_forward(mini_net, x, "eval").data
        assert np.array_equal(a, b)


class TestMaskingBlock:
    def test_stage4_range(self, default_net):
        fr = Tensor(np.random.default_rng(2).normal(size=(1, 512, 7, 7)).astype(np.float32) * 5)
        with no_grad():
            fm = default_net.stages[3].mask(fr).data
        assert fm.shape == (1, 512, 7, 7)
        assert fm.min() >= 0 and fm.max() <= 1

    def test_zero_head_gives_half(self):
        mb = MaskingBlock(4, 2, Rng(0))
        mb.head.weight.data[:] = 0
        with no_grad():
            fm = mb(Tensor(np.random.default_rng(0).normal(size=(2, 4, 9, 9)))).data
        assert np.all(fm == 0.5)

    def test_range_over_random_parameterizations(self):
        r = np.random.default_rng(7)
        for trial in range(100):
            mb = MaskingBlock(3, 1 + trial % 3, Rng(trial))
            for _, p in mb.named_parameters():
                p.data[:] = r.normal(size=p.shape) * r.choice([0.1, 1.0, 50.0])
            x = Tensor(r.normal(size=(2, 3, 9, 9)) * r.choice([1.0, 100.0]))
            with no_grad():
                fm = mb(x).data
            assert fm.shape == x.shape
            assert fm.min() >= 0.0 and fm.max() <= 1.0

    def test_odd_sizes_restore_shape(self):
        mb = MaskingBlock(2, 1, Rng(0))
        with no_grad():
            assert mb(Tensor(np.zeros((1, 2, 7, 7), np.float32))).shape == (1, 2, 7, 7)

    @pytest.mark.parametrize("training", [True, False])
    def test_depth1_gradients(self, training):
        with precision("f64"):
            mb = MaskingBlock(4, 1, Rng(1))
            mb.train(training)
            x = Tensor(np.random.default_rng(3).normal(size=(1, 4, 7, 7)))
            w = Tensor(np.random.default_rng(4).normal(size=(1, 4, 7, 7)))
            params = [p for _, p in mb.named_parameters()]
            picked = [params[0], params[-2]]  # first encoder conv, head conv
            assert grad_check(lambda x, *_: tsum(mb(x) * w), [x, *picked]) < 1e-3

    def test_wrong_channels(self):
        with pytest.raises(ShapeError):
            MaskingBlock(4, 1, Rng(0))(Tensor(np.zeros((1, 3, 7, 7))))


class TestFusion:
    def _forward(self, net, x, stage, forced=None):
        store = {}

        def tap(name, t):
            if forced is not None and name == f"stage{stage}.mask":
                return Tensor(np.full(t.shape, forced, dtype=t.dtype))
            if name == f"stage{stage}.residual":
                store["fr"] = t.data.copy()
            if name == f"stage{stage}":
                store["fn"] = t.data.copy()
            if name == f"stage{stage}.mask":
                store["fm"] = t.data.copy()
            return t

        with no_grad():
            network_forward(net, x, "eval", tap)
        return store

    def test_arithmetic(self):
        fn = fuse(Tensor(np.array([2.0, -1.0, 0.0])), Tensor(np.array([0.5, 0.25, 1.0])))
        assert fn.data.tolist() == [3.0, -1.25, 0.0]

    @pytest.mark.parametrize("stage", [1, 4])
    def test_zero_and_one_masks(self, default_net, image, stage):
        s0 = self._forward(default_net, image, stage, 0.0)
        assert np.array_equal(s0["fn"], s0["fr"])
        s1 = self._forward(default_net, image, stage, 1.0)
        assert np.array_equal(s1["fn"], 2 * s1["fr"])

    def test_residual_identity_and_lower_bound(self, mini_net):
        x = Tensor(np.random.default_rng(9).normal(size=(2, 3, 64, 64)).astype(np.float32))
        for stage in range(1, 5):
            s = self._forward(mini_net, x, stage)
            fr, fm, fn = s["fr"], s["fm"], s["fn"]
            diff = fn - fr
            ulp = np.spacing(np.maximum(np.abs(fn), np.abs(fr)).astype(np.float32))
            assert np.all(np.abs(diff - fr * fm) <= ulp)
            assert np.all(fr >= 0) and np.all(np.abs(fn) >= np.abs(fr))


class TestCheckpoint:
    def test_round_trip_mini(self, mini_net, tmp_path):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 64, 64)).astype(np.float32))
        with no_grad():
            network_forward(mini_net, x, "train")  # move the running statistics off their defaults
            before = network_forward(mini_net, x, "eval").data
        path = save_checkpoint(mini_net, tmp_path / "m.ckpt")
        net2 = load_checkpoint(path)
        assert net2.spec == mini_net.spec
        s1, s2 = mini_net.state(), net2.state()
        assert s1.keys() == s2.keys()
        assert all(np.array_equal(s1[k], s2[k]) and s1[k].dtype == s2[k].dtype for k in s1)
        with no_grad():
            assert np.array_equal(network_forward(net2, x, "eval").data, before)

    def test_round_trip_f64(self, tmp_path):
        with precision("f64"):
            net = build_network(mini_spec(), dtype="f64")
        path = save_checkpoint(net, tmp_path / "m64.ckpt")
        assert read_entries(path)["fc.weight"].dtype == np.float64
        assert np.array_equal(load_checkpoint(path).fc.weight.data, net.fc.weight.data)

    def test_default_lists_every_name_once(self, default_net, tmp_path):
        path = save_checkpoint(default_net, tmp_path / "d.ckpt")
        raw = path.read_bytes()
        count = struct.unpack_from("<I", raw, 6)[0]
        names = []
        pos = 10
        while pos < len(raw):
            (n,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + n].decode()
            tag, rank = raw[pos + 2 + n], raw[pos + 3 + n]
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 4 + n)
            pos += 4 + n + 4 * rank + int(np.prod(dims, dtype=np.int64)) * (4 if tag == 0 else 8)
            names.append(name)
        assert pos == len(raw) and count == len(names) == len(set(names))
        assert set(names) == set(default_net.state()) | {"meta.geometry"}

    def _saved(self, tmp_path):
        net = build_network(NetworkSpec(input_size=64, channels=(4, 4, 4, 4), blocks=(1, 1, 1, 1), depths=(1, 1, 1, 1)))
        return save_checkpoint(net, tmp_path / "s.ckpt")

    def test_bad_magic(self, tmp_path):
        p = self._saved(tmp_path)
        p.write_bytes(b"XXXX" + p.read_bytes()[4:])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(p)

    def test_bad_version(self, tmp_path):
        p = self._saved(tmp_path)
        raw = bytearray(p.read_bytes())
        raw[4:6] = struct.pack("<H", 2)
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(p)

    @pytest.mark.parametrize("cut", [3, 9, 50, -1])
    def test_truncated(self, tmp_path, cut):
        p = self._saved(tmp_path)
        raw = p.read_bytes()
        p.write_bytes(raw[:cut])
        with pytest.raises(CheckpointFormatError if cut == 3 else CheckpointTruncatedError):
            load_checkpoint(p)

    def test_unknown_name(self, tmp_path):
        p = self._saved(tmp_path)
        entries = read_entries(p)
        entries["stages.9.bogus.weight"] = np.zeros(3, np.float32)
        write_entries(p, entries)
        with pytest.raises(UnknownParameterError):
            load_checkpoint(p)

    def test_errors_are_distinct(self):
        kinds = {CheckpointFormatError, CheckpointVersionError, CheckpointTruncatedError, UnknownParameterError}
        assert len(kinds) == 4 and all(issubclass(k, CheckpointError) for k in kinds)

    def test_not_a_file(self, tmp_path):
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "missing.ckpt")
