import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from caat import autodiff as ad
from caat.autodiff import Tape, Tensor
from caat.container import MAGIC, read_container, write_container
from caat.errors import (ArtifactError, CheckpointMismatch, ConfigError, DimensionError,
                         FormatError, PathError)
from caat.vit import (ParameterStore, ViTConfig, build_model, count_parameters, forward,
                      load_checkpoint, parameter_shapes, save_checkpoint)

from .conftest import SMALL, TINY


def hand_count(c: ViTConfig):
    """Closed-form parameter count written out term by term."""
    d, h, p = c.dim, c.dim * c.mlp_ratio, c.patch_size
    tokens = (c.image_size // p) ** 2 + 1
    stem = (c.channels * p * p * d + d) + d + tokens * d
    block = 2 * 2 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d)
    return stem + c.depth * block + 2 * d + (d * c.num_classes + c.num_classes)


class TestViTConfig:
    @pytest.mark.parametrize("kwargs, word", [
        (dict(image_size=10, patch_size=4), "divisible"),
        (dict(dim=30, heads=4), "heads"),
        (dict(depth=0), "depth"),
        (dict(num_classes=1), "num_classes"),
    ])
    def test_invalid_config_names_constraint(self, kwargs, word):
        with pytest.raises(ConfigError, match=word):
            ViTConfig(**kwargs)

    def test_dict_round_trip(self):
        assert ViTConfig.from_dict(SMALL.to_dict()) == SMALL


class TestParameterCount:
    def test_desk_example(self):
        # image 8, patch 4, dim 16, depth 2, heads 2, classes 2, mlp 4, 3 channels
        cfg = ViTConfig(image_size=8, patch_size=4, dim=16, depth=2, heads=2, num_classes=2)
        assert count_parameters(cfg) == 7506
        assert build_model(cfg).size == 7506

    @given(st.integers(1, 3), st.sampled_from([8, 16]), st.sampled_from([(8, 2), (16, 4), (12, 3)]),
           st.integers(2, 5), st.integers(1, 4))
    def test_matches_closed_form(self, depth, image, dim_heads, classes, mlp):
        cfg = ViTConfig(image_size=image, patch_size=4, dim=dim_heads[0], heads=dim_heads[1],
                        depth=depth, num_classes=classes, mlp_ratio=mlp)
        assert count_parameters(cfg) == hand_count(cfg)

    def test_vit_base_scale(self):
        cfg = ViTConfig(image_size=224, patch_size=16, dim=768, depth=12, heads=12,
                        num_classes=1000)
        shapes = parameter_shapes(cfg)
        total = sum(int(np.prod(s)) for _, s, _ in shapes)
        backbone = sum(int(np.prod(s)) for p, s, _ in shapes if not p.startswith("head."))
        assert total == hand_count(cfg) == 86_567_656
        # the backbone alone lands in the 85-86M band; the head adds 769k
        assert 85_000_000 <= backbone <= 86_000_000


class TestParameterStore:
    def test_layout(self, small_store):
        paths = small_store.paths
        assert paths[:4] == ["patch_embed.weight", "patch_embed.bias", "cls_token", "pos_embed"]
        assert paths[-2:] == ["head.weight", "head.bias"]
        assert small_store["blocks.1.attn.qkv.weight"].shape == (16, 48)
        assert small_store.size == count_parameters(SMALL)

    def test_flat_index_bijection(self, tiny_store):
        seen = set()
        for path in tiny_store.paths:
            start, stop = tiny_store.offsets(path)
            for offset in range(stop - start):
                index = tiny_store.flat_index(path, offset)
                assert tiny_store.locate(index) == (path, offset)
                seen.add(index)
        assert seen == set(range(tiny_store.size))

    def test_flatten_round_trip(self, tiny_store):
        again = tiny_store.with_flat(tiny_store.flatten())
        assert again.equals(tiny_store)

    def test_unknown_path(self, tiny_store):
        with pytest.raises(PathError):
            tiny_store["blocks.9.attn.qkv.weight"]

    def test_shape_guard(self, tiny_store):
        with pytest.raises(DimensionError):
            tiny_store["head.bias"] = np.zeros(7)

    def test_duplicate_paths_rejected(self):
        with pytest.raises(PathError):
            ParameterStore([("a", np.zeros(2)), ("a", np.zeros(2))], TINY)

    def test_init_statistics(self):
        store = build_model(ViTConfig(dim=64, heads=4))
        w = store["blocks.0.mlp.fc1.weight"]
        assert np.abs(w).max() <= 0.04 + 1e-12
        assert w.std() == pytest.approx(0.0176, rel=0.05)  # 0.02 truncated at 2 sigma
        np.testing.assert_array_equal(store["blocks.0.norm1.weight"], 1.0)
        np.testing.assert_array_equal(store["blocks.0.norm1.bias"], 0.0)
        np.testing.assert_array_equal(store["head.bias"], 0.0)

    def test_deterministic_build(self):
        assert build_model(SMALL).equals(build_model(SMALL))
        other = build_model(ViTConfig(**{**SMALL.to_dict(), "seed": 1}))
        assert not other.equals(build_model(SMALL))


class TestForward:
    def test_zero_images_finite(self, small_store):
        z = small_store(np.zeros((2, 3, 8, 8))).data
        assert z.shape == (2, 2)
        assert np.all(np.isfinite(z))

    def test_batch_independence(self, small_store, rng):
        x = rng.random((4, 3, 8, 8))
        batch = small_store(x).data
        single = small_store(x[2:3]).data
        np.testing.assert_allclose(single[0], batch[2], atol=1e-12, rtol=0)

    def test_permutation_equivariance(self, small_store, rng):
        x = rng.random((5, 3, 8, 8))
        perm = rng.permutation(5)
        np.testing.assert_allclose(small_store(x[perm]).data, small_store(x).data[perm],
                                   atol=1e-12, rtol=0)

    def test_shape_mismatch(self, small_store):
        with pytest.raises(DimensionError):
            small_store(np.zeros((2, 3, 16, 16)))

    def test_pure(self, small_store, rng):
        before = small_store.copy()
        x = rng.random((2, 3, 8, 8))
        x0 = x.copy()
        with Tape() as tape:
            leaves = small_store.leaves(True)
            tape.backward(ad.softmax_cross_entropy(forward(leaves, x, SMALL), [0, 1]))
        assert small_store.equals(before)
        np.testing.assert_array_equal(x, x0)

    def test_input_gradient(self, tiny_store, rng):
        x = rng.random((2, 1, 8, 8))
        w = rng.normal(size=(2, 3))
        fn = lambda images: ad.tensor_sum(forward(tiny_store, images, TINY) * Tensor(w))
        assert ad.gradcheck(fn, [x]) < 1e-4

    def test_parameter_gradient_every_entry(self, tiny_store, tiny_batch):
        x, y = tiny_batch
        names = tiny_store.paths

        def loss(*arrays):
            return ad.softmax_cross_entropy(forward(dict(zip(names, arrays)), x, TINY), y)

        assert ad.gradcheck(loss, [tiny_store[p] for p in names]) < 1e-4


class TestCheckpoint:
    def test_round_trip(self, small_store, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_store, path)
        loaded = load_checkpoint(path, expected=SMALL)
        assert loaded.paths == small_store.paths
        assert loaded.equals(small_store)
        assert loaded.config == SMALL

    def test_bytes_are_stable(self, small_store, tmp_path):
        save_checkpoint(small_store, tmp_path / "a")
        save_checkpoint(load_checkpoint(tmp_path / "a"), tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_wrong_magic(self, small_store, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_store, path)
        data = bytearray(path.read_bytes())
        data[:4] = b"JUNK"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_wrong_version(self, small_store, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_store, path)
        data = bytearray(path.read_bytes())
        data[8:12] = struct.pack("<I", 99)
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="version 99"):
            load_checkpoint(path)

    def test_truncated_reports_offset(self, small_store, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_store, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError, match="byte"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArtifactError):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_mismatch_lists_paths(self, small_store, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_store, path)
        deeper = ViTConfig(**{**SMALL.to_dict(), "depth": 3})
        with pytest.raises(CheckpointMismatch) as info:
            load_checkpoint(path, expected=deeper)
        assert "blocks.2.attn.qkv.weight" in info.value.differing_paths
        assert "blocks.0.attn.qkv.weight" not in info.value.differing_paths
        assert "blocks.2.attn.qkv.weight" in str(info.value)

    def test_mismatch_in_width(self, small_store, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(small_store, path)
        wider = ViTConfig(**{**SMALL.to_dict(), "num_classes": 5})
        with pytest.raises(CheckpointMismatch) as info:
            load_checkpoint(path, expected=wider)
        assert info.value.differing_paths == ["head.bias", "head.weight"]

    def test_not_a_checkpoint(self, tmp_path):
        write_container(tmp_path / "d", {"kind": "dataset"}, [("images", np.zeros(2))])
        with pytest.raises(FormatError, match="not a checkpoint"):
            load_checkpoint(tmp_path / "d")


class TestContainer:
    def test_layout_prefix(self, tmp_path):
        write_container(tmp_path / "c", {"kind": "x"}, [("a", np.arange(3.0))])
        raw = (tmp_path / "c").read_bytes()
        assert raw[:8] == MAGIC
        assert struct.unpack("<I", raw[8:12]) == (1,)

    def test_trailing_bytes(self, tmp_path):
        write_container(tmp_path / "c", {}, [("a", np.arange(3.0))])
        (tmp_path / "c").write_bytes((tmp_path / "c").read_bytes() + b"\0")
        with pytest.raises(FormatError, match="trailing"):
            read_container(tmp_path / "c")

    @given(st.lists(st.tuples(st.text("abc.", min_size=1, max_size=6),
                              st.lists(st.integers(0, 3), max_size=3)), max_size=4))
    def test_round_trip(self, tmp_path_factory, spec):
        rng = np.random.default_rng(0)
        entries = [(name, rng.normal(size=tuple(shape))) for name, shape in spec]
        path = tmp_path_factory.mktemp("c") / "c"
        write_container(path, {"k": 1}, entries)
        header, back = read_container(path)
        assert header == {"k": 1}
        assert [n for n, _ in back] == [n for n, _ in entries]
        for (_, a), (_, b) in zip(entries, back):
            assert a.shape == b.shape
            np.testing.assert_array_equal(a, b)
