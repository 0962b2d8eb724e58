import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from lesionbench.rng import MASK64, derive_seed, generator, splitmix64
from lesionbench.tensorio import (
    TensorFormatError,
    header_bytes,
    load_tensor,
    open_tensor_for_write,
    read_tensor,
    read_tensor_typed,
    save_tensor,
    write_tensor,
)


class TestSeeds:
    def test_splitmix64_reference_stream(self):
        # published SplitMix64 outputs for the state 1234567
        expected = [6457827717110365317, 3203168211198807973, 9817491932198370423,
                    4593380528125082431, 16408922859458223821]
        state = 1234567
        for want in expected:
            assert splitmix64(state) == want
            state = (state + 0x9E3779B97F4A7C15) & MASK64

    def test_derive_seed_paths(self):
        assert derive_seed(1, "train", 0) == derive_seed(1, "train", 0)
        seeds = {derive_seed(1, split, j) for split in ("train", "val") for j in range(500)}
        assert len(seeds) == 1000
        assert derive_seed(1, "train", 0) != derive_seed(2, "train", 0)
        assert derive_seed(1, 0, 1) != derive_seed(1, 1, 0)
        assert 0 <= derive_seed(2**70, -1) <= MASK64

    def test_generator_reproducible(self):
        assert np.array_equal(generator(5).random(10), generator(5).random(10))
        assert not np.array_equal(generator(5).random(10), generator(6).random(10))


class TestTensorIO:
    def test_header_layout(self):
        assert header_bytes((2, 3)) == b"TEN1\x02\x02\x00\x00\x00\x03\x00\x00\x00"

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float32, array_shapes(min_dims=1, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
    def test_float_roundtrip(self, arr):
        buf = io.BytesIO()
        write_tensor(buf, arr)
        buf.seek(0)
        back = read_tensor(buf)
        assert back.dtype == np.float32 and np.array_equal(back, arr)

    def test_uint8_and_bool(self, tmp_path):
        mask = np.random.default_rng(0).random((3, 4, 5)) > 0.5
        save_tensor(tmp_path / "m.ten", mask)
        back = load_tensor(tmp_path / "m.ten")
        assert back.dtype == np.uint8 and np.array_equal(back.astype(bool), mask)
        assert (tmp_path / "m.ten").stat().st_size == 4 + 1 + 12 + 60

    def test_float64_stored_as_float32(self, tmp_path):
        save_tensor(tmp_path / "x.ten", np.array([0.1, 0.2]))
        assert load_tensor(tmp_path / "x.ten").dtype == np.float32

    def test_concatenated(self):
        buf = io.BytesIO()
        write_tensor(buf, np.ones((2, 2), np.float32))
        write_tensor(buf, np.arange(3, dtype=np.float32))
        buf.seek(0)
        assert read_tensor_typed(buf).shape == (2, 2)
        assert read_tensor_typed(buf).tolist() == [0, 1, 2]

    def test_mmap_write_and_read(self, tmp_path):
        mm = open_tensor_for_write(tmp_path / "big.ten", (4, 6), np.float32)
        mm[2] = 7
        mm.flush()
        del mm
        back = load_tensor(tmp_path / "big.ten", mmap=True)
        assert back.shape == (4, 6) and back[2].tolist() == [7] * 6 and not back[0].any()

    @pytest.mark.parametrize("blob", [b"TEN2\x01\x01\x00\x00\x00", b"TEN1\x01\x03\x00\x00\x00ab"])
    def test_malformed(self, blob):
        with pytest.raises(TensorFormatError):
            read_tensor(io.BytesIO(blob))

    def test_truncated_typed(self):
        buf = io.BytesIO(header_bytes((4,)) + b"\x00" * 8)
        with pytest.raises(TensorFormatError):
            read_tensor_typed(buf)
