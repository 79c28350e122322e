import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cmalab.errors import CorruptCheckpoint, UnsupportedFormat
from cmalab.lattice import BackgroundForm, HermitianField, ScalarField, build_grid, complex_hessian
from cmalab.mage import MAGIC, decode, encode, load_checkpoint, read_field, save_checkpoint, write_field
from cmalab.solver import ProblemSpec, solve_ma


def test_header_layout():
    g = build_grid(2, "reduced", (8, 16))
    data = encode(ScalarField.constant(g, 1.5))
    assert data[:5] == MAGIC
    assert data[5] == 2 and data[6] == 1
    assert data[7:15] == (8).to_bytes(4, "little") + (16).to_bytes(4, "little")
    assert len(data) == 15 + 8 * 128
    assert np.frombuffer(data[15:23], "<f8")[0] == 1.5


grids = st.sampled_from([("reduced", 1, (8,)), ("reduced", 2, (8, 16)), ("full", 1, (8, 8)), ("full", 2, (8, 8, 8, 8))])
floats = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(grids, st.integers(0, 2 ** 32 - 1), floats)
def test_scalar_roundtrip_is_bit_exact(spec, seed, special):
    mode, n, res = spec
    g = build_grid(n, mode, res)
    vals = np.random.default_rng(seed).standard_normal(g.shape) * 1e3
    vals.flat[0] = special
    back = decode(encode(ScalarField(g, vals)))
    assert back.grid == g
    assert back.values.tobytes() == vals.tobytes()


@given(st.integers(0, 2 ** 32 - 1))
def test_hermitian_roundtrip(seed):
    g = build_grid(2, "full", 8)
    rng = np.random.default_rng(seed)
    H = complex_hessian(ScalarField(g, rng.standard_normal(g.shape)))
    back = decode(encode(H), kind="hermitian")
    assert np.array_equal(back.diag, H.diag) and np.array_equal(back.off, H.off)


def test_hermitian_n1_needs_kind():
    g = build_grid(1, "reduced", 16)
    H = HermitianField.constant(g, np.eye(1) * 2.0)
    assert isinstance(decode(encode(H)), ScalarField)
    assert isinstance(decode(encode(H), kind="hermitian"), HermitianField)


def test_truncated_and_bad_headers():
    g = build_grid(1, "reduced", 16)
    data = encode(ScalarField.constant(g, 0.0))
    with pytest.raises(CorruptCheckpoint):
        decode(data[:-3])
    with pytest.raises(CorruptCheckpoint):
        decode(data[:-8])
    with pytest.raises(CorruptCheckpoint):
        decode(data[:6])
    with pytest.raises(CorruptCheckpoint):
        decode(data[:9])
    with pytest.raises(UnsupportedFormat):
        decode(b"MAGE2" + data[5:])
    with pytest.raises(UnsupportedFormat):
        decode(b"XXXXX" + data[5:])
    with pytest.raises(CorruptCheckpoint):
        decode(data[:5] + bytes([3, 0]) + data[7:])
    with pytest.raises(CorruptCheckpoint):
        decode(data[:5] + bytes([2, 1]) + data[7:])
    with pytest.raises(CorruptCheckpoint):
        decode(data, kind="nonsense")


def test_file_roundtrip(tmp_path):
    g = build_grid(2, "reduced", 16)
    f = ScalarField(g, np.arange(256.0).reshape(16, 16))
    write_field(tmp_path / "f.mage", f)
    assert np.array_equal(read_field(tmp_path / "f.mage").values, f.values)


def test_checkpoint_roundtrip_and_sidecar(tmp_path):
    g = build_grid(1, "reduced", 32)
    x = g.coords(0)
    sol = solve_ma(ProblemSpec(g, BackgroundForm(np.zeros((1, 1))), BackgroundForm.identity(1), 1.0, 1,
                               ScalarField(g, 1 + 0.2 * np.cos(2 * np.pi * x))))
    path = save_checkpoint(tmp_path / "phi.mage", sol)
    phi, meta = load_checkpoint(path)
    assert phi.values.tobytes() == sol.phi.values.tobytes()
    assert meta["t"] == 1.0 and meta["lam"] == 1 and meta["c_t"] == sol.c_t
    assert meta["iterations"] == sol.newton_iters and meta["converged"] is True
    side = tmp_path / "phi.mage.json"
    side.write_text(json.dumps({"t": 1.0}))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)
    side.write_text("{not json")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)
    side.unlink()
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)
