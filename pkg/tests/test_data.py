import struct

import numpy as np
import pytest

from oracles import euler_diffusion, leapfrog_wave
from ttcast import data
from ttcast.errors import ConfigError, FormatError


@pytest.fixture
def seq(rng):
    return data.VolumeSequence(rng.normal(size=(6, 2, 3, 4, 2)).astype(np.float32))


def test_vseq_round_trip_bitwise(seq, tmp_path):
    path = tmp_path / "a.vseq"
    data.save(seq, path)
    back = data.load(path)
    assert back.data.tobytes() == seq.data.tobytes()
    assert back.time_step_hours == 12.0 and back.axes == data.AXES
    data.save(back, tmp_path / "b.vseq")
    assert (tmp_path / "b.vseq").read_bytes() == path.read_bytes()


def test_vseq_layout(seq):
    buf = data.to_bytes(seq)
    assert buf[:4] == b"VSEQ"
    version, hlen = struct.unpack_from("<II", buf, 4)
    assert version == 1
    start = 12 + hlen + (-(12 + hlen)) % 8
    assert start % 8 == 0
    assert len(buf) == start + seq.data.nbytes + 4


def test_vseq_big_endian_is_swapped(seq):
    be = data.to_bytes(seq, byteorder=">")
    assert be != data.to_bytes(seq)
    assert np.array_equal(data.from_bytes(be).data, seq.data)


def test_vseq_header_shape_mismatch(seq):
    buf = data.to_bytes(seq)
    bad = buf.replace(b'"shape": [6, 2, 3, 4, 2]', b'"shape": [5, 2, 3, 4, 2]')
    with pytest.raises(FormatError) as err:
        data.from_bytes(bad)
    assert err.value.field == "shape"


def test_vseq_corruption_detected(seq):
    buf = bytearray(data.to_bytes(seq))
    buf[-10] ^= 0xFF
    with pytest.raises(FormatError) as err:
        data.from_bytes(bytes(buf))
    assert err.value.field == "digest"
    with pytest.raises(FormatError):
        data.from_bytes(b"NOPE" + bytes(buf[4:]))
    with pytest.raises(FormatError):
        data.from_bytes(bytes(buf[:-7]))


def test_generate_fixed_seed_repeats():
    a = data.generate_synthetic("wave", 10, 2, 6, 6, c2=0.2, seed=3)
    b = data.generate_synthetic("wave", 10, 2, 6, 6, c2=0.2, seed=3)
    assert a.data.tobytes() == b.data.tobytes()
    assert a.shape == (10, 2, 6, 6, 2)


def test_generate_zero_alpha_is_constant():
    s = data.generate_synthetic("diffusion", 8, 1, 5, 5, alpha=0.0, seed=1)
    assert np.all(s.data == s.data[0])


@pytest.mark.parametrize("kind,kw,bound", [("diffusion", {"alpha": 0.5}, "0.25"),
                                           ("wave", {"c2": 0.6}, "2*c2 <= 1")])
def test_generate_stability_errors(kind, kw, bound):
    with pytest.raises(ConfigError, match=bound.replace("*", r"\*")):
        data.generate_synthetic(kind, 5, 1, 4, 4, **kw)


def test_generate_diffusion_single_mode_matches_hand_integration():
    w = 5
    x = np.arange(w)
    mode = np.tile(np.sin(np.pi * x / (w - 1)), (w, 1))
    s = data.generate_synthetic("diffusion", 12, 1, w, w, alpha=0.2, initial=mode)
    ref = euler_diffusion(mode, 0.2, 11)
    amps = []
    for t in range(12):
        np.testing.assert_allclose(s.data[t, 0, :, :, 0], ref[t], atol=1e-6)
        amps.append(np.abs(s.data[t, 0, :, :, 0] - s.data[t, 0, :, :, 0].mean()).max())
    assert all(b < a for a, b in zip(amps, amps[1:]))


def test_generate_wave_matches_leapfrog():
    s = data.generate_synthetic("wave", 15, 1, 6, 7, c2=0.3, seed=5)
    v0 = s.data[0, 0, :, :, 1].astype(np.float64)
    ref = leapfrog_wave(v0, v0, 0.3, 14)[1:]
    for t in range(15):
        np.testing.assert_allclose(s.data[t, 0, :, :, 1], ref[t], atol=1e-5)


def test_diffusion_conserves_mean():
    s = data.generate_synthetic("diffusion", 30, 2, 10, 12, alpha=0.2, seed=2).data
    means = s.reshape(30, 2, -1, 2).astype(np.float64).mean(axis=2)
    assert np.max(np.abs(np.diff(means, axis=0))) < 1e-5


def test_wave_conserves_energy():
    c2 = 0.2
    s = data.generate_synthetic("wave", 101, 2, 16, 16, c2=c2, seed=4).data.astype(np.float64)
    e = [data.wave_energy(s[t], s[t + 1], c2) for t in range(100)]
    assert np.max(np.abs(np.array(e) - e[0])) <= 0.05 * abs(e[0])


def test_normalize_round_trip_and_training_mean(rng):
    x = rng.normal(3.0, 2.0, size=(40, 3, 5, 2))
    z, stats = data.normalize(x)
    assert np.all(np.abs(z.reshape(-1, 2).mean(axis=0)) < 1e-6)
    np.testing.assert_allclose(data.denormalize(z, stats), x, atol=1e-6)


def test_normalize_constant_channel_falls_back(rng):
    x = rng.normal(size=(10, 4, 2))
    x[..., 1] = 7.0
    with pytest.warns(UserWarning, match="zero-variance"):
        z, stats = data.normalize(x)
    assert stats.fallback == (1,)
    assert np.all(z[..., 1] == 0)


def test_split_sizes():
    tr, va = data.split(np.zeros((1810, 1)))
    assert (len(tr), len(va)) == (1448, 362)
    tr, va = data.split(np.zeros((100, 1)))
    assert (len(tr), len(va)) == (80, 20)
    with pytest.raises(ConfigError):
        data.split(np.zeros((60, 1)))


def test_windows_never_straddle_the_split():
    t = np.arange(100)
    tr, va = data.split(t)
    wt, wv = data.windows(tr), data.windows(va)
    assert wt.max() < 80 <= wv.min()
    assert wt.shape == (61, 20) and wv.shape == (1, 20)
