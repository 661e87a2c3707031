"""Random truncations and bit flips never crash a decoder: either the input
still decodes or a categorised codec error comes back."""
import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from spinecomplete.errors import CheckpointError, CodecError
from spinecomplete.geometry import PointCloud
from spinecomplete.io.ply import decode_ply, encode_ply
from spinecomplete.io.png import decode_png, encode_png
from spinecomplete.model import CompletionModel, ModelConfig, decode_checkpoint, encode_checkpoint
from spinecomplete.synthetic import superquadric_mesh

_rng = np.random.default_rng(0)
_mesh = superquadric_mesh((1, 2, 3), n_lat=4, n_lon=5, level=2)
SAMPLES = {
    "ply-binary-cloud": encode_ply(_rng.normal(size=(6, 3)), _rng.random((6, 3)), _rng.integers(0, 5, 6)),
    "ply-ascii-cloud": encode_ply(_rng.normal(size=(6, 3)), labels=_rng.integers(0, 5, 6), binary=False),
    "ply-binary-mesh": encode_ply(_mesh.vertices, faces=_mesh.triangles, comments=["level 2"]),
    "ply-ascii-mesh": encode_ply(_mesh.vertices, faces=_mesh.triangles, binary=False),
    "png-depth": encode_png(_rng.integers(0, 65536, size=(5, 7), dtype=np.uint16)),
    "png-rgb": encode_png(_rng.integers(0, 256, size=(4, 3, 3), dtype=np.uint8)),
}
DECODERS = {"ply": decode_ply, "png": decode_png}


def _decode(name, blob):
    try:
        DECODERS[name.split("-")[0]](blob)
    except CodecError as exc:
        assert exc.category and exc.category != "error"


mutation = st.one_of(
    st.tuples(st.just("truncate"), st.floats(0.0, 1.0)),
    st.tuples(st.just("flip"), st.lists(st.tuples(st.floats(0.0, 1.0), st.integers(0, 7)), min_size=1, max_size=4)),
    st.tuples(st.just("splice"), st.floats(0.0, 1.0), st.binary(min_size=1, max_size=8)),
)


def _mutate(blob, m):
    if m[0] == "truncate":
        return blob[: int(m[1] * len(blob))]
    if m[0] == "flip":
        b = bytearray(blob)
        for pos, bit in m[1]:
            i = min(int(pos * len(b)), len(b) - 1)
            b[i] ^= 1 << bit
        return bytes(b)
    i = int(m[1] * len(blob))
    return blob[:i] + m[2] + blob[i:]


@pytest.mark.parametrize("name", sorted(SAMPLES))
@settings(max_examples=150, deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
@given(m=mutation)
def test_mutated_files_never_crash(name, m, backend):
    _decode(name, _mutate(SAMPLES[name], m))


@pytest.mark.parametrize("name", sorted(SAMPLES))
def test_every_truncation(name):
    blob = SAMPLES[name]
    for n in range(len(blob)):
        _decode(name, blob[:n])


@settings(max_examples=60, deadline=None)
@given(m=mutation)
def test_mutated_checkpoint(m):
    blob = _checkpoint()
    try:
        decode_checkpoint(_mutate(blob, m))
    except CheckpointError:
        pass


_CKPT = []


def _checkpoint():
    if not _CKPT:
        cfg = ModelConfig.preset("desk", encoder_depth=1, decoder_depth=1)
        _CKPT.append(encode_checkpoint(CompletionModel(cfg, 0)))
    return _CKPT[0]


def test_unmutated_samples_decode():
    for name, blob in SAMPLES.items():
        DECODERS[name.split("-")[0]](blob)
    assert len(PointCloud(decode_ply(SAMPLES["ply-binary-cloud"]).points)) == 6
