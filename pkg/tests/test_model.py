import numpy as np
import pytest

from _gradops import desk_model_case
from spinecomplete.autodiff import Tensor
from spinecomplete.errors import CheckpointError, ConfigError, DimensionMismatchError, EmptyCloudError
from spinecomplete.geometry import PointCloud
from spinecomplete.model import (
    CompletionModel,
    ModelConfig,
    cd_loss,
    complete,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from spinecomplete.train import grad_check


@pytest.fixture(scope="module")
def desk():
    return CompletionModel(ModelConfig.preset("desk"), seed=3)


def _input(rng, n=64, scale=10.0):
    return rng.normal(size=(n, 3)) * scale + [100, -20, 300]


def test_presets_and_validation():
    full = ModelConfig.preset("full")
    assert (full.encoder_depth, full.decoder_depth, full.num_heads, full.hidden_dim) == (6, 8, 6, 384)
    assert (full.knn_feature, full.knn_geom, full.n_input, full.n_output) == (6, 8, 2048, 4096)
    desk = ModelConfig.preset("desk")
    assert desk.n_input <= 64 and desk.hidden_dim <= 32 and desk.dtype == "float64"
    with pytest.raises(ConfigError):
        ModelConfig.preset("desk", hidden_dim=25)
    with pytest.raises(ConfigError):
        ModelConfig.preset("huge")


def test_parameter_count_is_config_function():
    cfg = ModelConfig.preset("desk")
    assert CompletionModel(cfg, 0).parameter_count() == CompletionModel(cfg, 9).parameter_count()


def test_complete_cardinality_and_determinism(desk, rng):
    x = _input(rng)
    a = complete(desk, PointCloud(x))
    b = complete(desk, x)
    assert len(a) == desk.config.n_output
    assert np.array_equal(a.points, b.points)
    assert np.all(np.isfinite(a.points))


def test_complete_translation_equivariant(desk, rng):
    x = _input(rng)
    shift = np.array([250.0, -75.0, 40.0])
    a = complete(desk, x).points
    b = complete(desk, x + shift).points
    diag = np.linalg.norm(x.max(0) - x.min(0))
    assert np.abs(b - a - shift).max() < 1e-5 * diag


def test_complete_wrong_cardinality(desk, rng):
    with pytest.raises(DimensionMismatchError):
        complete(desk, _input(rng, 63))


def test_encoder_permutation_equivariant(desk, rng):
    x = _input(rng) / 50.0
    perm = rng.permutation(len(x))
    ta, xa = desk.encode(x[None])
    tb, xb = desk.encode(x[perm][None])
    assert np.array_equal(xa, xb)
    assert np.array_equal(ta.data, tb.data)


def test_adaptive_queries_depend_on_input(desk, rng):
    t1, _ = desk.encode((_input(rng) / 50.0)[None])
    t2, _ = desk.encode((_input(rng) / 50.0)[None])
    c1, q1, _ = desk.adaptive_queries(t1)
    c2, _, _ = desk.adaptive_queries(t2)
    assert c1.shape == (1, desk.config.n_coarse, 3)
    assert q1.shape == (1, desk.config.n_coarse, desk.config.hidden_dim)
    assert not np.array_equal(c1.data, c2.data)


def test_coarse_loss_reaches_encoder(rng):
    model = CompletionModel(ModelConfig.preset("desk"), seed=1)
    coarse, _ = model.forward((_input(rng) / 50.0)[None])
    cd_loss(coarse, rng.normal(size=(1, 40, 3))).backward()
    for p in model.encoder[0].parameters() + model.feat_points.parameters():
        assert p.grad is not None
    assert any(np.abs(p.grad).max() > 0 for p in model.encoder[0].parameters())


def test_cd_loss_identity():
    g = np.random.default_rng(0).normal(size=(20, 3))
    p = Tensor(g.copy(), requires_grad=True)
    loss = cd_loss(p, g)
    loss.backward()
    assert float(loss.data) == 0.0
    assert np.all(p.grad == 0)


def test_cd_loss_single_pair_gradient():
    p = Tensor(np.array([[0.3, -1.0, 2.0]]), requires_grad=True)
    g = np.array([[1.0, 0.5, 0.0]])
    cd_loss(p, g).backward()
    assert np.allclose(p.grad, 2 * (p.data - g) * 2)
    assert grad_check(lambda: cd_loss(p, g), [p]) < 1e-8


def test_cd_loss_random_clouds():
    rng = np.random.default_rng(5)
    p = Tensor(rng.normal(size=(32, 3)), requires_grad=True)
    g = rng.normal(size=(48, 3))
    assert grad_check(lambda: cd_loss(p, g), [p], n_samples=96) < 1e-4


def test_cd_loss_empty():
    with pytest.raises(EmptyCloudError):
        cd_loss(Tensor(np.zeros((0, 3))), np.zeros((3, 3)))


def test_desk_model_gradient_quick():
    fn, params, _ = desk_model_case(seed=2)
    assert grad_check(fn, params, n_samples=2, seed=1) < 1e-4


# -- checkpoints -------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, desk, rng):
    path = tmp_path / "m.ckpt"
    save_checkpoint(desk, path, extra={"note": "x"})
    loaded = load_checkpoint(path)
    assert loaded.config == desk.config
    for (n1, a), (n2, b) in zip(desk.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and np.array_equal(a.data, b.data) and a.data.dtype == b.data.dtype
    x = _input(rng)
    assert np.array_equal(complete(desk, x).points, complete(loaded, x).points)
    assert encode_checkpoint(loaded, {"note": "x"}) == path.read_bytes()


def test_checkpoint_float32_round_trip(rng):
    m = CompletionModel(ModelConfig.preset("bench"), seed=0)
    m2 = decode_checkpoint(encode_checkpoint(m))
    x = _input(rng, 256)
    assert np.array_equal(complete(m, x).points, complete(m2, x).points)


def test_checkpoint_corruption_detected(desk):
    blob = bytearray(encode_checkpoint(desk))
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"NOTACKPT" + bytes(blob[8:]))
    blob[200] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(bytes(blob))
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(blob[:20]))
