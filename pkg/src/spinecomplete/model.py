"""Point-cloud completion transformer.

Pipeline of one forward pass (all in normalised coordinates):

1. EdgeConv features on every input point, FPS down to ``n_tokens`` proxies,
   a second EdgeConv among the proxies, plus an MLP embedding of their xyz.
2. ``encoder_depth`` geometry-aware blocks over the proxies.
3. Adaptive queries: a max-pooled global feature predicts ``n_coarse``
   proposal centres and, from them, the decoder query features.
4. ``decoder_depth`` decoder blocks (geometry-aware self block over the
   queries + cross-attention to the encoder tokens).
5. Rebuild head: each query predicts ``fold_factor`` offsets around its
   centre, giving ``n_coarse * fold_factor`` output points.

Inputs are centred on their centroid and divided by their bounding-box
diagonal; outputs are mapped back with the same parameters.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, DimensionMismatchError, EmptyCloudError, InvalidInputError
from .geometry import PointCloud
from .io.atomic import atomic_write_bytes
from .nn import MLP, DecoderBlock, EdgeConv, GeometryAwareBlock, LayerNorm, Linear, Module, batched_knn
from .spatial import fps_indices, nearest_sq_dist

CHECKPOINT_MAGIC = b"SPCKPT\x00\x01"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    encoder_depth: int = 6
    decoder_depth: int = 8
    num_heads: int = 6
    hidden_dim: int = 384
    knn_feature: int = 6
    knn_geom: int = 8
    n_input: int = 2048
    n_tokens: int = 128
    n_coarse: int = 256
    fold_factor: int = 16
    feature_dim: int = 64
    global_dim: int = 1024
    mlp_ratio: int = 2
    offset_scale: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not 0 < self.n_tokens <= self.n_input:
            raise ConfigError("n_tokens must lie in [1, n_input]")
        if self.knn_feature >= self.n_tokens:
            raise ConfigError("knn_feature must be smaller than n_tokens")
        if self.knn_geom >= min(self.n_tokens, self.n_coarse):
            raise ConfigError("knn_geom must be smaller than n_tokens and n_coarse")
        for f in ("encoder_depth", "decoder_depth", "n_coarse", "fold_factor", "feature_dim", "global_dim"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")

    @property
    def n_output(self) -> int:
        return self.n_coarse * self.fold_factor

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        """``full`` (large, 6+8 blocks of width 384), ``desk`` (gradient checks) or ``bench`` (CPU training)."""
        base = PRESETS.get(name)
        if base is None:
            raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
        return replace(cls(**base), **overrides)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "full": {},
    "desk": dict(
        encoder_depth=2, decoder_depth=2, num_heads=6, hidden_dim=24, n_input=64, n_tokens=16,
        n_coarse=16, fold_factor=4, feature_dim=12, global_dim=48, dtype="float64",
    ),
    "bench": dict(
        encoder_depth=2, decoder_depth=2, num_heads=4, hidden_dim=32, n_input=256, n_tokens=32,
        n_coarse=32, fold_factor=8, feature_dim=16, global_dim=64,
    ),
}


def normalize(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Centre on the centroid and scale by 1 / bounding-box diagonal."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        raise EmptyCloudError("cannot normalise an empty cloud")
    centroid = pts.mean(axis=0)
    scale = float(np.linalg.norm(pts.max(0) - pts.min(0)))
    if not scale > 0:
        raise InvalidInputError("input cloud is degenerate (zero extent)")
    return (pts - centroid) / scale, centroid, scale


def proxy_indices(points: np.ndarray, n: int) -> np.ndarray:
    """FPS from the point farthest from the centroid, so selection ignores input order."""
    c = points - points.mean(0)
    start = int(np.argmax(c[:, 0] * c[:, 0] + c[:, 1] * c[:, 1] + c[:, 2] * c[:, 2]))
    return fps_indices(points, n, start)


class CompletionModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        c = config
        dt = np.dtype(c.dtype)
        rng = np.random.default_rng(seed)
        self.feat_points = EdgeConv(3, c.feature_dim, c.knn_feature, rng, dt)
        self.feat_tokens = EdgeConv(c.feature_dim, c.hidden_dim, c.knn_feature, rng, dt)
        self.pos_embed = MLP([3, c.hidden_dim, c.hidden_dim], rng, dt)
        self.encoder = [
            GeometryAwareBlock(c.hidden_dim, c.num_heads, c.knn_geom, rng, dt, c.mlp_ratio)
            for _ in range(c.encoder_depth)
        ]
        self.global_proj = Linear(c.hidden_dim, c.global_dim, rng, dt)
        self.coarse_head = MLP([c.global_dim, c.global_dim, 3 * c.n_coarse], rng, dt)
        self.query_mlp = MLP([c.global_dim + 3, c.hidden_dim, c.hidden_dim], rng, dt)
        self.decoder = [
            DecoderBlock(c.hidden_dim, c.num_heads, c.knn_geom, rng, dt, c.mlp_ratio)
            for _ in range(c.decoder_depth)
        ]
        self.final_norm = LayerNorm(c.hidden_dim, dt)
        self.rebuild = MLP([c.hidden_dim + c.global_dim, c.hidden_dim, 3 * c.fold_factor], rng, dt)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    # -- stages ------------------------------------------------------------

    def encode(self, points: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Normalised (B, N, 3) points -> encoder tokens (B, T, D) and their coordinates."""
        c = self.config
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 3 or points.shape[1:] != (c.n_input, 3):
            raise DimensionMismatchError(f"expected (B, {c.n_input}, 3) input, got {points.shape}")
        x = Tensor(points.astype(self.dtype))
        f = self.feat_points(points, x)
        idx = ad.branch_choice(lambda: np.stack([proxy_indices(p, c.n_tokens) for p in points]))
        tok_xyz = np.take_along_axis(points, idx[..., None], axis=1)
        f = self.feat_tokens(tok_xyz, ad.gather(f, idx))
        tokens = f + self.pos_embed(Tensor(tok_xyz.astype(self.dtype)))
        index = batched_knn(tok_xyz, c.knn_geom)
        for block in self.encoder:
            tokens = block(tokens, tok_xyz, index)
        return tokens, tok_xyz

    def adaptive_queries(self, tokens: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Global feature -> (coarse centres (B, M, 3), query features (B, M, D), global (B, G))."""
        c = self.config
        b = tokens.shape[0]
        g = self.global_proj(tokens).max(axis=1)
        coarse = self.coarse_head(g).reshape(b, c.n_coarse, 3)
        g_rep = ad.broadcast_to(g.reshape(b, 1, c.global_dim), (b, c.n_coarse, c.global_dim))
        queries = self.query_mlp(ad.concat([g_rep, coarse], axis=-1))
        return coarse, queries, g_rep

    def forward(self, points: np.ndarray) -> tuple[Tensor, Tensor]:
        """Normalised (B, N, 3) input -> (coarse (B, M, 3), fine (B, M*F, 3))."""
        c = self.config
        tokens, _ = self.encode(points)
        coarse, q, g_rep = self.adaptive_queries(tokens)
        b = q.shape[0]
        cxyz = coarse.data.astype(np.float64)
        index = batched_knn(cxyz, c.knn_geom)
        for block in self.decoder:
            q = block(q, cxyz, tokens, index)
        q = self.final_norm(q)
        offsets = self.rebuild(ad.concat([q, g_rep], axis=-1)).reshape(b, c.n_coarse, c.fold_factor, 3)
        centres = ad.broadcast_to(coarse.reshape(b, c.n_coarse, 1, 3), (b, c.n_coarse, c.fold_factor, 3))
        fine = (centres + offsets * c.offset_scale).reshape(b, c.n_output, 3)
        return coarse, fine

    def __call__(self, points):
        return self.forward(points)

    # -- persistence -------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise CheckpointError("parameter names do not match the model")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype).copy()


def complete(model: CompletionModel, partial: PointCloud | np.ndarray) -> PointCloud:
    """Complete one partial cloud of exactly ``n_input`` points."""
    pts = partial.points if isinstance(partial, PointCloud) else np.asarray(partial, dtype=np.float64)
    if pts.shape != (model.config.n_input, 3):
        raise DimensionMismatchError(
            f"partial cloud must have {model.config.n_input} points (got {len(pts)}); resample first"
        )
    normed, centroid, scale = normalize(pts)
    _, fine = model.forward(normed[None])
    out = fine.data[0].astype(np.float64)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite values in completion output")
    return PointCloud(out * scale + centroid)


def cd_loss(pred: Tensor, gt) -> Tensor:
    """Differentiable Chamfer distance (squared) averaged over the batch.

    Nearest-neighbour correspondences are recomputed from values each call
    and held constant in the backward pass.
    """
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    squeeze = pred.ndim == 2
    if squeeze:
        pred = pred.reshape(1, *pred.shape)
    gt = np.asarray(gt, dtype=np.float64)
    if gt.ndim == 2:
        gt = gt[None]
    b, n, _ = pred.shape
    if n == 0 or gt.shape[1] == 0:
        raise EmptyCloudError("cd_loss needs non-empty clouds")
    if gt.shape[0] != b:
        raise DimensionMismatchError("pred and gt batch sizes differ")
    pvals = pred.data.astype(np.float64)
    to_gt, to_pred = ad.branch_choice(lambda: (
        np.stack([nearest_sq_dist(pvals[i], gt[i])[0] for i in range(b)]),
        np.stack([nearest_sq_dist(gt[i], pvals[i])[0] for i in range(b)]),
    ))
    matched_gt = np.take_along_axis(gt, to_gt[..., None], axis=1).astype(pred.dtype)
    d1 = pred - Tensor(matched_gt)
    term1 = (d1 * d1).sum(axis=-1).mean(axis=-1)
    d2 = ad.gather(pred, to_pred) - Tensor(gt.astype(pred.dtype))
    term2 = (d2 * d2).sum(axis=-1).mean(axis=-1)
    return (term1 + term2).mean()


# -- checkpoint container ------------------------------------------------------
#
#   magic (8 bytes) | header length (uint32 LE) | JSON header (utf-8)
#   | parameter blobs, little-endian IEEE-754, in header order
#   | SHA-256 of everything before it (32 bytes)


def save_checkpoint(model: CompletionModel, path, extra: dict | None = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(model, extra))


def encode_checkpoint(model: CompletionModel, extra: dict | None = None) -> bytes:
    """Magic, u32 header length, JSON header, little-endian blobs, SHA-256 of all of it."""
    state = model.state_dict()
    header = {
        "format": "spinecomplete-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": model.seed,
        "params": [{"name": k, "shape": list(v.shape), "dtype": v.dtype.str.lstrip("<>=|")} for k, v in state.items()],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray(CHECKPOINT_MAGIC)
    body += struct.pack("<I", len(head))
    body += head
    for v in state.values():
        body += np.ascontiguousarray(v, dtype=v.dtype.newbyteorder("<")).tobytes()
    body += hashlib.sha256(body).digest()
    return bytes(body)


def load_checkpoint(path) -> CompletionModel:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def decode_checkpoint(blob: bytes) -> CompletionModel:
    if len(blob) < len(CHECKPOINT_MAGIC) + 4 + 32 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    (hlen,) = struct.unpack_from("<I", payload, len(CHECKPOINT_MAGIC))
    start = len(CHECKPOINT_MAGIC) + 4
    try:
        header = json.loads(payload[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    model = CompletionModel(ModelConfig.from_dict(header["config"]), seed=header["seed"])
    offset = start + hlen
    state = {}
    for spec in header["params"]:
        dt = np.dtype(spec["dtype"]).newbyteorder("<")
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(payload):
            raise CheckpointError("checkpoint payload truncated")
        state[spec["name"]] = np.frombuffer(payload, dtype=dt, count=count, offset=offset).reshape(spec["shape"])
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError("trailing bytes in checkpoint payload")
    model.load_state_dict(state)
    return model
