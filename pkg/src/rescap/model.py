"""Network definition: residual dilated encoder feeding a 1-D capsule layer.

The full variant runs a 1x1 stem, six residual blocks with exponentially
increasing dilation, a summed skip pathway, primary capsules built by a
strided convolution, agreement routing into two output capsules, and a
dense->sigmoid head.  Five baseline variants rewire or re-feed the same
pieces for ablation comparisons.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from rescap import autodiff as ad
from rescap.autodiff import BatchNormState, Tensor
from rescap.errors import (
    CorruptCheckpoint,
    InvalidConfig,
    KindMismatch,
    ShapeMismatch,
    VersionMismatch,
)
from rescap.featurize import EMBED_DIM, L_MAX, FeatureKind, FeatureMatrix
from rescap.ioutil import atomic_write_bytes

CKPT_MAGIC = b"RCKP"
CKPT_VERSION = 1


class Variant(str, Enum):
    FULL = "full"
    BASELINE1 = "baseline1"  # plain convs, no residual encoder, no capsules
    BASELINE2 = "baseline2"  # residual encoder, dense head instead of capsules
    BASELINE3 = "baseline3"  # capsules directly on the input, no encoder
    BASELINE4 = "baseline4"  # full graph on one-hot input
    BASELINE5 = "baseline5"  # full graph on local embeddings

    @property
    def has_encoder(self) -> bool:
        return self in (Variant.FULL, Variant.BASELINE2, Variant.BASELINE4, Variant.BASELINE5)

    @property
    def has_capsules(self) -> bool:
        return self in (Variant.FULL, Variant.BASELINE3, Variant.BASELINE4, Variant.BASELINE5)


@dataclass(frozen=True)
class CapsuleSpec:
    channels: int = 32
    dim: int = 8
    conv_kernel: int = 9
    stride: int = 8


@dataclass
class ModelConfig:
    variant: Variant = Variant.FULL
    input_kind: FeatureKind = FeatureKind.GLOBAL
    residual_channels: int = 40
    skip_channels: int = 20
    kernel_size: int = 3
    num_blocks: int = 6
    dilations: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    primary_caps: CapsuleSpec = field(default_factory=CapsuleSpec)
    out_caps_count: int = 2
    out_caps_dim: int = 16
    routing_iters: int = 2
    seed: int = 0
    l_max: int = L_MAX
    local_len: int = L_MAX
    embed_dim: int = EMBED_DIM
    baseline1_channels: int = 64

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.input_kind = FeatureKind(self.input_kind)
        self.dilations = tuple(self.dilations)
        if isinstance(self.primary_caps, dict):
            self.primary_caps = CapsuleSpec(**self.primary_caps)
        # variant constraints on the feature kind
        if self.variant == Variant.BASELINE4:
            self.input_kind = FeatureKind.ONEHOT
        elif self.variant == Variant.BASELINE5:
            self.input_kind = FeatureKind.LOCAL
        self.validate()

    def validate(self) -> None:
        if len(self.dilations) != self.num_blocks:
            raise InvalidConfig(
                f"{self.num_blocks} blocks need {self.num_blocks} dilation rates, "
                f"got {len(self.dilations)}"
            )
        if any(d < 1 for d in self.dilations):
            raise InvalidConfig("dilation rates must be >= 1")
        if self.routing_iters < 1:
            raise InvalidConfig("routing_iters must be >= 1")
        if min(self.residual_channels, self.skip_channels, self.kernel_size) < 1:
            raise InvalidConfig("channel counts and kernel size must be positive")
        if self.primary_caps.stride < 1 or self.primary_caps.conv_kernel < 1:
            raise InvalidConfig("capsule conv kernel and stride must be positive")

    @property
    def input_channels(self) -> int:
        if self.input_kind == FeatureKind.ONEHOT:
            return 20
        if self.input_kind == FeatureKind.LOCAL:
            return self.embed_dim
        return 1

    @property
    def input_length(self) -> int:
        if self.input_kind == FeatureKind.ONEHOT:
            return self.l_max
        if self.input_kind == FeatureKind.LOCAL:
            return self.local_len
        return self.embed_dim

    @property
    def num_primary_caps(self) -> int:
        reduced = -(-self.input_length // self.primary_caps.stride)  # ceil division
        return self.primary_caps.channels * reduced

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        d["input_kind"] = self.input_kind.value
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def reference_config(variant: Variant = Variant.FULL, seed: int = 0, **overrides) -> ModelConfig:
    """The reference geometry; the full variant lands near the parameter budget."""
    return ModelConfig(variant=Variant(variant), seed=seed, **overrides)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    bn_states: dict[str, BatchNormState]

    def trainable(self) -> list[Tensor]:
        return list(self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            tensors={k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()},
            bn_states={k: s.copy() for k, s in self.bn_states.items()},
        )

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def count_parameters(params: ModelParams) -> int:
    return sum(t.data.size for t in params.tensors.values())


def per_layer_counts(params: ModelParams) -> list[tuple[str, int]]:
    return [(name, t.data.size) for name, t in params.tensors.items()]


# --- construction -----------------------------------------------------------

def _conv_init(rng, c_out: int, c_in: int, k: int, scale: float = 1.0) -> np.ndarray:
    bound = scale / np.sqrt(c_in * k)
    return rng.uniform(-bound, bound, size=(c_out, c_in, k))


def _dense_init(rng, f_out: int, f_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(f_in)
    return rng.uniform(-bound, bound, size=(f_out, f_in))


def build(config: ModelConfig) -> ModelParams:
    """Initialize all parameters for the configured variant (deterministic per seed)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    tensors: dict[str, Tensor] = {}
    bn_states: dict[str, BatchNormState] = {}

    def param(name: str, arr: np.ndarray) -> None:
        tensors[name] = Tensor(arr, requires_grad=True)

    def conv(name: str, c_out: int, c_in: int, k: int, scale: float = 1.0) -> None:
        param(f"{name}.weight", _conv_init(rng, c_out, c_in, k, scale))
        param(f"{name}.bias", np.zeros(c_out))

    def norm(name: str, channels: int) -> None:
        param(f"{name}.gamma", np.ones(channels))
        param(f"{name}.beta", np.zeros(channels))
        bn_states[name] = BatchNormState.create(channels)

    c_in = config.input_channels
    caps = config.primary_caps

    if config.variant == Variant.BASELINE1:
        ch = config.baseline1_channels
        conv("b1conv0", ch, c_in, config.kernel_size)
        conv("b1conv1", ch, ch, config.kernel_size)
        conv("b1conv2", ch, ch, config.kernel_size)
        param("head.weight", _dense_init(rng, 1, ch))
        param("head.bias", np.zeros(1))
        return ModelParams(config, tensors, bn_states)

    if config.variant.has_encoder:
        conv("stem", config.residual_channels, c_in, 1)
        for i, dilation in enumerate(config.dilations):
            r = config.residual_channels
            conv(f"block{i}.dilated", r, r, config.kernel_size)
            norm(f"block{i}.bn1", r)
            conv(f"block{i}.point", r, r, 1)
            norm(f"block{i}.bn2", r)
            conv(f"block{i}.skip", config.skip_channels, r, 1)

    if config.variant == Variant.BASELINE2:
        param("head.weight", _dense_init(rng, 1, config.skip_channels))
        param("head.bias", np.zeros(1))
        return ModelParams(config, tensors, bn_states)

    caps_in = config.skip_channels if config.variant.has_encoder else c_in
    conv("caps.conv", caps.channels * caps.dim, caps_in, caps.conv_kernel)
    param(
        "caps.W",
        0.1
        * _dense_init(
            rng, config.num_primary_caps * config.out_caps_count * config.out_caps_dim, caps.dim
        ).reshape(config.num_primary_caps, config.out_caps_count, config.out_caps_dim, caps.dim),
    )
    param("head.weight", _dense_init(rng, 1, config.out_caps_count * config.out_caps_dim))
    param("head.bias", np.zeros(1))
    return ModelParams(config, tensors, bn_states)


# --- input marshalling ------------------------------------------------------

def reshape_input(feat: FeatureMatrix) -> Tensor:
    """Map one feature matrix to a single-sample (1, C, L) tensor."""
    if feat.kind == FeatureKind.ONEHOT:
        return Tensor(feat.data.T[None, :, :])
    if feat.kind == FeatureKind.LOCAL:
        return Tensor(feat.data.T[None, :, :])
    return Tensor(feat.data.reshape(1, 1, -1))


def stack_inputs(feats: list[FeatureMatrix], config: ModelConfig) -> Tensor:
    """Collate features into a (B, C, L) batch matching the config's geometry.

    Local embeddings are truncated or zero-padded to ``config.local_len`` so
    the capsule routing weights have a fixed shape.
    """
    arrays = []
    for feat in feats:
        if feat.kind != config.input_kind:
            raise KindMismatch(
                f"feature '{feat.source_id}' has kind {feat.kind.value}, "
                f"model expects {config.input_kind.value}"
            )
        if feat.kind == FeatureKind.LOCAL:
            mat = np.zeros((config.local_len, config.embed_dim))
            rows = min(feat.data.shape[0], config.local_len)
            mat[:rows] = feat.data[:rows]
            arrays.append(mat.T)
        elif feat.kind == FeatureKind.ONEHOT:
            arrays.append(feat.data.T)
        else:
            arrays.append(feat.data.reshape(1, -1))
    batch = np.stack(arrays)
    expect = (len(feats), config.input_channels, config.input_length)
    if batch.shape != expect:
        raise ShapeMismatch(f"collated batch {batch.shape}, config expects {expect}")
    return Tensor(batch)


# --- forward pieces ---------------------------------------------------------

def residual_block(
    params: ModelParams, x: Tensor, index: int, mode: str
) -> tuple[Tensor, Tensor]:
    """One residual unit: x + F(x) plus a skip take-off after the relu."""
    cfg = params.config
    name = f"block{index}"
    h = ad.conv1d(
        x,
        params[f"{name}.dilated.weight"],
        params[f"{name}.dilated.bias"],
        dilation=cfg.dilations[index],
        causal=True,
    )
    h = ad.batch_norm1d(
        h, params[f"{name}.bn1.gamma"], params[f"{name}.bn1.beta"],
        params.bn_states[f"{name}.bn1"], mode=mode,
    )
    h = ad.relu(h)
    skip = ad.conv1d(h, params[f"{name}.skip.weight"], params[f"{name}.skip.bias"])
    h = ad.conv1d(h, params[f"{name}.point.weight"], params[f"{name}.point.bias"])
    h = ad.batch_norm1d(
        h, params[f"{name}.bn2.gamma"], params[f"{name}.bn2.beta"],
        params.bn_states[f"{name}.bn2"], mode=mode,
    )
    return ad.add(x, h), skip


def encode(params: ModelParams, x: Tensor, mode: str) -> Tensor:
    """Stem + residual stack; returns the relu'd sum of skip pathways (B, S, L)."""
    h = ad.conv1d(x, params["stem.weight"], params["stem.bias"])
    skip_sum = None
    for i in range(params.config.num_blocks):
        h, skip = residual_block(params, h, i, mode)
        skip_sum = skip if skip_sum is None else ad.add(skip_sum, skip)
    return ad.relu(skip_sum)


def route_capsules(
    u: Tensor,
    w: Tensor,
    routing_iters: int,
    diagnostics: dict | None = None,
) -> Tensor:
    """Agreement routing of primary capsules (B, N_in, d_in) into output capsules.

    Coupling coefficients are the softmax over output capsules of agreement
    logits; each output capsule is the squashed coupling-weighted sum of the
    per-input predictions; logits accumulate prediction/output dot products
    between iterations (no update after the last).
    """
    if routing_iters < 1:
        raise InvalidConfig("routing requires at least one iteration")
    batch, n_in, _ = u.data.shape
    if w.data.shape[0] != n_in:
        raise ShapeMismatch(
            f"routing weights built for {w.data.shape[0]} primary capsules, got {n_in}"
        )
    u_hat = ad.einsum2("ijok,bik->bijo", w, u)

    logits = Tensor(np.zeros((batch, n_in, w.data.shape[1])))
    v = None
    for r in range(routing_iters):
        c = ad.softmax(logits, axis=2)
        s = ad.einsum2("bij,bijo->bjo", c, u_hat)
        v = ad.squash(s)
        if diagnostics is not None:
            diagnostics.setdefault("couplings", []).append(c.data.copy())
            diagnostics.setdefault("capsule_norms", []).append(
                np.linalg.norm(v.data, axis=-1).copy()
            )
        if r < routing_iters - 1:
            logits = ad.add(logits, ad.einsum2("bijo,bjo->bij", u_hat, v))
    return v


def capsule_layer(
    params: ModelParams,
    features: Tensor,
    routing_iters: int | None = None,
    diagnostics: dict | None = None,
) -> Tensor:
    """Primary capsules via strided convolution, then agreement routing."""
    cfg = params.config
    caps = cfg.primary_caps
    iters = cfg.routing_iters if routing_iters is None else routing_iters

    h = ad.conv1d(features, params["caps.conv.weight"], params["caps.conv.bias"], causal=True)
    h = ad.subsample(h, caps.stride)
    batch, _, reduced = h.data.shape
    h = ad.reshape(h, (batch, caps.channels, caps.dim, reduced))
    h = ad.transpose(h, (0, 1, 3, 2))
    u = ad.squash(ad.reshape(h, (batch, caps.channels * reduced, caps.dim)))
    return route_capsules(u, params["caps.W"], iters, diagnostics)


def _head(params: ModelParams, flat: Tensor) -> Tensor:
    return ad.sigmoid(ad.dense(flat, params["head.weight"], params["head.bias"]))


def forward(
    params: ModelParams,
    x: Tensor,
    mode: str = "infer",
    diagnostics: dict | None = None,
) -> Tensor:
    """Probability of the positive class, shape (B, 1)."""
    cfg = params.config
    if x.data.ndim != 3 or x.data.shape[1] != cfg.input_channels:
        raise ShapeMismatch(
            f"input {x.data.shape} does not match config "
            f"({cfg.input_channels} channels expected)"
        )
    if mode not in ("train", "infer"):
        raise InvalidConfig(f"unknown mode {mode!r}")

    if cfg.variant == Variant.BASELINE1:
        h = x
        for i in range(3):
            h = ad.relu(
                ad.conv1d(
                    h, params[f"b1conv{i}.weight"], params[f"b1conv{i}.bias"], causal=False
                )
            )
        return _head(params, ad.reduce_mean(h, axis=2))

    if cfg.variant == Variant.BASELINE2:
        pooled = ad.reduce_mean(encode(params, x, mode), axis=2)
        return _head(params, pooled)

    feats = encode(params, x, mode) if cfg.variant.has_encoder else x
    v = capsule_layer(params, feats, diagnostics=diagnostics)
    flat = ad.reshape(v, (x.data.shape[0], cfg.out_caps_count * cfg.out_caps_dim))
    return _head(params, flat)


def predict_proba(params: ModelParams, feats: list[FeatureMatrix]) -> np.ndarray:
    """Convenience wrapper: collate, run in inference mode, return (B,) probs."""
    x = stack_inputs(feats, params.config)
    return forward(params, x, mode="infer").data.reshape(-1)


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    """Versioned little-endian binary: config header, tensor table, CRC32."""
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<B", CKPT_VERSION)
    cfg_json = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(cfg_json))
    out += cfg_json

    entries: list[tuple[str, int, np.ndarray]] = []
    for name, t in params.tensors.items():
        entries.append((name, 1, t.data))
    for name, state in params.bn_states.items():
        entries.append((f"{name}.running_mean", 0, state.mean))
        entries.append((f"{name}.running_var", 0, state.var))
    out += struct.pack("<I", len(entries))
    for name, flag, arr in entries:
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<BB", flag, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    atomic_write_bytes(path, bytes(out))


def load_checkpoint(path) -> ModelParams:
    blob = open(path, "rb").read()
    if len(blob) < 13:
        raise CorruptCheckpoint(f"{path}: too short to be a checkpoint")
    body, (stored_crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CorruptCheckpoint(f"{path}: checksum mismatch")
    if body[:4] != CKPT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic {body[:4]!r}")
    version = body[4]
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off = 5
    (cfg_len,) = struct.unpack_from("<I", body, off)
    off += 4
    config = ModelConfig.from_dict(json.loads(body[off : off + cfg_len].decode("utf-8")))
    off += cfg_len
    (n_entries,) = struct.unpack_from("<I", body, off)
    off += 4

    tensors: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + name_len].decode("utf-8")
        off += name_len
        flag, ndim = struct.unpack_from("<BB", body, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
        if flag:
            tensors[name] = Tensor(arr, requires_grad=True)
        else:
            buffers[name] = arr

    bn_states: dict[str, BatchNormState] = {}
    for name, arr in buffers.items():
        if name.endswith(".running_mean"):
            base = name[: -len(".running_mean")]
            bn_states[base] = BatchNormState(arr, buffers[f"{base}.running_var"])
    return ModelParams(config, tensors, bn_states)
