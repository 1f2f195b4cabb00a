"""Parameter containers and forward passes for all networks in the pipeline.

Four parameter groups: the encoder (MLP trunk plus a linear projection into
the embedding space where prototypes live), the prototype matrix, a binary
domain classifier, and a 4-way rotation classifier whose MC-dropout
posterior drives acquisition. Checkpoints serialize every tensor by name
together with a config fingerprint and the pipeline stage index.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .container import MAGIC_CHECKPOINT, check_magic, read_tensor_map, write_tensor_map
from .errors import ConfigError, ContractError, FormatError, ShapeError


@dataclass
class EncoderParams:
    """MLP layers (weight d_out x d_in, bias d_out) plus a p x d projection."""

    layers: list[tuple[Tensor, Tensor]]
    projection: Tensor

    def __post_init__(self) -> None:
        for i in range(len(self.layers) - 1):
            d_out = self.layers[i][0].shape[0]
            d_in_next = self.layers[i + 1][0].shape[1]
            if d_out != d_in_next:
                raise ShapeError(
                    f"encoder layer {i} outputs {d_out} but layer {i + 1} "
                    f"expects {d_in_next}")
        if self.projection.shape[1] != self.layers[-1][0].shape[0]:
            raise ShapeError(
                f"projection expects {self.projection.shape[1]} inputs but the "
                f"last layer outputs {self.layers[-1][0].shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.projection.shape[0]


@dataclass
class Prototypes:
    """K unit-norm cluster vectors, rows of a K x p matrix."""

    vectors: Tensor

    @property
    def k(self) -> int:
        return self.vectors.shape[0]


@dataclass
class DomainClassifierParams:
    """Two dense layers ending in a single-logit head."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class RotationClassifierParams:
    """Encoder-shaped trunk plus a 4-way head; dropout on the trunk output."""

    trunk: EncoderParams
    head_w: Tensor
    head_b: Tensor
    dropout_rate: float = 0.25

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(
                f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


@dataclass
class ModelParams:
    """Everything trainable: encoder, prototypes, domain and rotation heads."""

    encoder: EncoderParams
    prototypes: Prototypes
    domain: DomainClassifierParams
    rotation: RotationClassifierParams


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_encoder(rng: np.random.Generator, in_dim: int,
                 widths: tuple[int, ...] = (128, 128),
                 embed_dim: int = 32) -> EncoderParams:
    layers = []
    prev = in_dim
    for w in widths:
        weight = rng.normal(0.0, np.sqrt(2.0 / prev), size=(w, prev))
        layers.append((Tensor(weight, requires_grad=True),
                       Tensor(np.zeros(w), requires_grad=True)))
        prev = w
    proj = rng.normal(0.0, 1.0 / np.sqrt(prev), size=(embed_dim, prev))
    return EncoderParams(layers, Tensor(proj, requires_grad=True))


def init_prototypes(rng: np.random.Generator, k: int, embed_dim: int) -> Prototypes:
    c = rng.normal(size=(k, embed_dim))
    c /= np.linalg.norm(c, axis=1, keepdims=True) + ad.NORM_EPS
    return Prototypes(Tensor(c, requires_grad=True))


def init_domain_classifier(rng: np.random.Generator, embed_dim: int,
                           hidden: int = 64) -> DomainClassifierParams:
    return DomainClassifierParams(
        w1=Tensor(rng.normal(0.0, np.sqrt(2.0 / embed_dim), size=(hidden, embed_dim)),
                  requires_grad=True),
        b1=Tensor(np.zeros(hidden), requires_grad=True),
        w2=Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(1, hidden)),
                  requires_grad=True),
        b2=Tensor(np.zeros(1), requires_grad=True),
    )


def init_rotation_classifier(rng: np.random.Generator, trunk: EncoderParams,
                             dropout_rate: float = 0.25) -> RotationClassifierParams:
    """Head is fresh; the trunk is a deep copy of the given encoder."""
    p = trunk.embed_dim
    return RotationClassifierParams(
        trunk=clone_encoder(trunk),
        head_w=Tensor(rng.normal(0.0, 1.0 / np.sqrt(p), size=(4, p)),
                      requires_grad=True),
        head_b=Tensor(np.zeros(4), requires_grad=True),
        dropout_rate=dropout_rate,
    )


def clone_encoder(enc: EncoderParams) -> EncoderParams:
    layers = [(Tensor(w.data.copy(), requires_grad=True),
               Tensor(b.data.copy(), requires_grad=True)) for w, b in enc.layers]
    return EncoderParams(layers, Tensor(enc.projection.data.copy(),
                                        requires_grad=True))


def clone_models(mp: ModelParams) -> ModelParams:
    return from_tensor_map(to_tensor_map(mp))


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def encode(params: EncoderParams, batch, normalize: bool = False) -> Tensor:
    """Map a B x d_in batch to B x p embeddings, optionally unit-normalized."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(
            f"encode: batch shape {x.shape} does not match input width "
            f"{params.in_dim}")
    h = x
    for w, b in params.layers:
        h = ad.relu(ad.add_bias(ad.matmul(h, ad.transpose(w)), b))
    z = ad.matmul(h, ad.transpose(params.projection))
    if normalize:
        z = ad.l2_normalize(z, axis=1)
    return z


def prototype_scores(z: Tensor, protos: Prototypes, tau: float) -> Tensor:
    """Scaled prototype similarities: scores[i][k] = dot(z_i, c_k) / tau.

    Row norms are checked loosely (1e-4) so numerical probes near the unit
    sphere remain valid inputs.
    """
    if tau <= 0:
        raise ConfigError(f"temperature tau must be positive, got {tau}")
    norms = np.linalg.norm(z.data, axis=1)
    if np.max(np.abs(norms - 1.0)) > 1e-4:
        raise ContractError("prototype_scores expects unit-norm embedding rows")
    return ad.mul(ad.matmul(z, ad.transpose(protos.vectors)), 1.0 / tau)


def domain_prob(dp: DomainClassifierParams, z: Tensor) -> Tensor:
    """Probability that each embedding row came from the source model."""
    h = ad.relu(ad.add_bias(ad.matmul(z, ad.transpose(dp.w1)), dp.b1))
    logit = ad.add_bias(ad.matmul(h, ad.transpose(dp.w2)), dp.b2)
    return ad.reshape(ad.sigmoid(logit), (z.shape[0],))


def rotation_predict(rp: RotationClassifierParams, x,
                     mask: np.ndarray | None = None) -> Tensor:
    """4-way rotation probabilities; mask=None means evaluation mode."""
    feats = encode(rp.trunk, x)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != feats.shape:
            raise ShapeError(
                f"rotation dropout mask shape {mask.shape} does not match "
                f"activation shape {feats.shape}")
        feats = ad.dropout(feats, mask)
    logits = ad.add_bias(ad.matmul(feats, ad.transpose(rp.head_w)), rp.head_b)
    return ad.softmax(logits, axis=1)


# ---------------------------------------------------------------------------
# Named-tensor maps and checkpoints
# ---------------------------------------------------------------------------

def encoder_tensor_map(prefix: str, enc: EncoderParams) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for i, (w, b) in enumerate(enc.layers):
        out[f"{prefix}.layer{i}.weight"] = w
        out[f"{prefix}.layer{i}.bias"] = b
    out[f"{prefix}.projection"] = enc.projection
    return out


def named_tensors(mp: ModelParams) -> dict[str, Tensor]:
    """Stable name -> Tensor map over every trainable tensor."""
    out = encoder_tensor_map("encoder", mp.encoder)
    out["prototypes.vectors"] = mp.prototypes.vectors
    out["domain.fc.weight"] = mp.domain.w1
    out["domain.fc.bias"] = mp.domain.b1
    out["domain.logit.weight"] = mp.domain.w2
    out["domain.logit.bias"] = mp.domain.b2
    out.update(encoder_tensor_map("rotation.trunk", mp.rotation.trunk))
    out["rotation.head.weight"] = mp.rotation.head_w
    out["rotation.head.bias"] = mp.rotation.head_b
    return out


def to_tensor_map(mp: ModelParams) -> dict[str, np.ndarray]:
    arrays = {name: t.data.copy() for name, t in named_tensors(mp).items()}
    arrays["rotation.dropout_rate"] = np.asarray(mp.rotation.dropout_rate)
    return arrays


def _read_encoder(prefix: str, arrays: dict[str, np.ndarray]) -> EncoderParams:
    layers = []
    i = 0
    while f"{prefix}.layer{i}.weight" in arrays:
        layers.append((Tensor(arrays[f"{prefix}.layer{i}.weight"].copy(),
                              requires_grad=True),
                       Tensor(arrays[f"{prefix}.layer{i}.bias"].copy(),
                              requires_grad=True)))
        i += 1
    if not layers or f"{prefix}.projection" not in arrays:
        raise FormatError(f"checkpoint is missing tensors for {prefix!r}")
    # Copies above keep rebuilt models from aliasing the checkpoint arrays.
    return EncoderParams(layers, Tensor(arrays[f"{prefix}.projection"].copy(),
                                        requires_grad=True))


def from_tensor_map(arrays: dict[str, np.ndarray]) -> ModelParams:
    def grab(name: str) -> Tensor:
        if name not in arrays:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        return Tensor(arrays[name].copy(), requires_grad=True)

    return ModelParams(
        encoder=_read_encoder("encoder", arrays),
        prototypes=Prototypes(grab("prototypes.vectors")),
        domain=DomainClassifierParams(
            w1=grab("domain.fc.weight"), b1=grab("domain.fc.bias"),
            w2=grab("domain.logit.weight"), b2=grab("domain.logit.bias")),
        rotation=RotationClassifierParams(
            trunk=_read_encoder("rotation.trunk", arrays),
            head_w=grab("rotation.head.weight"),
            head_b=grab("rotation.head.bias"),
            dropout_rate=float(arrays.get("rotation.dropout_rate", 0.25))),
    )


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash of UTF-8 text."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class Checkpoint:
    """Named tensor map plus a config fingerprint and pipeline stage index."""

    tensors: dict[str, np.ndarray]
    fingerprint: int = 0
    stage: int = 0

    def models(self) -> ModelParams:
        return from_tensor_map(self.tensors)

    @classmethod
    def of(cls, mp: ModelParams, fingerprint: int = 0, stage: int = 0) -> "Checkpoint":
        return cls(to_tensor_map(mp), fingerprint, stage)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    import struct

    with open(path, "wb") as f:
        f.write(MAGIC_CHECKPOINT)
        write_tensor_map(f, ckpt.tensors)
        f.write(struct.pack("<QQ", ckpt.fingerprint, ckpt.stage))


def load_checkpoint(path: str | Path) -> Checkpoint:
    import struct

    with open(path, "rb") as f:
        check_magic(f, MAGIC_CHECKPOINT)
        tensors = read_tensor_map(f)
        trailer = f.read(16)
        if len(trailer) != 16:
            raise FormatError(
                f"truncated checkpoint trailer at byte offset {f.tell() - len(trailer)}")
        fingerprint, stage = struct.unpack("<QQ", trailer)
    return Checkpoint(tensors, fingerprint, int(stage))
