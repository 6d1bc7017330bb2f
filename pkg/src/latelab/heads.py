"""Projection heads: construction, evaluation, and serialization.

A head maps backbone token vectors of dimension d to output dimension k and
L2-normalizes the result, exactly once, at the very end.  Supported variants:

* plain FFN stacks ``d -> m -> ... -> m -> k`` with an activation on every
  non-final layer (identity allowed), where ``m = round(rho * d)``;
* GLU stacks where each layer is a gated block ``(x Wv) * psi(x Wg)``;
* residual wiring: an identity-initialized ``d x m`` upcast carries the input
  into the intermediate space, each non-final block computes
  ``skip + alpha * block(x)`` with one learned scalar ``alpha`` per block, and
  the final down-projection carries no residual (its dimensions differ).

The depth-1 FFN head without residual is exactly the classic single-matrix
projection ``normalize(x W)``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, FormatError, ShapeError
from .rng import PortableRng

FAMILIES = ("ffn", "glu")

HEAD_MAGIC = b"LIHD"
HEAD_FORMAT_VERSION = 1


@dataclass(frozen=True)
class HeadConfig:
    """Declarative description of one projection-head variant."""

    input_dim: int
    output_dim: int
    depth: int = 1
    family: str = "ffn"
    activation: str = "identity"  # applied to non-final layer outputs
    gate: str = "sigmoid"  # GLU only
    rho: float = 1.0  # intermediate dim m = round(rho * input_dim)
    residual: bool = False
    bias: bool | None = None  # None = family default (FFN stacks yes, else no)
    alpha_init: float = 1.0

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError(
                f"dimensions must be positive, got d={self.input_dim}, k={self.output_dim}"
            )
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        if self.activation not in ad.ACTIVATION_KINDS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.gate not in ad.ACTIVATION_KINDS:
            raise ConfigError(f"unknown gate {self.gate!r}")
        if not (self.rho > 0.0):
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if int(round(self.rho * self.input_dim)) < 1:
            raise ConfigError(
                f"intermediate dimension round({self.rho} * {self.input_dim}) < 1"
            )

    @property
    def intermediate_dim(self) -> int:
        return int(round(self.rho * self.input_dim))

    @property
    def use_bias(self) -> bool:
        if self.bias is not None:
            return self.bias
        return self.family == "ffn" and self.depth >= 2

    @property
    def has_residual(self) -> bool:
        # The single layer of a depth-1 head is the final down-projection,
        # which never carries a residual, so the flag is inert there.
        return self.residual and self.depth >= 2

    def layer_dims(self) -> list[tuple[int, int]]:
        """(in, out) per layer: d -> m -> ... -> m -> k (or d -> k at depth 1)."""
        if self.depth == 1:
            return [(self.input_dim, self.output_dim)]
        m = self.intermediate_dim
        dims = [(self.input_dim, m)]
        dims += [(m, m)] * (self.depth - 2)
        dims.append((m, self.output_dim))
        return dims

    def tensor_shapes(self) -> list[tuple[str, int, int]]:
        """Parameter tensors in declaration order (also the wire order)."""
        shapes: list[tuple[str, int, int]] = []
        if self.has_residual:
            shapes.append(("upcast", self.input_dim, self.intermediate_dim))
        for i, (din, dout) in enumerate(self.layer_dims()):
            if self.family == "ffn":
                shapes.append((f"w{i}", din, dout))
                if self.use_bias:
                    shapes.append((f"b{i}", 1, dout))
            else:
                shapes.append((f"wv{i}", din, dout))
                shapes.append((f"wg{i}", din, dout))
                if self.use_bias:
                    shapes.append((f"bv{i}", 1, dout))
                    shapes.append((f"bg{i}", 1, dout))
        if self.has_residual:
            for i in range(self.depth - 1):
                shapes.append((f"alpha{i}", 1, 1))
        return shapes

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "depth": self.depth,
            "family": self.family,
            "activation": self.activation,
            "gate": self.gate,
            "rho": self.rho,
            "residual": self.residual,
            "bias": self.bias,
            "alpha_init": self.alpha_init,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "HeadConfig":
        try:
            return cls(**{k: data[k] for k in cls.__dataclass_fields__})
        except KeyError as exc:
            raise ConfigError(f"head config missing field {exc.args[0]!r}") from None

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


@dataclass
class HeadParams:
    """Learned tensors of one head, keyed by declared name in declared order."""

    config: HeadConfig
    tensors: dict[str, np.ndarray]
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def copy(self) -> "HeadParams":
        return HeadParams(
            config=self.config,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            seed=self.seed,
            metadata=dict(self.metadata),
        )

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, _, _ in self.config.tensor_shapes():
            digest.update(name.encode())
            digest.update(self.tensors[name].astype("<f8").tobytes())
        return digest.hexdigest()

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.tensors.items())


def is_weight_matrix(name: str) -> bool:
    """True for the tensors weight decay applies to (not biases, not alphas)."""
    return name.startswith(("w", "upcast"))


def parameter_count(config: HeadConfig) -> int:
    """Number of learnable scalars, including biases, gates, upcast, and alphas."""
    return sum(rows * cols for _, rows, cols in config.tensor_shapes())


def build_head(config: HeadConfig, seed: int) -> HeadParams:
    """Deterministically initialize a head from a seed.

    Weight matrices use the fan-balanced uniform range
    +-sqrt(6/(fan_in+fan_out)), drawn row-major from the portable generator;
    the residual upcast starts as a (rectangular) identity, biases as zero,
    and each alpha at ``alpha_init``.
    """
    rng = PortableRng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, rows, cols in config.tensor_shapes():
        if name == "upcast":
            tensors[name] = np.eye(rows, cols)
        elif name.startswith("alpha"):
            tensors[name] = np.array([[config.alpha_init]])
        elif name.startswith("b"):
            tensors[name] = np.zeros((rows, cols))
        else:
            bound = np.sqrt(6.0 / (rows + cols))
            flat = [rng.uniform(-bound, bound) for _ in range(rows * cols)]
            tensors[name] = np.array(flat).reshape(rows, cols)
    return HeadParams(config=config, tensors=tensors, seed=seed)


def forward_graph(
    config: HeadConfig,
    tensors: Mapping[str, ad.Tensor],
    x: ad.Tensor,
    normalize: bool = True,
) -> ad.Tensor:
    """Build the head's computation graph on whatever tape ``x``/tensors carry."""
    if x.cols != config.input_dim:
        raise ShapeError(
            f"head expects input dim {config.input_dim}, got {x.cols}"
        )
    skip = ad.matmul(x, tensors["upcast"]) if config.has_residual else None
    h = x
    for i in range(config.depth):
        final = i == config.depth - 1
        if config.family == "ffn":
            z = ad.matmul(h, tensors[f"w{i}"])
            if config.use_bias:
                z = ad.add(z, tensors[f"b{i}"])
        else:
            value = ad.matmul(h, tensors[f"wv{i}"])
            gate = ad.matmul(h, tensors[f"wg{i}"])
            if config.use_bias:
                value = ad.add(value, tensors[f"bv{i}"])
                gate = ad.add(gate, tensors[f"bg{i}"])
            z = ad.mul(value, ad.activation(gate, config.gate))
        if not final:
            if config.activation != "identity":
                z = ad.activation(z, config.activation)
            if config.has_residual:
                z = ad.add(skip if i == 0 else h, ad.scale(z, tensors[f"alpha{i}"]))
        h = z
    return ad.row_l2_normalize(h) if normalize else h


def as_constant_tensors(params: HeadParams) -> dict[str, ad.Tensor]:
    return {name: ad.constant(arr) for name, arr in params.tensors.items()}


def head_forward(params: HeadParams, tokens, normalize: bool = True) -> np.ndarray:
    """Project a token matrix through the head (pure evaluation, no tape)."""
    x = ad.constant(tokens)
    return forward_graph(params.config, as_constant_tensors(params), x, normalize).value


def effective_linear_map(params: HeadParams) -> np.ndarray:
    """Collapse a globally linear head into its single d x k matrix.

    Only valid when nothing breaks global linearity: FFN family, identity
    activation on non-final layers, no residual, no biases.
    """
    cfg = params.config
    if cfg.family != "ffn":
        raise ContractError("effective_linear_map: GLU heads are not linear")
    if cfg.depth > 1 and cfg.activation != "identity":
        raise ContractError(
            f"effective_linear_map: activation {cfg.activation!r} breaks linearity"
        )
    if cfg.has_residual:
        raise ContractError("effective_linear_map: residual connections break linearity")
    if cfg.use_bias:
        raise ContractError("effective_linear_map: biases break linearity")
    result = params.tensors["w0"]
    for i in range(1, cfg.depth):
        result = result @ params.tensors[f"w{i}"]
    return result


def serialize_head(params: HeadParams) -> bytes:
    """Two-part format: JSON header, then shape-prefixed little-endian f64 data.

    Layout: magic, u32 format version, u32 header length, header JSON, then
    per tensor (declaration order) u32 rows, u32 cols, rows*cols f64 values.
    Round trips are bit-exact.
    """
    shapes = params.config.tensor_shapes()
    header = {
        "format_version": HEAD_FORMAT_VERSION,
        "config": params.config.to_dict(),
        "config_hash": params.config.config_hash(),
        "seed": params.seed,
        "metadata": params.metadata,
        "tensors": [[name, rows, cols] for name, rows, cols in shapes],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    parts = [HEAD_MAGIC, struct.pack("<II", HEAD_FORMAT_VERSION, len(header_bytes)), header_bytes]
    for name, rows, cols in shapes:
        arr = params.tensors[name]
        if arr.shape != (rows, cols):
            raise ContractError(
                f"tensor {name!r} has shape {arr.shape}, declared ({rows}, {cols})"
            )
        parts.append(struct.pack("<II", rows, cols))
        parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


def deserialize_head(blob: bytes, expected_config: HeadConfig | None = None) -> HeadParams:
    """Inverse of :func:`serialize_head`; errors carry the failing byte offset."""

    def need(offset: int, count: int) -> bytes:
        if offset + count > len(blob):
            raise FormatError(
                f"truncated head payload at offset {offset}: "
                f"need {count} bytes, have {len(blob) - offset}"
            )
        return blob[offset : offset + count]

    offset = 0
    if need(offset, 4) != HEAD_MAGIC:
        raise FormatError(f"bad magic at offset 0: {blob[:4]!r}")
    offset += 4
    version, header_len = struct.unpack("<II", need(offset, 8))
    offset += 8
    if version != HEAD_FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} at offset 4")
    try:
        header = json.loads(need(offset, header_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header at offset {offset}: {exc}") from None
    offset += header_len

    config = HeadConfig.from_dict(header.get("config", {}))
    if expected_config is not None and expected_config.config_hash() != header.get("config_hash"):
        raise FormatError(
            f"config hash mismatch: file has {header.get('config_hash')}, "
            f"expected {expected_config.config_hash()}"
        )
    declared = [(str(n), int(r), int(c)) for n, r, c in header.get("tensors", [])]
    if declared != config.tensor_shapes():
        raise FormatError("header tensor list does not match the declared config")

    tensors: dict[str, np.ndarray] = {}
    for name, rows, cols in declared:
        shape_offset = offset
        rows_read, cols_read = struct.unpack("<II", need(offset, 8))
        offset += 8
        if (rows_read, cols_read) != (rows, cols):
            raise FormatError(
                f"tensor {name!r} at offset {shape_offset}: shape "
                f"({rows_read}, {cols_read}) does not match declared ({rows}, {cols})"
            )
        raw = need(offset, rows * cols * 8)
        offset += rows * cols * 8
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes at offset {offset}")
    return HeadParams(
        config=config,
        tensors=tensors,
        seed=int(header.get("seed", 0)),
        metadata=dict(header.get("metadata", {})),
    )


def save_head(path, params: HeadParams) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_head(params))


def load_head(path, expected_config: HeadConfig | None = None) -> HeadParams:
    with open(path, "rb") as fh:
        return deserialize_head(fh.read(), expected_config)
