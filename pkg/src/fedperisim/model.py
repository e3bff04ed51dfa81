"""Multi-task perioperative risk network, preoperative and postoperative.

Three typed preoperative branches (dense stacks over continuous and
binary+presence inputs, embeddings + dense stack over high-cardinality
ids) fuse into one latent.  The postoperative variant adds a bidirectional
GRU encoder with additive attention over the intraoperative series and a
linear combine layer, then nine sigmoid heads score the outcomes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .rng import stream

PREOPERATIVE = "preoperative"
POSTOPERATIVE = "postoperative"

CHECKPOINT_MAGIC = b"FPSM"
CHECKPOINT_VERSION = 1

# Additive mask value: exp(-1e30 - max) underflows to exactly 0, so padded
# steps get zero attention without producing NaN/Inf.
_MASK_OFF = -1e30


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of every branch.  Defaults train in minutes on CPU."""

    variant: str
    n_continuous: int
    n_binary: int
    cat_vocab_sizes: tuple
    n_channels: int
    continuous_hidden: tuple = (64, 32)
    binary_hidden: tuple = (32,)
    categorical_hidden: tuple = (32,)
    embedding_dim: int = 8
    fusion_dim: int = 64
    gru_hidden: int = 32
    attention_dim: int = 32
    head_dim: int = 16
    n_outcomes: int = 9

    def __post_init__(self):
        if self.variant not in (PREOPERATIVE, POSTOPERATIVE):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.n_outcomes != 9:
            raise ConfigError("the risk model has exactly nine outcome heads")
        dims = [self.n_continuous, self.n_binary, self.embedding_dim,
                self.fusion_dim, self.gru_hidden, self.attention_dim,
                self.head_dim, self.n_channels,
                *self.continuous_hidden, *self.binary_hidden,
                *self.categorical_hidden, *self.cat_vocab_sizes]
        if any(d < 1 for d in dims):
            raise ConfigError("all model dimensions must be >= 1")

    @property
    def n_binary_inputs(self):
        # binary values + continuous presence + binary presence
        return self.n_binary + self.n_continuous + self.n_binary

    @property
    def encoder_input(self):
        # channel values concatenated with channel presence flags
        return 2 * self.n_channels

    def to_json(self):
        d = asdict(self)
        d["cat_vocab_sizes"] = list(self.cat_vocab_sizes)
        d["continuous_hidden"] = list(self.continuous_hidden)
        d["binary_hidden"] = list(self.binary_hidden)
        d["categorical_hidden"] = list(self.categorical_hidden)
        return d

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        for key in ("cat_vocab_sizes", "continuous_hidden", "binary_hidden",
                    "categorical_hidden"):
            obj[key] = tuple(obj[key])
        return cls(**obj)


def _stack_shapes(shapes, prefix, sizes):
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        shapes[f"{prefix}.{i}.w"] = (fan_in, fan_out)
        shapes[f"{prefix}.{i}.b"] = (1, fan_out)


def param_shapes(config: ModelConfig) -> dict:
    """Name -> shape for every learned tensor of this configuration."""
    shapes = {}
    _stack_shapes(shapes, "continuous", (config.n_continuous, *config.continuous_hidden))
    _stack_shapes(shapes, "binary", (config.n_binary_inputs, *config.binary_hidden))
    for j, vocab in enumerate(config.cat_vocab_sizes):
        shapes[f"embedding.{j}"] = (vocab, config.embedding_dim)
    cat_in = len(config.cat_vocab_sizes) * config.embedding_dim
    _stack_shapes(shapes, "categorical", (cat_in, *config.categorical_hidden))
    fused_in = (config.continuous_hidden[-1] + config.binary_hidden[-1]
                + config.categorical_hidden[-1])
    shapes["fusion.w"] = (fused_in, config.fusion_dim)
    shapes["fusion.b"] = (1, config.fusion_dim)
    for k in range(config.n_outcomes):
        shapes[f"head.{k}.0.w"] = (config.fusion_dim, config.head_dim)
        shapes[f"head.{k}.0.b"] = (1, config.head_dim)
        shapes[f"head.{k}.1.w"] = (config.head_dim, 1)
        shapes[f"head.{k}.1.b"] = (1, 1)
    if config.variant == POSTOPERATIVE:
        f_in = config.encoder_input
        h = config.gru_hidden
        for direction in ("fw", "bw"):
            for gate in ("z", "r", "h"):
                shapes[f"encoder.{direction}.w_{gate}"] = (f_in, h)
                shapes[f"encoder.{direction}.u_{gate}"] = (h, h)
                shapes[f"encoder.{direction}.b_{gate}"] = (1, h)
        shapes["attention.w"] = (2 * h, config.attention_dim)
        shapes["attention.v"] = (config.attention_dim, 1)
        shapes["combine.w"] = (config.fusion_dim + 2 * h, config.fusion_dim)
        shapes["combine.b"] = (1, config.fusion_dim)
    return shapes


class ModelParams:
    """Named parameter arrays with a canonical name-sorted flat view.

    flatten()/unflatten() are exact inverses bit for bit, and the flat
    length is identical for every client sharing a ModelConfig; federated
    aggregation and control variates operate on the flat view.
    """

    def __init__(self, config: ModelConfig, arrays: dict):
        expected = param_shapes(config)
        if set(arrays) != set(expected):
            raise ContractError("parameter names do not match the configuration")
        for name, arr in arrays.items():
            if arr.shape != expected[name]:
                raise ContractError(
                    f"parameter {name!r} has shape {arr.shape}, expected {expected[name]}"
                )
        self.config = config
        self.arrays = arrays

    @classmethod
    def init(cls, config: ModelConfig, seed: int):
        """Xavier-uniform dense/GRU weights, zero biases, N(0, 0.01) embeddings."""
        arrays = {}
        for name, shape in param_shapes(config).items():
            rng = stream(seed, "init", name)
            if name.startswith("embedding."):
                arrays[name] = rng.normal(0.0, 0.01, size=shape)
            elif name.endswith(".b") or ".b_" in name:
                arrays[name] = np.zeros(shape)
            else:
                bound = np.sqrt(6.0 / (shape[0] + shape[1]))
                arrays[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, arrays)

    @property
    def n_params(self):
        return sum(a.size for a in self.arrays.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in sorted(self.arrays)])

    @classmethod
    def unflatten(cls, config: ModelConfig, flat: np.ndarray):
        shapes = param_shapes(config)
        total = sum(int(np.prod(s)) for s in shapes.values())
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (total,):
            raise ContractError(f"flat vector has length {flat.shape}, expected ({total},)")
        arrays = {}
        offset = 0
        for name in sorted(shapes):
            shape = shapes[name]
            size = int(np.prod(shape))
            arrays[name] = flat[offset:offset + size].reshape(shape)
            offset += size
        return cls(config, arrays)

    def as_tensors(self, requires_grad=False) -> dict:
        return {name: Tensor(arr, requires_grad=requires_grad, name=name)
                for name, arr in self.arrays.items()}

    def save(self, path):
        flat = self.flatten()
        config_json = json.dumps(self.config.to_json(), sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            fh.write(struct.pack("<Q", flat.size))
            fh.write(struct.pack("<I", len(config_json)))
            fh.write(config_json)
            fh.write(flat.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise ContractError(f"bad checkpoint magic {magic!r}")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != CHECKPOINT_VERSION:
                raise ContractError(f"unsupported checkpoint version {version}")
            (n,) = struct.unpack("<Q", fh.read(8))
            (json_len,) = struct.unpack("<I", fh.read(4))
            config = ModelConfig.from_json(json.loads(fh.read(json_len).decode()))
            flat = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
        return cls.unflatten(config, flat)


def n_params(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def _dense_stack(x, params, prefix, n_layers, activation=ad.tanh):
    for i in range(n_layers):
        x = activation(ad.add(ad.matmul(x, params[f"{prefix}.{i}.w"]),
                              params[f"{prefix}.{i}.b"]))
    return x


def forward_preop(params: dict, config: ModelConfig, batch) -> Tensor:
    """Fuse the three preoperative branches into a [B x fusion] latent."""
    if batch.cont.shape[1] != config.n_continuous:
        raise DimensionError(
            f"expected {config.n_continuous} continuous inputs, got {batch.cont.shape[1]}")
    if batch.bins.shape[1] != config.n_binary_inputs:
        raise DimensionError(
            f"expected {config.n_binary_inputs} binary inputs, got {batch.bins.shape[1]}")
    z_cont = _dense_stack(Tensor(batch.cont), params, "continuous",
                          len(config.continuous_hidden))
    z_bin = _dense_stack(Tensor(batch.bins), params, "binary",
                         len(config.binary_hidden))
    embedded = [ad.embedding_lookup(params[f"embedding.{j}"], batch.cats[:, j])
                for j in range(len(config.cat_vocab_sizes))]
    z_cat = _dense_stack(ad.concat(embedded), params, "categorical",
                         len(config.categorical_hidden))
    fused = ad.concat([z_cont, z_bin, z_cat])
    return ad.tanh(ad.add(ad.matmul(fused, params["fusion.w"]), params["fusion.b"]))


def _gru_direction(params, prefix, steps, masks, inv_masks, batch_size, hidden):
    """Run one GRU direction over prepared per-step inputs.

    Padded steps keep the previous state (mask gating), so each record's
    states match its unpadded computation exactly.
    """
    gate_params = {f"{k}_{g}": params[f"{prefix}.{k}_{g}"]
                   for k in ("w", "u", "b") for g in ("z", "r", "h")}
    h = Tensor(np.zeros((batch_size, hidden)))
    states = []
    for x_t, m_t, im_t in zip(steps, masks, inv_masks):
        h_new = ad.gru_cell(x_t, h, gate_params)
        h = ad.add(ad.row_scale(m_t, h_new), ad.row_scale(im_t, h))
        states.append(h)
    return states


def forward_intraop(params: dict, config: ModelConfig, batch) -> Tensor:
    """Bidirectional GRU + additive attention over the series, [B x 2h]."""
    if batch.ts_vals is None:
        raise ContractError("postoperative model requires a time series batch")
    vals, pres, mask = batch.ts_vals, batch.ts_pres, batch.ts_mask
    n, t_max, _c = vals.shape
    if t_max < 1:
        raise ContractError("time series must have at least one step")

    steps = [Tensor(np.concatenate([vals[:, t, :], pres[:, t, :]], axis=1))
             for t in range(t_max)]
    masks = [Tensor(mask[:, t:t + 1]) for t in range(t_max)]
    inv_masks = [Tensor(1.0 - mask[:, t:t + 1]) for t in range(t_max)]

    fw = _gru_direction(params, "encoder.fw", steps, masks, inv_masks,
                        n, config.gru_hidden)
    bw_rev = _gru_direction(params, "encoder.bw", steps[::-1], masks[::-1],
                            inv_masks[::-1], n, config.gru_hidden)
    bw = bw_rev[::-1]

    joint = [ad.concat([fw[t], bw[t]]) for t in range(t_max)]
    scores = [ad.matmul(ad.tanh(ad.matmul(h, params["attention.w"])),
                        params["attention.v"])
              for h in joint]
    energy = ad.concat(scores)  # (n, T)
    energy = ad.add(energy, Tensor((mask - 1.0) * -_MASK_OFF))
    alpha = ad.softmax(energy)

    latent = ad.row_scale(ad.col(alpha, 0), joint[0])
    for t in range(1, t_max):
        latent = ad.add(latent, ad.row_scale(ad.col(alpha, t), joint[t]))
    return latent


def predict_scores(params: dict, config: ModelConfig, batch) -> Tensor:
    """Nine sigmoid risk scores per record, [B x 9] in (0, 1)."""
    latent = forward_preop(params, config, batch)
    if config.variant == POSTOPERATIVE:
        intraop = forward_intraop(params, config, batch)
        latent = ad.add(ad.matmul(ad.concat([latent, intraop]), params["combine.w"]),
                        params["combine.b"])  # linear combine layer
    heads = []
    for k in range(config.n_outcomes):
        hidden = ad.tanh(ad.add(ad.matmul(latent, params[f"head.{k}.0.w"]),
                                params[f"head.{k}.0.b"]))
        heads.append(ad.sigmoid(ad.add(ad.matmul(hidden, params[f"head.{k}.1.w"]),
                                       params[f"head.{k}.1.b"])))
    return ad.concat(heads)


def batch_loss(params: dict, config: ModelConfig, batch) -> Tensor:
    """Mean over records and heads of binary cross-entropy."""
    if len(batch) == 0:
        raise ContractError("loss of an empty batch is undefined")
    return ad.bce_loss(predict_scores(params, config, batch), batch.labels)


def predict_proba(params: ModelParams, batch) -> np.ndarray:
    """Forward-only scoring; pure function of (params, inputs)."""
    with ad.no_grad():
        tensors = params.as_tensors()
        return predict_scores(tensors, params.config, batch).data


def loss_and_grad(flat: np.ndarray, config: ModelConfig, batch):
    """Loss value and flat gradient at the given flat parameter vector."""
    params = ModelParams.unflatten(config, flat)
    tensors = params.as_tensors(requires_grad=True)
    ad.zero_grads(tensors.values())
    loss = batch_loss(tensors, config, batch)
    ad.backward(loss)
    grad = np.concatenate([tensors[k].gradient.ravel() for k in sorted(tensors)])
    return loss.item(), grad
