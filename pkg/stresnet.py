"""
stresnet.py — Deep spatio-temporal residual network for crowd-flow grids.

Four components feed one output:
  closeness / period / trend branches : Conv1 → L residual units → Conv2
  external branch                      : FC → ReLU → FC, reshaped to 2×I×J
The three temporal outputs are fused with learnable per-region weight
matrices (Hadamard products), the external output is added, and tanh bounds
the prediction to (−1, 1).
"""
import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

import tensor as T
from config import (
    BN_EPSILON,
    BN_MOMENTUM,
    DEFAULT_EXT_HIDDEN,
    DEFAULT_FILTERS,
    DEFAULT_KERNEL,
    DEFAULT_LEN_CLOSENESS,
    DEFAULT_LEN_PERIOD,
    DEFAULT_LEN_TREND,
    DEFAULT_RESIDUAL_UNITS,
)

logger = logging.getLogger(__name__)

BRANCHES = ("c", "p", "q")
_BUFFER_SUFFIXES = (".running_mean", ".running_var")


# ── Configuration ──────────────────────────────────────────────────────────────

class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    rows: int = Field(ge=1)
    cols: int = Field(ge=1)
    len_closeness: int = Field(default=DEFAULT_LEN_CLOSENESS, ge=0)
    len_period: int = Field(default=DEFAULT_LEN_PERIOD, ge=0)
    len_trend: int = Field(default=DEFAULT_LEN_TREND, ge=0)
    period: int = Field(default=48, ge=1)
    trend_span: int = Field(default=336, ge=1)
    residual_units: int = Field(default=DEFAULT_RESIDUAL_UNITS, ge=0)
    filters: int = Field(default=DEFAULT_FILTERS, ge=1)
    kernel: int = Field(default=DEFAULT_KERNEL, ge=1)
    use_bn: bool = False
    res_convs: Literal[1, 2] = 2
    ext_dim: int = Field(default=0, ge=0)
    ext_hidden: int = Field(default=DEFAULT_EXT_HIDDEN, ge=1)
    fusion: Literal["matrix", "sum"] = "matrix"
    fusion_shared_channels: bool = False
    conv1_relu: bool = True
    bn_eps: float = BN_EPSILON
    bn_momentum: float = BN_MOMENTUM

    @model_validator(mode="after")
    def _check_lengths(self) -> "ModelConfig":
        if self.len_closeness == 0 and self.len_period == 0 and self.len_trend == 0:
            raise ValueError("at least one of len_closeness, len_period, len_trend must be > 0")
        return self

    def branch_length(self, branch: str) -> int:
        return {"c": self.len_closeness, "p": self.len_period, "q": self.len_trend}[branch]

    def branch_step(self, branch: str) -> int:
        return {"c": 1, "p": self.period, "q": self.trend_span}[branch]

    @property
    def active_branches(self) -> list[str]:
        return [b for b in BRANCHES if self.branch_length(b) > 0]

    def lags(self, branch: str) -> list[int]:
        """Offsets into the past for a branch, oldest first (t − lag)."""
        step = self.branch_step(branch)
        return [i * step for i in range(self.branch_length(branch), 0, -1)]

    @property
    def max_lag(self) -> int:
        return max(self.branch_length(b) * self.branch_step(b) for b in BRANCHES)

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return (2, self.rows, self.cols)


# ── Parameters ─────────────────────────────────────────────────────────────────

@dataclass
class ParameterSet:
    """Name-keyed model tensors; BN running statistics ride along as buffers."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if not n.endswith(_BUFFER_SUFFIXES)]

    def copy(self) -> "ParameterSet":
        return ParameterSet({n: a.copy() for n, a in self.tensors.items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.tensors.values())

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors


@dataclass
class ModelInputs:
    """Batched model inputs; branch inputs are N×2l×I×J, externals N×ext_dim."""

    closeness: np.ndarray | None = None
    period: np.ndarray | None = None
    trend: np.ndarray | None = None
    external: np.ndarray | None = None

    def branch(self, b: str) -> np.ndarray | None:
        return {"c": self.closeness, "p": self.period, "q": self.trend}[b]

    @property
    def batch_size(self) -> int:
        for arr in (self.closeness, self.period, self.trend, self.external):
            if arr is not None:
                return len(arr)
        return 0


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(config: ModelConfig, seed: int = 0) -> ParameterSet:
    """
    Initialise every tensor: Glorot-uniform weights, zero biases, fusion
    matrices at 1/(number of active branches), BN at identity.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    k, f = config.kernel, config.filters

    def conv(name: str, c_in: int, c_out: int) -> None:
        s = glorot_bound(c_in * k * k, c_out * k * k)
        params[f"{name}.w"] = rng.uniform(-s, s, size=(c_out, c_in, k, k))
        params[f"{name}.b"] = np.zeros(c_out)

    def bn(name: str, c: int) -> None:
        params[f"{name}.gamma"] = np.ones(c)
        params[f"{name}.beta"] = np.zeros(c)
        params[f"{name}.running_mean"] = np.zeros(c)
        params[f"{name}.running_var"] = np.ones(c)

    def fc(name: str, n_in: int, n_out: int) -> None:
        s = glorot_bound(n_in, n_out)
        params[f"{name}.w"] = rng.uniform(-s, s, size=(n_out, n_in))
        params[f"{name}.b"] = np.zeros(n_out)

    active = config.active_branches
    for b in active:
        conv(f"{b}.conv1", 2 * config.branch_length(b), f)
        for u in range(config.residual_units):
            for v in range(config.res_convs):
                if config.use_bn:
                    bn(f"{b}.res{u}.bn{v}", f)
                conv(f"{b}.res{u}.conv{v}", f, f)
        conv(f"{b}.conv2", f, 2)
        if config.fusion == "matrix":
            channels = 1 if config.fusion_shared_channels else 2
            params[f"fusion.{b}"] = np.full((channels, config.rows, config.cols), 1.0 / len(active))

    if config.ext_dim > 0:
        fc("ext.fc1", config.ext_dim, config.ext_hidden)
        fc("ext.fc2", config.ext_hidden, 2 * config.rows * config.cols)

    logger.debug("Initialised %d tensors (seed=%d).", len(params), seed)
    return ParameterSet(params)


# ── Components ─────────────────────────────────────────────────────────────────

def residual_unit(
    leaves: dict[str, T.Tensor],
    config: ModelConfig,
    prefix: str,
    x: T.Tensor,
    training: bool = False,
    updates: dict[str, np.ndarray] | None = None,
) -> T.Tensor:
    """X + F(X) with F = [BN] → ReLU → Conv, repeated res_convs times."""
    h = x
    for v in range(config.res_convs):
        if config.use_bn:
            name = f"{prefix}.bn{v}"
            h, rm, rv = T.batch_norm(
                h, leaves[f"{name}.gamma"], leaves[f"{name}.beta"],
                leaves[f"{name}.running_mean"].data, leaves[f"{name}.running_var"].data,
                training, config.bn_momentum, config.bn_eps,
            )
            if updates is not None and training:
                updates[f"{name}.running_mean"] = rm
                updates[f"{name}.running_var"] = rv
        h = T.relu(h)
        h = T.conv2d_same(h, leaves[f"{prefix}.conv{v}.w"], leaves[f"{prefix}.conv{v}.b"])
    return T.add(x, h)


def branch_forward(
    leaves: dict[str, T.Tensor],
    config: ModelConfig,
    branch: str,
    x: T.Tensor,
    training: bool = False,
    updates: dict[str, np.ndarray] | None = None,
) -> T.Tensor:
    """Conv1 → L residual units → Conv2 for one temporal branch."""
    expected = 2 * config.branch_length(branch)
    if x.shape[-3] != expected:
        raise T.ShapeError(
            f"branch {branch!r} expects {expected} input channels, got {x.shape[-3]}"
        )
    h = T.conv2d_same(x, leaves[f"{branch}.conv1.w"], leaves[f"{branch}.conv1.b"])
    if config.conv1_relu:
        h = T.relu(h)
    for u in range(config.residual_units):
        h = residual_unit(leaves, config, f"{branch}.res{u}", h, training, updates)
    return T.conv2d_same(h, leaves[f"{branch}.conv2.w"], leaves[f"{branch}.conv2.b"])


def external_forward(leaves: dict[str, T.Tensor], config: ModelConfig, e: T.Tensor) -> T.Tensor:
    """FC → ReLU → FC to 2·I·J, reshaped to (N,) 2×I×J."""
    if e.shape[-1] != config.ext_dim:
        raise T.ShapeError(f"external input has {e.shape[-1]} features, expected {config.ext_dim}")
    h = T.relu(T.fully_connected(e, leaves["ext.fc1.w"], leaves["ext.fc1.b"]))
    h = T.fully_connected(h, leaves["ext.fc2.w"], leaves["ext.fc2.b"])
    return T.reshape(h, e.shape[:-1] + config.output_shape)


def fuse(
    x_c: T.Tensor | None,
    x_p: T.Tensor | None,
    x_q: T.Tensor | None,
    w_c: T.Tensor | None = None,
    w_p: T.Tensor | None = None,
    w_q: T.Tensor | None = None,
) -> T.Tensor:
    """
    W_c∘X_c + W_p∘X_p + W_q∘X_q.

    An absent branch (None output) contributes nothing; a None weight means
    plain summation for that branch.
    """
    total = None
    for x, w in ((x_c, w_c), (x_p, w_p), (x_q, w_q)):
        if x is None:
            continue
        term = x if w is None else T.hadamard(w, x)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("fuse needs at least one branch output")
    return total


def forward_graph(
    leaves: dict[str, T.Tensor],
    config: ModelConfig,
    inputs: ModelInputs,
    training: bool = False,
    updates: dict[str, np.ndarray] | None = None,
) -> T.Tensor:
    """Full model on tensor leaves: tanh(fuse(branches) + external)."""
    _check_inputs(config, inputs)
    outs: dict[str, T.Tensor | None] = {b: None for b in BRANCHES}
    weights: dict[str, T.Tensor | None] = {b: None for b in BRANCHES}
    for b in config.active_branches:
        outs[b] = branch_forward(leaves, config, b, T.constant(inputs.branch(b)), training, updates)
        weights[b] = leaves.get(f"fusion.{b}")
    res = fuse(outs["c"], outs["p"], outs["q"], weights["c"], weights["p"], weights["q"])
    if config.ext_dim > 0:
        res = T.add(res, external_forward(leaves, config, T.constant(inputs.external)))
    return T.tanh_op(res)


def forward(params: ParameterSet, config: ModelConfig, inputs: ModelInputs) -> np.ndarray:
    """Inference-mode prediction X̂ (N×2×I×J), every element in (−1, 1)."""
    with T.no_grad():
        leaves = T.leaves(params.tensors, ())
        return forward_graph(leaves, config, inputs, training=False).data


def loss(params: ParameterSet, config: ModelConfig, inputs: ModelInputs, target: np.ndarray) -> float:
    """MSE between the inference-mode prediction and the normalised target."""
    with T.no_grad():
        leaves = T.leaves(params.tensors, ())
        pred = forward_graph(leaves, config, inputs, training=False)
        return T.mse_loss(pred, T.constant(target)).item()


def loss_and_grads(
    params: ParameterSet,
    config: ModelConfig,
    inputs: ModelInputs,
    target: np.ndarray,
    training: bool = True,
) -> tuple[float, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """
    Loss, gradients of every trainable tensor, and BN running-stat updates.
    """
    leaves = T.leaves(params.tensors, params.trainable_names())
    updates: dict[str, np.ndarray] = {}
    pred = forward_graph(leaves, config, inputs, training=training, updates=updates)
    value = T.mse_loss(pred, T.constant(target))
    trainable = {n: leaves[n] for n in params.trainable_names()}
    grads = T.backward(value, trainable)
    return value.item(), grads, updates


# ── Private helpers ────────────────────────────────────────────────────────────

def _check_inputs(config: ModelConfig, inputs: ModelInputs) -> None:
    n = inputs.batch_size
    for b in config.active_branches:
        arr = inputs.branch(b)
        want = (2 * config.branch_length(b), config.rows, config.cols)
        if arr is None or arr.ndim != 4 or arr.shape[1:] != want or len(arr) != n:
            got = None if arr is None else arr.shape
            raise T.ShapeError(f"branch {b!r} input {got} inconsistent with (N,) + {want}")
    if config.ext_dim > 0:
        ext = inputs.external
        if ext is None or ext.shape != (n, config.ext_dim):
            got = None if ext is None else ext.shape
            raise T.ShapeError(f"external input {got} inconsistent with ({n}, {config.ext_dim})")
