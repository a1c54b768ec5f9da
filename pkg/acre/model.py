"""
AcrE forward pass.

Query embeddings [e; r] are reshaped to a 2D map, passed through one
standard convolution and T atrous convolutions (chained in the serial
structure, side by side in the parallel one), combined with the input map
through a residual sum, flattened, projected back to the embedding size and
scored against every entity at once.
"""

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields, replace
from math import prod, sqrt

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    add,
    affine,
    batch_norm,
    concat,
    conv2d,
    conv2d_dilated,
    dropout,
    embedding_lookup,
    flatten,
    matmul,
    relu,
    repeat,
    reshape,
    sigmoid,
)

logger = logging.getLogger("acre.model")

STRUCTURES = ("serial", "parallel")
INTEGRATIONS = ("add", "concat")
RESIDUAL_MODES = ("reduce", "broadcast")
INTEGRATION_ALIASES = {"con": "concat", "cat": "concat", "sum": "add"}


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture hyperparameters.

    Attributes:
        embedding_dim: m, size of entity and relation embeddings
        reshape_height, reshape_width: n1 x n2 with n1 * n2 == 2 * m
        kernel_size: k of every k x k filter
        num_filters: F, filters per convolution stage
        num_atrous: T, number of atrous stages
        atrous_rates: rate of each atrous stage (length T)
        structure: "serial" or "parallel"
        integration: "add" or "concat" (parallel only)
        residual_mode: "reduce" (one-channel residual sum) or "broadcast"
            (input map repeated across F channels)
        use_residual: add the input map back before the ReLU
        input_dropout, feature_dropout, hidden_dropout: dropout rates at the
            input map, the feature map and the projected vector
        batch_norm: batch normalization at those three positions
    """

    embedding_dim: int = 200
    reshape_height: int = 20
    reshape_width: int = 20
    kernel_size: int = 3
    num_filters: int = 32
    num_atrous: int = 3
    atrous_rates: tuple = (1, 2, 4)
    structure: str = "serial"
    integration: str = "concat"
    residual_mode: str = "reduce"
    use_residual: bool = True
    input_dropout: float = 0.2
    feature_dropout: float = 0.2
    hidden_dropout: float = 0.3
    batch_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "atrous_rates", tuple(int(r) for r in self.atrous_rates))
        object.__setattr__(self, "integration", INTEGRATION_ALIASES.get(self.integration, self.integration))

    def problems(self):
        """Return every violated constraint as a list of messages."""
        found = []
        m, n1, n2 = self.embedding_dim, self.reshape_height, self.reshape_width
        for name in ("embedding_dim", "reshape_height", "reshape_width", "kernel_size", "num_filters"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                found.append(f"{name} must be a positive integer, got {getattr(self, name)!r}")
        if not isinstance(self.num_atrous, int) or self.num_atrous < 0:
            found.append(f"num_atrous must be a non-negative integer, got {self.num_atrous!r}")
        if isinstance(m, int) and isinstance(n1, int) and isinstance(n2, int) and 2 * m != n1 * n2:
            found.append(f"2 * embedding_dim ({2 * m}) must equal reshape_height * reshape_width ({n1 * n2})")
        if len(self.atrous_rates) != self.num_atrous:
            found.append(f"atrous_rates has {len(self.atrous_rates)} entries but num_atrous is {self.num_atrous}")
        if any(r < 1 for r in self.atrous_rates):
            found.append(f"atrous rates must be >= 1, got {self.atrous_rates}")
        if self.structure not in STRUCTURES:
            found.append(f"structure must be one of {STRUCTURES}, got {self.structure!r}")
        if self.integration not in INTEGRATIONS:
            found.append(f"integration must be one of {INTEGRATIONS}, got {self.integration!r}")
        if self.residual_mode not in RESIDUAL_MODES:
            found.append(f"residual_mode must be one of {RESIDUAL_MODES}, got {self.residual_mode!r}")
        for name in ("input_dropout", "feature_dropout", "hidden_dropout"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                found.append(f"{name} must be in [0, 1), got {value}")
        return found

    def validate(self):
        found = self.problems()
        if found:
            raise ConfigError(found)
        return self

    def to_dict(self):
        data = asdict(self)
        data["atrous_rates"] = list(self.atrous_rates)
        return data

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown model config key '{k}'" for k in unknown])
        return cls(**data)

    def with_rates(self, rates):
        rates = tuple(rates)
        return replace(self, atrous_rates=rates, num_atrous=len(rates))

    # Channel bookkeeping shared by parameter allocation and the forward pass.

    @property
    def head_channels(self):
        return 1 if self.residual_mode == "reduce" else self.num_filters

    def stage_channels(self):
        """Output channels of stages 0..T."""
        F, T = self.num_filters, self.num_atrous
        if self.structure == "serial":
            return [F] * T + [self.head_channels]
        if T == 0:
            return [self.head_channels]
        return [F] * (T + 1)

    def stage_inputs(self):
        outs = self.stage_channels()
        if self.structure == "serial":
            return [1] + outs[:-1]
        return [1] * len(outs)

    def integrated_channels(self):
        outs = self.stage_channels()
        if self.structure == "serial":
            return outs[-1]
        return sum(outs) if self.integration == "concat" else outs[0]

    def feature_channels(self):
        return self.stage_channels()[-1] if self.structure == "serial" else self.head_channels

    def feature_size(self):
        return self.feature_channels() * self.reshape_height * self.reshape_width


def parameter_shapes(cfg, num_entities, num_relations):
    """
    Shapes of every learnable tensor, in allocation order.

    Returns:
        OrderedDict: name -> shape tuple
    """
    m, k = cfg.embedding_dim, cfg.kernel_size
    shapes = OrderedDict()
    shapes["entity"] = (num_entities, m)
    shapes["relation"] = (num_relations, m)
    for t, (c_in, c_out) in enumerate(zip(cfg.stage_inputs(), cfg.stage_channels())):
        shapes[f"conv{t}.weight"] = (c_out, c_in, k, k)
        shapes[f"conv{t}.bias"] = (c_out,)
    if cfg.structure == "parallel":
        shapes["w1.weight"] = (cfg.head_channels, cfg.integrated_channels(), 1, 1)
    shapes["fc.weight"] = (cfg.feature_size(), m)
    shapes["fc.bias"] = (m,)
    if cfg.batch_norm:
        for name, channels in (("bn0", 1), ("bn1", cfg.integrated_channels()), ("bn2", m)):
            shapes[f"{name}.gamma"] = (channels,)
            shapes[f"{name}.beta"] = (channels,)
    return shapes


def parameter_count(cfg, num_entities, num_relations):
    """Number of learnable scalars for a configuration, without allocating it."""
    return sum(prod(shape) for shape in parameter_shapes(cfg, num_entities, num_relations).values())


class ModelParams:
    """
    Learnable tensors of one AcrE model plus its batch-norm running buffers.

    Attributes:
        config (ModelConfig): architecture
        num_entities (int): N
        num_relations (int): R (including reciprocal relations)
        tensors (OrderedDict): name -> Tensor with requires_grad=True
        buffers (OrderedDict): name -> numpy array (running statistics)
    """

    def __init__(self, config, num_entities, num_relations, tensors, buffers=None):
        self.config = config
        self.num_entities = num_entities
        self.num_relations = num_relations
        self.tensors = OrderedDict(tensors)
        self.buffers = OrderedDict(buffers or {})
        expected = parameter_shapes(config, num_entities, num_relations)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise ShapeError(f"missing parameter '{name}'")
            if self.tensors[name].shape != shape:
                raise ShapeError(f"parameter '{name}' has shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def zero_grad(self):
        for tensor in self.tensors.values():
            tensor.zero_grad()

    def count(self):
        return sum(t.size for t in self.tensors.values())

    def copy(self):
        tensors = OrderedDict((n, Tensor(t.data.copy(), requires_grad=True, name=n)) for n, t in self.tensors.items())
        buffers = OrderedDict((n, b.copy()) for n, b in self.buffers.items())
        return ModelParams(self.config, self.num_entities, self.num_relations, tensors, buffers)


def _lecun_uniform(rng, shape, fan_in):
    bound = sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg, num_entities, num_relations, rng):
    """
    Randomly initialize a model.

    Embeddings, filters and transforms are drawn from a fan-in-scaled uniform
    distribution; biases start at zero, batch-norm scales at one. A square
    1x1 W1 (parallel structure with T = 0) starts as the identity.

    Args:
        cfg (ModelConfig): architecture
        num_entities (int): N
        num_relations (int): R
        rng (numpy.random.Generator): seeded generator

    Returns:
        ModelParams
    """
    cfg.validate()
    tensors, buffers = OrderedDict(), OrderedDict()
    for name, shape in parameter_shapes(cfg, num_entities, num_relations).items():
        if name in ("entity", "relation"):
            values = _lecun_uniform(rng, shape, shape[1])
        elif name == "w1.weight" and shape[0] == shape[1]:
            values = np.eye(shape[0]).reshape(shape)
        elif name.endswith(".weight") and name.startswith(("conv", "w1")):
            values = _lecun_uniform(rng, shape, prod(shape[1:]))
        elif name == "fc.weight":
            values = _lecun_uniform(rng, shape, shape[0])
        elif name.endswith(".gamma"):
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        tensors[name] = Tensor(values, requires_grad=True, name=name)
    if cfg.batch_norm:
        for name in ("bn0", "bn1", "bn2"):
            channels = tensors[f"{name}.gamma"].shape[0]
            buffers[f"{name}.running_mean"] = np.zeros(channels)
            buffers[f"{name}.running_var"] = np.ones(channels)
    params = ModelParams(cfg, num_entities, num_relations, tensors, buffers)
    logger.info(f"Initialized {cfg.structure} AcrE with {params.count():,} parameters")
    return params


def _bn(x, params, name, train):
    return batch_norm(
        x,
        params[f"{name}.gamma"],
        params[f"{name}.beta"],
        params.buffers[f"{name}.running_mean"],
        params.buffers[f"{name}.running_var"],
        train,
    )


def reshape_2d(e, r, cfg):
    """
    Reshape the concatenation [e; r] row-major into an n1 x n2 map.

    Args:
        e (Tensor): [m] or [batch, m]
        r (Tensor): [m] or [batch, m]
        cfg (ModelConfig): supplies n1, n2

    Returns:
        Tensor: [1, n1, n2] or [batch, 1, n1, n2]
    """
    n1, n2 = cfg.reshape_height, cfg.reshape_width
    if e.shape != r.shape:
        raise ShapeError(f"entity {e.shape} and relation {r.shape} embeddings differ in shape")
    if 2 * e.shape[-1] != n1 * n2:
        raise ShapeError(f"2 * m = {2 * e.shape[-1]} does not match the {n1}x{n2} reshape")
    if e.ndim == 1:
        return reshape(concat([e, r], axis=0), (1, n1, n2))
    return reshape(concat([e, r], axis=1), (e.shape[0], 1, n1, n2))


def integrate(stage_outputs, mode):
    """
    Combine parallel stage outputs by elementwise sum or channel concatenation.

    Args:
        stage_outputs (list of Tensor): [B, C, n1, n2] or [C, n1, n2] maps
        mode (str): "add" or "concat"

    Raises:
        ShapeError: on mismatched shapes (add) or spatial dims (concat)
    """
    stage_outputs = list(stage_outputs)
    if not stage_outputs:
        raise ShapeError("integrate needs at least one stage output")
    mode = INTEGRATION_ALIASES.get(mode, mode)
    first = stage_outputs[0]
    if mode == "add":
        result = first
        for other in stage_outputs[1:]:
            if other.shape != first.shape:
                raise ShapeError(f"add integration needs equal shapes, got {first.shape} and {other.shape}")
            result = add(result, other)
        return result
    if mode == "concat":
        for other in stage_outputs[1:]:
            if other.shape[-2:] != first.shape[-2:]:
                raise ShapeError(f"concat integration needs equal spatial dims, got {first.shape} and {other.shape}")
        return first if len(stage_outputs) == 1 else concat(stage_outputs, axis=-3)
    raise ValueError(f"unknown integration mode '{mode}'")


def score_all(o, params, cfg=None, train=False, rng=None):
    """
    Score a feature vector against every entity: (o W + b) E^T.

    When a config is given, hidden dropout and batch normalization are
    applied to the projected vector before the inner products.

    Args:
        o (Tensor): [len(o)] or [batch, len(o)]
        params (ModelParams): supplies W, b and the entity table

    Returns:
        Tensor: [N] or [batch, N] raw scores
    """
    if o.shape[-1] != params["fc.weight"].shape[0]:
        raise ShapeError(f"feature size {o.shape[-1]} does not match W rows {params['fc.weight'].shape[0]}")
    z = affine(o, params["fc.weight"], params["fc.bias"])
    if cfg is not None:
        z = dropout(z, cfg.hidden_dropout, train, rng)
        if cfg.batch_norm and z.ndim == 2:
            z = _bn(z, params, "bn2", train)
    return matmul(z, params["entity"], transpose_b=True)


def _query_ids(ids, limit, label):
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= limit):
        raise ShapeError(f"{label} id out of range [0, {limit})")
    return ids


def _input_map(heads, relations, params, cfg, train, rng):
    heads = _query_ids(heads, params.num_entities, "entity")
    relations = _query_ids(relations, params.num_relations, "relation")
    if heads.shape != relations.shape:
        raise ShapeError(f"{heads.size} head ids but {relations.size} relation ids")
    e = embedding_lookup(params["entity"], heads)
    r = embedding_lookup(params["relation"], relations)
    x = reshape_2d(e, r, cfg)
    if cfg.batch_norm:
        x = _bn(x, params, "bn0", train)
    return dropout(x, cfg.input_dropout, train, rng)


def _residual_relu(c, x, cfg):
    if not cfg.use_residual:
        return relu(c)
    if c.shape[1] != x.shape[1]:
        x = repeat(x, c.shape[1], axis=1)
    return relu(add(c, x))


def _check_structure(params, cfg, structure):
    if cfg.structure != structure:
        raise ValueError(f"config structure is '{cfg.structure}', expected '{structure}'")
    if params.config != cfg:
        expected = parameter_shapes(cfg, params.num_entities, params.num_relations)
        for name, shape in expected.items():
            if name not in params or params[name].shape != shape:
                raise ShapeError(f"parameters do not match the config at '{name}'")


def _finish(o, params, cfg, train, rng, single):
    probs = sigmoid(score_all(o, params, cfg, train, rng))
    return reshape(probs, (params.num_entities,)) if single else probs


def forward_serial(heads, relations, params, cfg, train=False, rng=None):
    """
    Serial AcrE: the standard convolution and the atrous convolutions are
    chained, each taking the previous output as input.

    Args:
        heads: entity id or array of ids
        relations: relation id or array of ids (same length)
        params (ModelParams): weights
        cfg (ModelConfig): architecture
        train (bool): enables dropout and batch statistics
        rng (numpy.random.Generator, optional): dropout masks

    Returns:
        Tensor: [N] for a single query, else [batch, N]; probabilities in (0, 1)
    """
    _check_structure(params, cfg, "serial")
    single = np.ndim(heads) == 0
    x = _input_map(heads, relations, params, cfg, train, rng)

    c = conv2d(x, params["conv0.weight"], params["conv0.bias"], padding="same")
    for t, rate in enumerate(cfg.atrous_rates, start=1):
        c = conv2d_dilated(c, params[f"conv{t}.weight"], params[f"conv{t}.bias"], rate, padding="same")
    if cfg.batch_norm:
        c = _bn(c, params, "bn1", train)

    features = dropout(_residual_relu(c, x, cfg), cfg.feature_dropout, train, rng)
    return _finish(flatten(features, start_dim=1), params, cfg, train, rng, single)


def forward_parallel(heads, relations, params, cfg, train=False, rng=None):
    """
    Parallel AcrE: every convolution reads the same input map; the stage
    outputs are integrated, combined with the input, mixed by the 1x1
    transform W1 and flattened.

    Args and returns as forward_serial.
    """
    _check_structure(params, cfg, "parallel")
    single = np.ndim(heads) == 0
    x = _input_map(heads, relations, params, cfg, train, rng)

    outputs = [conv2d(x, params["conv0.weight"], params["conv0.bias"], padding="same")]
    for t, rate in enumerate(cfg.atrous_rates, start=1):
        outputs.append(conv2d_dilated(x, params[f"conv{t}.weight"], params[f"conv{t}.bias"], rate, padding="same"))
    c = integrate(outputs, cfg.integration)
    if cfg.batch_norm:
        c = _bn(c, params, "bn1", train)

    w1 = params["w1.weight"]
    mixed = conv2d(_residual_relu(c, x, cfg), w1, Tensor(np.zeros(w1.shape[0])))
    features = dropout(mixed, cfg.feature_dropout, train, rng)
    return _finish(flatten(features, start_dim=1), params, cfg, train, rng, single)


def forward(heads, relations, params, cfg, train=False, rng=None):
    """Run the structure named in the config."""
    if cfg.structure == "serial":
        return forward_serial(heads, relations, params, cfg, train, rng)
    return forward_parallel(heads, relations, params, cfg, train, rng)
