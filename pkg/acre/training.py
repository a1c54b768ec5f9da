"""
1-N listwise training for AcrE.

Each batch holds unique (entity, relation) queries from the train split with
multi-hot label rows over all N entities. A batch runs the forward pass on a
Tape, takes the listwise binary cross-entropy, back-propagates and applies an
Adam update. Filtered validation MRR is measured every few epochs; the best
parameters are kept and training stops once validation stops improving.
"""

import itertools
import json
import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
import pandas as pd
from tqdm import tqdm

from .checkpoint import read_container, write_container
from .data import HEAD_MODES, build_label_index, prepare_store
from .errors import AcreError, CheckpointError, ConfigError, ShapeError, TrainingDivergedError
from .evaluation import TIE_POLICIES, FilterIndex, evaluate
from .model import ModelConfig, ModelParams, forward, init_params
from .tensor import Tape, Tensor, backward, get_default_dtype, make_op, set_default_dtype

logger = logging.getLogger("acre.training")

CURVE_SCHEMA = "acre.curve/1"
CLAMP_EPS = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization hyperparameters plus the model architecture they train.

    Attributes:
        batch_size: unique (entity, relation) queries per batch
        learning_rate, adam_beta1, adam_beta2, adam_eps: Adam settings
        epochs: maximum number of passes over the train queries
        label_smoothing: eps_ls in [0, 1)
        eval_every: epochs between validation passes
        patience: validation passes without improvement before stopping
        seed: drives initialization, shuffling and dropout
        head_mode: "reciprocal" (inverse relations) or "direct"
        tie_policy: rank convention for equal scores during validation
        eval_batch_size: queries per evaluation forward pass
        float_width: 64 or 32
        model: ModelConfig
    """

    batch_size: int = 128
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 300
    label_smoothing: float = 0.1
    eval_every: int = 10
    patience: int = 10
    seed: int = 17
    head_mode: str = "reciprocal"
    tie_policy: str = "mean"
    eval_batch_size: int = 256
    float_width: int = 64
    model: ModelConfig = field(default_factory=ModelConfig)

    def problems(self):
        found = []
        for name in ("batch_size", "epochs", "eval_every", "patience", "eval_batch_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                found.append(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            found.append(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.learning_rate < 0:
            found.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                found.append(f"{name} must be in [0, 1), got {getattr(self, name)}")
        if self.adam_eps <= 0:
            found.append(f"adam_eps must be positive, got {self.adam_eps}")
        if not 0.0 <= self.label_smoothing < 1.0:
            found.append(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.head_mode not in HEAD_MODES:
            found.append(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.tie_policy not in TIE_POLICIES:
            found.append(f"tie_policy must be one of {TIE_POLICIES}, got {self.tie_policy!r}")
        if self.float_width not in (32, 64):
            found.append(f"float_width must be 32 or 64, got {self.float_width!r}")
        return found + self.model.problems()

    def validate(self):
        found = self.problems()
        if found:
            raise ConfigError(found)
        return self

    def to_dict(self):
        data = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        data["model"] = self.model.to_dict()
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        model = ModelConfig.from_dict(data.pop("model", {}))
        known = {f.name for f in fields(cls)} - {"model"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown train config key '{k}'" for k in unknown])
        return cls(model=model, **data)


def apply_overrides(cfg, overrides):
    """
    Return a copy of cfg with flat overrides applied.

    Keys may name any TrainConfig or ModelConfig field. Two shorthands are
    accepted: "dropout" sets all three dropout rates and "rates" sets the
    atrous rates (and their count).

    Raises:
        ConfigError: listing every unknown key
    """
    train_fields = {f.name for f in fields(TrainConfig)} - {"model"}
    model_fields = {f.name for f in fields(ModelConfig)}
    train_updates, model_updates, unknown = {}, {}, []
    for key, value in overrides.items():
        if key == "dropout":
            model_updates.update(input_dropout=value, feature_dropout=value, hidden_dropout=value)
        elif key == "rates":
            model_updates.update(atrous_rates=tuple(value), num_atrous=len(value))
        elif key in train_fields:
            train_updates[key] = value
        elif key in model_fields:
            model_updates[key] = value
        else:
            unknown.append(f"unknown config key '{key}'")
    if unknown:
        raise ConfigError(unknown)
    return replace(cfg, model=replace(cfg.model, **model_updates), **train_updates)


def bce_listwise_loss(probs, labels, label_smoothing=0.0):
    """
    Binary cross-entropy over full label rows, averaged over B * N.

    Probabilities are clamped into [c, 1 - c] with c = max(1e-12, machine
    epsilon of the dtype); entries beyond the clamp receive the gradient at
    the clamp, so a saturated wrong prediction can still recover. With
    smoothing, targets become (1 - eps_ls) * t + eps_ls / N.

    Args:
        probs (Tensor): [B, N] or [N] sigmoid outputs
        labels (array-like): same shape, entries in {0, 1}
        label_smoothing (float): eps_ls in [0, 1)

    Returns:
        Tensor: scalar loss

    Raises:
        ShapeError: if labels and probs differ in shape
    """
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=probs.data.dtype)
    if labels.shape != probs.shape:
        raise ShapeError(f"labels {labels.shape} do not match probabilities {probs.shape}")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {label_smoothing}")

    n = probs.shape[-1]
    targets = (1.0 - label_smoothing) * labels + label_smoothing / n if label_smoothing else labels
    clamp = max(CLAMP_EPS, float(np.finfo(probs.data.dtype).eps))
    p = np.clip(probs.data, clamp, 1.0 - clamp)
    elementwise = -(targets * np.log(p) + (1.0 - targets) * np.log1p(-p))
    loss = elementwise.mean()

    def _backward(grad):
        return (grad * (p - targets) / (p * (1.0 - p)) / elementwise.size,)

    return make_op("bce_listwise_loss", loss, (probs,), _backward)


@dataclass
class AdamState:
    """Step counter and first/second moment estimates keyed by parameter name."""

    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)

    def copy(self):
        return AdamState(
            self.step,
            {k: v.copy() for k, v in self.first.items()},
            {k: v.copy() for k, v in self.second.items()},
        )


def adam_step(params, grads, moments, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """
    One bias-corrected Adam update, in place.

    Args:
        params (dict): name -> numpy array, updated in place
        grads (dict): name -> gradient array; a missing or None entry is zero
        moments (AdamState): updated in place
        lr (float): step size

    Returns:
        tuple: (params, moments)
    """
    moments.step += 1
    t = moments.step
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        m = moments.first.setdefault(name, np.zeros_like(value))
        v = moments.second.setdefault(name, np.zeros_like(value))
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        value -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    return params, moments


class Adam:
    """Adam over the tensors of a ModelParams, reading their .grad slots."""

    def __init__(self, params, learning_rate=1e-3, betas=(0.9, 0.999), eps=1e-8, state=None):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = state if state is not None else AdamState()

    def step(self):
        values = {name: tensor.data for name, tensor in self.params.items()}
        grads = {name: tensor.grad for name, tensor in self.params.items()}
        adam_step(values, grads, self.state, self.learning_rate, self.beta1, self.beta2, self.eps)


def count_params(params):
    """Total number of scalars across a model's learnable tensors."""
    params = getattr(params, "params", params)
    tensors = params.tensors if isinstance(params, ModelParams) else params
    return int(sum(np.size(getattr(t, "data", t)) for t in tensors.values()))


@dataclass
class Checkpoint:
    """
    Everything needed to resume or evaluate a run.

    Attributes:
        params (ModelParams): weights and batch-norm buffers
        train_config (TrainConfig): hyperparameters, model config included
        optimizer (AdamState): moment estimates at the saved epoch
        epoch (int): epoch the parameters come from
        best_valid_mrr (float): validation MRR of these parameters (NaN if never measured)
        history (list): training-curve records
        run_config (dict): resolved flat run config, when saved by the CLI
    """

    params: ModelParams
    train_config: TrainConfig
    optimizer: AdamState
    epoch: int
    best_valid_mrr: float
    history: list = field(default_factory=list)
    run_config: dict = field(default_factory=dict)

    @property
    def model_config(self):
        return self.params.config

    def save(self, path):
        header = {
            "train_config": self.train_config.to_dict(),
            "num_entities": self.params.num_entities,
            "num_relations": self.params.num_relations,
            "epoch": self.epoch,
            "best_valid_mrr": self.best_valid_mrr,
            "optimizer_step": self.optimizer.step,
            "history": self.history,
            "run_config": self.run_config,
        }
        arrays = {}
        for name, tensor in self.params.items():
            arrays[f"param__{name}"] = tensor.data
        for name, value in self.params.buffers.items():
            arrays[f"buffer__{name}"] = value
        for name, value in self.optimizer.first.items():
            arrays[f"adam_m__{name}"] = value
        for name, value in self.optimizer.second.items():
            arrays[f"adam_v__{name}"] = value
        return write_container(path, header, arrays)

    @classmethod
    def load(cls, path):
        """
        Read a checkpoint and switch the default float width to the one it
        was trained with.

        Raises:
            CheckpointError: on a bad container or inconsistent contents
        """
        header, arrays = read_container(path)
        try:
            train_config = TrainConfig.from_dict(header["train_config"])
        except (KeyError, TypeError, ConfigError) as e:
            raise CheckpointError(f"{path} has an invalid train config: {e}") from None
        set_default_dtype(train_config.float_width)

        groups = {"param": {}, "buffer": {}, "adam_m": {}, "adam_v": {}}
        for key, value in arrays.items():
            prefix, _, name = key.partition("__")
            if prefix not in groups:
                raise CheckpointError(f"{path} has an unexpected entry '{key}'")
            groups[prefix][name] = value

        tensors = {name: Tensor(value, requires_grad=True, name=name) for name, value in groups["param"].items()}
        try:
            params = ModelParams(
                train_config.model, header["num_entities"], header["num_relations"], tensors, groups["buffer"]
            )
        except ShapeError as e:
            raise CheckpointError(f"{path} does not match its model config: {e}") from None
        optimizer = AdamState(header.get("optimizer_step", 0), groups["adam_m"], groups["adam_v"])
        return cls(
            params=params,
            train_config=train_config,
            optimizer=optimizer,
            epoch=header["epoch"],
            best_valid_mrr=header["best_valid_mrr"],
            history=header.get("history", []),
            run_config=header.get("run_config", {}),
        )


def batch_bounds(num_queries, batch_size, fold_single=False):
    """
    Slice boundaries of the batches in one epoch.

    Args:
        num_queries (int): queries in the epoch
        batch_size (int): queries per batch
        fold_single (bool): merge a trailing one-query batch into the batch
            before it (batch norm cannot normalize a single row)

    Returns:
        list[tuple[int, int]]: (start, stop) pairs covering every query once
    """
    bounds = [(start, min(start + batch_size, num_queries)) for start in range(0, num_queries, batch_size)]
    if fold_single and len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
        bounds[-2:] = [(bounds[-2][0], num_queries)]
    return bounds


def train_step(queries, labels, params, cfg, optimizer, rng):
    """
    Forward, loss, backward and one Adam update on a batch of queries.

    Returns:
        float: the batch loss before the update
    """
    params.zero_grad()
    with Tape() as tape:
        probs = forward(queries[:, 0], queries[:, 1], params, cfg.model, train=True, rng=rng)
        loss = bce_listwise_loss(probs, labels, cfg.label_smoothing)
    backward(loss, tape)
    optimizer.step()
    return loss.item()


def train(store, cfg, curve_path=None, progress=True):
    """
    Train a model from scratch.

    Args:
        store (TripleStore): dataset; inverse relations are added when the
            head mode needs them
        cfg (TrainConfig): hyperparameters
        curve_path (str, optional): JSON-lines file receiving one record per epoch
        progress (bool): show a tqdm bar over epochs

    Returns:
        Checkpoint: the parameters with the best validation MRR (the final
        ones when the store has no validation triples)

    Raises:
        TrainingDivergedError: if a batch loss becomes NaN or infinite
    """
    cfg.validate()
    set_default_dtype(cfg.float_width)
    store = prepare_store(store, cfg.head_mode)
    rng = np.random.default_rng(cfg.seed)

    params = init_params(cfg.model, store.num_entities, store.num_relations, rng)
    optimizer = Adam(params, cfg.learning_rate, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps)
    label_index = build_label_index(store, ("train",))
    queries = label_index.queries()
    if not len(queries):
        raise ValueError("the train split is empty")
    bounds = batch_bounds(len(queries), cfg.batch_size, fold_single=cfg.model.batch_norm)

    has_valid = len(store.original_triples("valid")) > 0
    filters = FilterIndex(store) if has_valid else None
    if not has_valid:
        logger.warning("No validation triples; keeping the parameters of the last epoch")

    logger.info(
        f"Training {cfg.model.structure} AcrE: {len(queries)} train queries, "
        f"{store.num_entities} entities, {store.num_relations} relations, up to {cfg.epochs} epochs"
    )

    history = []
    best = None
    best_mrr = -math.inf
    stale = 0
    curve = open(curve_path, "w", encoding="utf-8") if curve_path else None
    try:
        bar = tqdm(range(1, cfg.epochs + 1), desc="Training", unit="epoch", disable=not progress)
        for epoch in bar:
            order = rng.permutation(len(queries))
            total, seen = 0.0, 0
            for batch_number, (start, stop) in enumerate(bounds):
                batch = queries[order[start:stop]]
                labels = label_index.multi_hot(batch, store.num_entities, get_default_dtype())
                loss = train_step(batch, labels, params, cfg, optimizer, rng)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(epoch, batch_number, loss)
                total += loss * len(batch)
                seen += len(batch)

            record = {"schema": CURVE_SCHEMA, "epoch": epoch, "loss": total / seen, "valid_mrr": None}
            stop = False
            if has_valid and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                report = evaluate(
                    params, store, "valid", "both",
                    head_mode=cfg.head_mode, tie_policy=cfg.tie_policy,
                    filters=filters, batch_size=cfg.eval_batch_size,
                )
                record["valid_mrr"] = report.mrr
                if report.mrr > best_mrr:
                    best_mrr = report.mrr
                    best = (params.copy(), optimizer.state.copy(), epoch)
                    stale = 0
                else:
                    stale += 1
                    stop = stale >= cfg.patience
                logger.info(f"Epoch {epoch}: loss {record['loss']:.6f}, valid MRR {report.mrr:.4f}")
                bar.set_postfix(loss=f"{record['loss']:.4f}", mrr=f"{report.mrr:.4f}")
            else:
                logger.debug(f"Epoch {epoch}: loss {record['loss']:.6f}")
                bar.set_postfix(loss=f"{record['loss']:.4f}")

            history.append(record)
            if curve:
                curve.write(json.dumps(record) + "\n")
                curve.flush()
            if stop:
                logger.warning(f"Early stop at epoch {epoch}: no improvement in {cfg.patience} validation passes")
                break
    finally:
        if curve:
            curve.close()

    if best is None:
        best = (params, optimizer.state, history[-1]["epoch"])
        best_mrr = math.nan
    best_params, best_state, best_epoch = best
    logger.info(f"Best validation MRR {best_mrr:.4f} at epoch {best_epoch}")
    return Checkpoint(best_params, cfg, best_state, best_epoch, float(best_mrr), history)


@dataclass
class GridSearchResult:
    """Outcome of a grid search: winning config, per-cell table, full-budget checkpoint."""

    best_config: TrainConfig
    table: pd.DataFrame
    checkpoint: Checkpoint


def grid_cells(space):
    """
    Expand a search space into its Cartesian product of override dicts.

    Raises:
        ValueError: if the space or any of its value lists is empty
    """
    if not space:
        raise ValueError("the search space is empty")
    empty = [key for key, values in space.items() if len(values) == 0]
    if empty:
        raise ValueError(f"the search space has no values for {', '.join(empty)}")
    keys = list(space)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(space[k] for k in keys))]


def grid_search(store, space, base_cfg, search_epochs=None, progress=True):
    """
    Train every cell of a hyperparameter grid on a short budget, pick the
    best by validation MRR and retrain it with the full budget.

    A cell that fails (for example by diverging) is recorded with status
    "failed" and NaN MRR; the search continues.

    Args:
        store (TripleStore): dataset with a validation split
        space (dict): key -> list of values (keys as in apply_overrides)
        base_cfg (TrainConfig): settings shared by every cell
        search_epochs (int, optional): per-cell epoch budget; defaults to the
            full budget
        progress (bool): show a progress bar over cells

    Returns:
        GridSearchResult
    """
    cells = grid_cells(space)
    short_epochs = search_epochs or base_cfg.epochs
    rows, configs = [], []
    for index, overrides in enumerate(tqdm(cells, desc="Grid search", unit="cell", disable=not progress)):
        cfg = apply_overrides(base_cfg, overrides).validate()
        configs.append(cfg)
        row = {"cell": index, **{k: _display(v) for k, v in overrides.items()}}
        try:
            checkpoint = train(store, replace(cfg, epochs=short_epochs), progress=False)
            row.update(valid_mrr=checkpoint.best_valid_mrr, epochs=checkpoint.epoch, status="ok")
            logger.info(f"Cell {index} {overrides}: valid MRR {checkpoint.best_valid_mrr:.4f}")
        except (AcreError, FloatingPointError) as e:
            logger.error(f"Cell {index} {overrides} failed: {e}", exc_info=True)
            row.update(valid_mrr=math.nan, epochs=0, status="failed")
        rows.append(row)

    table = pd.DataFrame(rows)
    scores = table["valid_mrr"].to_numpy(dtype=float)
    if not np.isfinite(scores).any():
        raise AcreError("every grid-search cell failed or produced no validation MRR")
    winner = int(np.nanargmax(scores))
    table["best"] = table["cell"] == winner
    best_cfg = configs[winner]
    logger.info(f"Best cell {winner}: {cells[winner]}; retraining for {best_cfg.epochs} epochs")
    checkpoint = train(store, best_cfg, progress=progress)
    return GridSearchResult(best_cfg, table, checkpoint)


def _display(value):
    return ",".join(str(v) for v in value) if isinstance(value, (list, tuple)) else value
