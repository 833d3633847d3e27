"""Optimiser, learning-rate schedule, training loop, checkpoints and metric history."""

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .data import collate
from .exceptions import ConfigError, NumericError, UndefinedMetricError
from .flow import lipschitz_probe, time_gate
from .generation import ItgConfig
from .metrics import auprc, auroc
from .model import GSNFModel, resolve_margin_mode
from .numerics import Tape, backward, zero_grad
from .objective import LossWeights

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 50
    scheduler_step: int = 20
    scheduler_decay: float = 0.5
    epochs: int = 100
    seed: int = 0
    alpha: float = 1000.0
    beta: float = 0.1
    gamma: float = 0.1
    n_segments: int = 4
    margin_mode: str = "fixed"
    fixed_delta: float = 1e-6
    layers: int = 2
    hidden: int = 128
    spectral_target: float = 0.45
    reinit_index: Optional[int] = None
    use_graph: bool = True
    use_itg: bool = True
    use_rtg: bool = True
    probe_pairs: int = 200
    probe_limit: float = 1.0
    eval_batch_size: int = 200

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ("lr", "batch_size", "scheduler_step", "scheduler_decay", "n_segments",
                    "layers", "hidden", "fixed_delta", "eval_batch_size")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("weight_decay", "alpha", "beta", "gamma", "epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)!r}")
        if self.margin_mode not in ("fixed", "derived"):
            raise ConfigError(f"margin_mode must be 'fixed' or 'derived', got {self.margin_mode!r}")
        if not 0.0 < self.spectral_target < 1.0:
            raise ConfigError("spectral_target must lie in (0, 1)")
        if self.probe_pairs < 100:
            raise ConfigError("probe_pairs must be at least 100")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "C" in d:
            d["n_segments"] = d.pop("C")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    @property
    def loss_weights(self):
        return LossWeights(self.alpha, self.beta, self.gamma)

    def itg_config(self):
        mode = resolve_margin_mode(self.margin_mode, self.layers)
        return ItgConfig(self.reinit_index, mode, self.fixed_delta)


@dataclass
class TrainState:
    model: GSNFModel
    config: TrainConfig
    adam_m: dict
    adam_v: dict
    step: int = 0
    epoch: int = 0
    lr: float = 1e-3
    delta_trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


def build_model(config, n_vars, n_classes=2):
    rng = np.random.default_rng(config.seed)
    return GSNFModel(n_vars, n_classes, rng, hidden=config.hidden, layers=config.layers,
                     n_segments=config.n_segments, spectral_target=config.spectral_target,
                     use_graph=config.use_graph)


def init_state(config, n_vars, n_classes=2):
    model = build_model(config, n_vars, n_classes)
    params = model.named_parameters()
    return TrainState(model, config,
                      {k: np.zeros_like(p.data) for k, p in params.items()},
                      {k: np.zeros_like(p.data) for k, p in params.items()},
                      lr=config.lr)


def adam_update(param, grad, m, v, step, lr, weight_decay, betas=ADAM_BETAS, eps=ADAM_EPS):
    """One bias-corrected Adam step with decoupled weight decay; ``step`` counts from 1.

    Returns ``(new_param, m, v)`` as fresh arrays.
    """
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    new = param - lr * weight_decay * param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, m, v


def scheduler(epoch, base_lr, step_size=20, decay=0.5):
    return base_lr * decay ** (epoch // step_size)


def step_rng(seed, step):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(step)]))


def _probe_time(gate):
    grid = np.linspace(-1.0, 1.0, 129)
    return float(grid[np.argmax(time_gate(gate, grid).data)])


def contractivity_probe(model, adjacency, rng, n_pairs=200):
    """Largest probe estimate over layers, at each layer's strongest gate and the widest adjacency."""
    A = np.asarray(adjacency)
    if A.ndim == 3:
        A = A[np.argmax(np.linalg.norm(A, ord=2, axis=(-2, -1)))]
    worst = 0.0
    for layer in model.stack.layers:
        t = _probe_time(layer.gate)
        worst = max(worst, lipschitz_probe(layer, 0.0, t, A, n_pairs=n_pairs, rng=rng))
    return worst


def train_step(state, batch):
    """One optimisation step; mutates ``state`` and returns the loss breakdown."""
    cfg = state.config
    model = state.model
    rng = step_rng(cfg.seed, state.step)
    params = model.named_parameters()
    zero_grad(params.values())
    with Tape() as tape:
        res = model.forward(batch, rng=rng, itg=cfg.itg_config(), weights=cfg.loss_weights,
                            use_itg=cfg.use_itg, use_rtg=cfg.use_rtg)
        if not math.isfinite(res.components["total"]):
            raise NumericError("total loss is not finite", component="total")
        backward(res.loss, tape)
    state.step += 1
    for name, p in params.items():
        grad = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for {name}", component=name)
        p.data, state.adam_m[name], state.adam_v[name] = adam_update(
            p.data, grad, state.adam_m[name], state.adam_v[name], state.step, state.lr,
            cfg.weight_decay)
    model.renormalize()
    probe = contractivity_probe(model, model.mean_adjacency(batch), rng, cfg.probe_pairs)
    if probe >= cfg.probe_limit:
        raise NumericError(f"contractivity probe {probe:.4f} >= {cfg.probe_limit} after step {state.step}",
                           component="contractivity", residual=probe)
    out = dict(res.components)
    out["probe"] = probe
    if res.bound:
        out["delta_lb"] = float(np.mean(res.bound["delta_lb"]))
        out["fallback_rate"] = float(np.mean(res.bound["fallback"]))
        state.delta_trace.append(out["delta_lb"])
    return out


def predict_proba(model, dataset, batch_size=200):
    out = []
    for i in range(0, len(dataset), batch_size):
        batch = collate(dataset.samples[i:i + batch_size], model.n_segments)
        logits = model.predict_logits(batch)
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        out.append(p / p.sum(axis=1, keepdims=True))
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


def evaluate(model, dataset, batch_size=200):
    """AUROC/AUPRC of the positive-class probability; NaN where undefined."""
    proba = predict_proba(model, dataset, batch_size)
    y = dataset.labels
    rec = {}
    for name, fn in (("auroc", auroc), ("auprc", auprc)):
        try:
            rec[name] = fn(proba[:, 1], y)
        except UndefinedMetricError:
            rec[name] = float("nan")
    return rec


# ---------------------------------------------------------------------- snapshots

def snapshot(model):
    """Copies of every parameter and spectral state, keyed by flat names."""
    arrays = {f"param/{k}": p.data.copy() for k, p in model.named_parameters().items()}
    for k, s in model.named_spectral_states().items():
        arrays[f"spectral/{k}/u"] = s.u.copy()
        arrays[f"spectral/{k}/v"] = s.v.copy()
        arrays[f"spectral/{k}/sigma"] = np.array(s.sigma_est)
    return arrays


def restore(model, arrays):
    params = model.named_parameters()
    for k, p in params.items():
        p.data = np.array(arrays[f"param/{k}"], dtype=np.float64)
    for k, s in model.named_spectral_states().items():
        s.u = np.array(arrays[f"spectral/{k}/u"], dtype=np.float64)
        s.v = np.array(arrays[f"spectral/{k}/v"], dtype=np.float64)
        s.sigma_est = float(arrays[f"spectral/{k}/sigma"])


def parameter_hash(model_or_arrays):
    arrays = model_or_arrays if isinstance(model_or_arrays, dict) else snapshot(model_or_arrays)
    h = hashlib.sha256()
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k], dtype=np.float64).tobytes())
    return h.hexdigest()


@dataclass
class FitResult:
    state: TrainState
    history: list
    best_epoch: int
    best_score: float


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def fit(train, val, config, on_epoch=None):
    """Train for ``config.epochs`` epochs and restore the best-validation parameters.

    ``train``/``val`` are normalised datasets. Each history record holds the
    epoch's mean losses, the learning rate, the margin statistics (derived
    mode) and validation AUROC/AUPRC. ``on_epoch`` is called with each record.
    """
    if len(train) == 0:
        raise ConfigError("training set is empty")
    state = init_state(config, train.n_vars, max(2, int(train.labels.max()) + 1))
    history = []
    best = snapshot(state.model)
    best_epoch, best_score = -1, -np.inf
    for epoch in range(config.epochs):
        state.epoch = epoch
        state.lr = scheduler(epoch, config.lr, config.scheduler_step, config.scheduler_decay)
        order_rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 1 << 20, epoch]))
        steps = []
        for idx in _batches(len(train), config.batch_size, order_rng):
            batch = collate([train.samples[i] for i in idx], config.n_segments)
            steps.append(train_step(state, batch))
        rec = {"epoch": epoch, "lr": state.lr, "steps": state.step}
        for key in steps[0]:
            rec[key] = float(np.mean([s[key] for s in steps]))
        if len(val):
            scores = evaluate(state.model, val, config.eval_batch_size)
            rec["val_auroc"], rec["val_auprc"] = scores["auroc"], scores["auprc"]
            score = scores["auroc"]
            if np.isfinite(score) and score > best_score:
                best_score, best_epoch = score, epoch
                best = snapshot(state.model)
        else:
            best_epoch, best = epoch, snapshot(state.model)
        history.append(rec)
        log.info("epoch %d: %s", epoch, {k: round(v, 5) if isinstance(v, float) else v
                                         for k, v in rec.items()})
        if on_epoch is not None:
            on_epoch(rec)
    restore(state.model, best)
    return FitResult(state, history, best_epoch, float(best_score))


# ---------------------------------------------------------------------- checkpoints

def save_checkpoint(path, model, config, stats=None, extra=None):
    """Write named arrays plus a JSON echo of the config to an ``.npz`` file."""
    arrays = snapshot(model)
    meta = {"config": config.to_dict(), "n_vars": model.n_vars, "n_classes": model.n_classes,
            "hash": parameter_hash(arrays)}
    if extra:
        meta.update(extra)
    if stats is not None:
        arrays["stats/mean"] = np.asarray(stats[0], dtype=np.float64)
        arrays["stats/std"] = np.asarray(stats[1], dtype=np.float64)
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return meta["hash"]


def load_checkpoint(path):
    """Return ``(model, config, stats, meta)``; ``stats`` is ``None`` if absent."""
    with np.load(path, allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(str(arrays.pop("meta")))
    config = TrainConfig.from_dict(meta["config"])
    stats = None
    if "stats/mean" in arrays:
        stats = (arrays.pop("stats/mean"), arrays.pop("stats/std"))
    model = build_model(config, meta["n_vars"], meta["n_classes"])
    restore(model, arrays)
    return model, config, stats, meta
