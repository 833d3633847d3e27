"""Self-checking suites for the invariants the model relies on.

Each suite returns a :class:`SuiteResult`. ``scale`` multiplies the number of
random configurations so the same code serves quick smoke runs and the full
acceptance counts.
"""

import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import numerics as nx
from .data import IrregularSeries, collate
from .flow import (GsnfLayer, FlowStack, analytic_pair_bound, gsnf_forward, gsnf_invert,
                   lipschitz_probe, sample_probe_pairs, stack_forward)
from .generation import ItgConfig, delta_lower_bound, generate_trajectory, itg_auxiliary
from .metrics import auprc, auroc
from .model import GSNFModel
from .numerics import Tape, Tensor, backward
from .objective import LossWeights


@dataclass
class SuiteResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def record(self):
        return {"suite": self.name, "passed": self.passed, "seconds": round(self.seconds, 3),
                **self.details}


def _timed(name, fn):
    t = time.perf_counter()
    passed, details = fn()
    return SuiteResult(name, bool(passed), details, time.perf_counter() - t)


def _count(n, scale):
    return max(1, int(round(n * scale)))


def random_stochastic(rng, n, size=()):
    """Row-stochastic matrices from softmaxed logits of random temperature."""
    temp = rng.uniform(0.1, 5.0, size + (1, 1))
    logits = rng.standard_normal(size + (n, n)) * temp
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def random_layer(rng, n_vars, hidden=32, gate_max=1.5, stretch=3.0):
    """A flow stage with strong gates and weights pushed up against the spectral cap."""
    layer = GsnfLayer(n_vars, rng, hidden=hidden, gate_amplitude=0.1)
    layer.gate.amps.data = rng.uniform(0.05, gate_max, layer.gate.amps.shape)
    layer.gate.freqs.data = layer.gate.freqs.data * rng.uniform(0.5, 2.0, layer.gate.freqs.shape)
    for lin in layer.mlp.layers:
        lin.weight.data = lin.weight.data * stretch
        lin.bias.data = lin.bias.data * rng.uniform(0.0, 2.0)
    layer.gcn_weight.data = rng.normal(0.0, 1.0, layer.gcn_weight.shape)
    layer.renormalize(tol=1e-12)
    return layer


# ---------------------------------------------------------------------- flow

def flow_identity(scale=1.0, seed=0):
    """``stack_forward(z, t0, t0, A) == z`` over many random configurations."""
    def run():
        rng = np.random.default_rng(seed)
        n_total = _count(10_000, scale)
        n_stacks = 20
        per = int(np.ceil(n_total / n_stacks))
        worst, count = 0.0, 0
        for _ in range(n_stacks):
            D = int(rng.integers(2, 9))
            stack = FlowStack([random_layer(rng, D, hidden=16) for _ in range(int(rng.integers(1, 4)))])
            z = rng.normal(0.0, rng.uniform(0.1, 10.0), (per, D))
            t0 = rng.uniform(-1.0, 1.0, per)
            A = random_stochastic(rng, D, (per,))
            out = stack_forward(stack, z, t0, t0, A).data
            worst = max(worst, float(np.max(np.abs(out - z))))
            count += per
        return worst <= 1e-12, {"configurations": count, "max_abs_error": worst}
    return _timed("flow_identity", run)


def _config_draw(rng, layer):
    D = layer.n_vars
    A = random_stochastic(rng, D)
    t0 = float(rng.uniform(0.0, 1.0))
    t = float(rng.uniform(0.0, 1.0))
    return A, t0, t


def invertibility(scale=1.0, seed=1, n_pairs=200):
    """Round trip through the fixed-point inverse and its contraction rate."""
    def run():
        rng = np.random.default_rng(seed)
        n_cfg = _count(1000, scale)
        layers = [random_layer(rng, int(rng.integers(2, 9)), hidden=32) for _ in range(10)]
        worst_err, worst_excess, skipped, max_iters = 0.0, -np.inf, 0, 0
        for i in range(n_cfg):
            layer = layers[i % len(layers)]
            A, t0, t = _config_draw(rng, layer)
            probe = lipschitz_probe(layer, t0, t, A, n_pairs=n_pairs, rng=rng)
            if probe >= 0.95:
                skipped += 1
                continue
            z = rng.normal(0.0, 1.0, layer.d_z)
            x = gsnf_forward(z, t0, t, A, layer).data
            z_rec, hist = gsnf_invert(x, t0, t, A, layer, tol=1e-9, max_iters=200, return_history=True)
            max_iters = max(max_iters, len(hist) - 1)
            worst_err = max(worst_err, float(np.linalg.norm(z_rec - z)))
            h = np.asarray(hist)
            ok = (h[:-1] > 1e-12) & (h[1:] > 1e-12)
            if np.any(ok):
                ratio = float(np.max(h[1:][ok] / h[:-1][ok]))
                worst_excess = max(worst_excess, ratio - (probe + 0.05))
        passed = worst_err <= 1e-6 and worst_excess <= 0.0
        return passed, {"configurations": n_cfg - skipped, "skipped_probe_ge_0.95": skipped,
                        "max_roundtrip_error": worst_err, "max_ratio_excess": float(worst_excess),
                        "max_iterations": max_iters}
    return _timed("invertibility", run)


def bi_lipschitz(scale=1.0, seed=2, n_pairs=1000):
    """``(1 - L)|dz| <= |F(z1) - F(z2)| <= (1 + L)|dz|`` with the probe, else the analytic ceiling."""
    def run():
        rng = np.random.default_rng(seed)
        n_cfg = _count(100, scale)
        violations, fallbacks, total = 0, 0, 0
        for _ in range(n_cfg):
            layer = random_layer(rng, int(rng.integers(2, 9)), hidden=32)
            A, t0, t = _config_draw(rng, layer)
            probe = lipschitz_probe(layer, t0, t, A, n_pairs=n_pairs, rng=rng)
            z1, z2 = sample_probe_pairs(layer.d_z, n_pairs, rng)
            f = gsnf_forward(np.concatenate([z1, z2]), t0, t, A, layer).data
            out = np.linalg.norm(f[:n_pairs] - f[n_pairs:], axis=-1)
            d = np.linalg.norm(z1 - z2, axis=-1)
            ok = ((1 - probe) * d - 1e-9 <= out) & (out <= (1 + probe) * d + 1e-9)
            if not np.all(ok):
                lip = analytic_pair_bound(layer, z1[~ok], z2[~ok], t0, t, A)
                dd, oo = d[~ok], out[~ok]
                fallbacks += int((~ok).sum())
                good = ((1 - lip) * dd - 1e-9 <= oo) & (oo <= (1 + lip) * dd + 1e-9)
                violations += int((~good).sum())
            total += n_pairs
        return violations == 0, {"configurations": n_cfg, "pairs": total,
                                 "analytic_fallbacks": fallbacks, "violations": violations}
    return _timed("bi_lipschitz", run)


def margin_bound(scale=1.0, seed=3, length=16):
    """Measured divergence against the lower bound ``B`` in the single-stage setting."""
    def run():
        rng = np.random.default_rng(seed)
        n = _count(100, scale)
        violations, zero_bounds, min_slack = 0, 0, np.inf
        for _ in range(n):
            D = int(rng.integers(2, 9))
            stack = FlowStack([random_layer(rng, D, hidden=16)])
            times = np.sort(rng.uniform(0.0, 1.0, (1, length)), axis=1)
            z0 = rng.normal(0.0, 1.0, (1, D))
            A = random_stochastic(rng, D, (1,))
            cfg = ItgConfig(reinit_index=int(rng.integers(1, length + 1)))
            traj = generate_trajectory(Tensor(z0), Tensor(A), times, stack)
            aux = itg_auxiliary(traj, np.array([length]), cfg, stack)
            diff = (aux.original.data - aux.auxiliary.data) * aux.valid[..., None]
            measured = float(np.linalg.norm(diff, axis=-1).sum())
            b = delta_lower_bound(A, stack.layers[0].effective_gcn_weight().data, z0,
                                  aux.reinit_state.data, aux.count)
            bound = float(b["bound"][0])
            zero_bounds += bound == 0.0
            min_slack = min(min_slack, measured - bound)
            violations += measured < bound - 1e-9
        return violations == 0, {"draws": n, "violations": int(violations),
                                 "bound_zero_fraction": zero_bounds / n, "min_slack": float(min_slack)}
    return _timed("margin_bound", run)


# ---------------------------------------------------------------------- gradients

def numeric_gradient(f, x, h=1e-6):
    """Central differences of scalar ``f`` at every coordinate of array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def _op_numeric_gradient(f, x, weight, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = float(((fp - fm) * weight).sum()) / (2 * h)
    return g


def relative_error(a, b, floor=1e-10):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def _op_cases(rng):
    """``(name, fn(*tensors) -> tensor, inputs)``; every case is checked on all coordinates."""
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    row = rng.standard_normal(4)
    m = rng.standard_normal((2, 3, 4))
    k = rng.standard_normal((4, 5))
    away = rng.standard_normal((3, 4))
    away = np.where(np.abs(away) < 0.1, 0.5, away)
    return [
        ("add", lambda x, y: x + y, [a, row]),
        ("sub", lambda x, y: x - y, [a, b]),
        ("mul", lambda x, y: x * y, [a, row]),
        ("div", lambda x, y: x / y, [a, _positive(rng, (3, 4))]),
        ("neg", lambda x: -x, [a]),
        ("power", lambda x: x ** 3, [a]),
        ("maximum0", nx.maximum0, [away]),
        ("exp", nx.exp, [a]),
        ("log", nx.log, [_positive(rng, (3, 4))]),
        ("sqrt", nx.sqrt, [_positive(rng, (3, 4))]),
        ("tanh", nx.tanh, [a]),
        ("sin", nx.sin, [a]),
        ("softplus", nx.softplus, [a * 5]),
        ("sum", lambda x: x.sum(axis=1), [a]),
        ("mean", lambda x: x.mean(axis=(0, 2)), [m]),
        ("reshape", lambda x: x.reshape((4, 3)), [a]),
        ("swapaxes", lambda x: x.swapaxes(0, 1), [a]),
        ("broadcast_to", lambda x: nx.broadcast_to(x, (3, 4)), [row]),
        ("getitem", lambda x: x[np.array([0, 2, 0])], [a]),
        ("concat", lambda x, y: nx.concat([x, y], axis=0), [a, b]),
        ("matmul", nx.matmul, [m, k]),
        ("softmax", lambda x: nx.softmax(x, axis=-1), [a]),
        ("log_softmax", lambda x: nx.log_softmax(x, axis=-1), [a]),
    ]


def check_op_gradients(seed):
    """Worst elementwise ``|autodiff - fd| / (|fd| + 1e-8)`` per elementary op for one seed."""
    rng = np.random.default_rng(seed)
    worst = {}
    for name, fn, arrays in _op_cases(rng):
        weight = None
        inputs = [Tensor(x.copy(), requires_grad=True) for x in arrays]
        with Tape() as tape:
            out = fn(*inputs)
            weight = rng.standard_normal(out.shape)
            loss = (out * Tensor(weight)).sum()
        backward(loss, tape)
        errs = []
        for t in inputs:
            # difference outputs before weighting so untouched entries cancel exactly
            def f():
                return fn(*[Tensor(s.data) for s in inputs]).data.copy()
            num = _op_numeric_gradient(f, t.data, weight)
            errs.append(float(np.max(np.abs(t.grad - num) / (np.abs(num) + 1e-8))))
        worst[name] = max(errs)
    return worst


def toy_instance(seed, n_vars=2, length=4, batch=3, hidden=8, layers=2):
    """Small model and batch for composite-loss gradient checks."""
    rng = np.random.default_rng(seed)
    samples = []
    for b in range(batch):
        times = np.sort(rng.uniform(0.0, 1.0, length))
        mask = (rng.random((length, n_vars)) < 0.7).astype(float)
        mask[0] = 1.0
        values = rng.standard_normal((length, n_vars)) * mask
        samples.append(IrregularSeries(times, values, mask, b % 2))
    model = GSNFModel(n_vars, 2, rng, hidden=hidden, layers=layers, n_segments=2)
    for layer in model.stack.layers:
        layer.gate.amps.data = rng.uniform(0.2, 0.8, layer.gate.amps.shape)
    model.renormalize(tol=1e-12)
    return model, collate(samples, 2)


def _five_point(f, h):
    """Fourth-order central difference of ``f(eps)`` at zero."""
    return (8.0 * (f(h) - f(-h)) - (f(2 * h) - f(-2 * h))) / (12.0 * h)


def _extrapolated(f, h):
    """Richardson step on two five-point estimates; removes the h^4 error term."""
    return (16.0 * _five_point(f, h / 2) - _five_point(f, h)) / 15.0


def composite_loss_gradient(seed, n_dirs=1, coords_per_param=1, h=1e-2):
    """Directional and coordinate checks of the full training loss.

    The noise draw is frozen and the margin made large so the hinge is active.
    A fourth-order stencil with a fairly large step keeps roundoff small (the
    loss is O(1e3) while some gradient entries are O(1e-5)); extrapolating
    over ``h`` and ``h/2`` removes the truncation error that otherwise shows
    up on directions nearly orthogonal to the gradient.
    Returns the largest relative error found and where it occurred.
    """
    model, batch = toy_instance(seed)
    itg = ItgConfig(margin_mode="fixed", fixed_delta=10.0)
    weights = LossWeights()
    params = model.named_parameters()

    def loss_value():
        return model.forward(batch, rng=np.random.default_rng(seed), itg=itg, weights=weights).loss.item()

    nx.zero_grad(params.values())
    with Tape() as tape:
        res = model.forward(batch, rng=np.random.default_rng(seed), itg=itg, weights=weights)
        backward(res.loss, tape)
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    rng = np.random.default_rng(10_000 + seed)
    worst, worst_name = 0.0, None
    for name, p in params.items():
        base = p.data.copy()

        def along(d):
            def f(eps):
                p.data = base + eps * d
                return loss_value()
            out = _extrapolated(f, h)
            p.data = base
            return out

        g = grads[name]
        scale = max(np.abs(g).max(), 1e-6)
        checks = []
        for _ in range(n_dirs):
            d = rng.standard_normal(p.shape)
            checks.append((along(d), float((g * d).sum()), 1e-6))
        for idx in rng.choice(p.size, size=min(coords_per_param, p.size), replace=False):
            d = np.zeros(p.size)
            d[idx] = 1.0
            # single coordinates are judged against the tensor's gradient scale
            checks.append((along(d.reshape(p.shape)), float(g.reshape(-1)[idx]), scale))
        for num, ana, floor in checks:
            err = abs(num - ana) / max(abs(num), abs(ana), floor)
            if err > worst:
                worst, worst_name = err, name
    return worst, worst_name


def gradients(scale=1.0, seeds=20):
    def run():
        n = _count(seeds, scale)
        op_worst, loss_worst, where = 0.0, 0.0, None
        bad_ops = set()
        for seed in range(n):
            for name, err in check_op_gradients(seed).items():
                op_worst = max(op_worst, err)
                if err > 1e-4:
                    bad_ops.add(name)
            err, name = composite_loss_gradient(seed)
            if err > loss_worst:
                loss_worst, where = err, name
        passed = op_worst <= 1e-4 and loss_worst <= 1e-4
        return passed, {"seeds": n, "max_op_rel_error": op_worst, "failing_ops": sorted(bad_ops),
                        "max_loss_rel_error": loss_worst, "worst_parameter": where}
    return _timed("gradients", run)


# ---------------------------------------------------------------------- metrics

def auroc_oracle(scores, labels):
    """Exact pairwise comparison count."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(Fraction(1) if p > q else Fraction(1, 2) if p == q else Fraction(0)
               for p in pos for q in neg)
    return float(wins / (len(pos) * len(neg)))


def auprc_oracle(scores, labels):
    """Average precision by enumerating every distinct score as a threshold."""
    n_pos = sum(1 for y in labels if y == 1)
    total, prev_recall = Fraction(0), Fraction(0)
    for thr in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= thr and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= thr and y == 0)
        recall = Fraction(tp, n_pos)
        if tp + fp:
            total += (recall - prev_recall) * Fraction(tp, tp + fp)
        prev_recall = recall
    return float(total)


def metric_oracles(scale=1.0, seed=4):
    def run():
        rng = np.random.default_rng(seed)
        n = _count(200, scale)
        mismatches = 0
        for i in range(n):
            size = int(rng.integers(2, 51))
            labels = rng.integers(0, 2, size)
            labels[:2] = [0, 1]
            rng.shuffle(labels)
            # coarse grids force ties on half the instances
            scores = rng.integers(0, 5, size) / 4.0 if i % 2 else rng.standard_normal(size)
            s, y = scores.tolist(), labels.tolist()
            mismatches += auroc(scores, labels) != auroc_oracle(s, y)
            mismatches += auprc(scores, labels) != auprc_oracle(s, y)
        return mismatches == 0, {"instances": n, "mismatches": int(mismatches)}
    return _timed("metric_oracles", run)


SUITES = {
    "flow_identity": flow_identity,
    "invertibility": invertibility,
    "bi_lipschitz": bi_lipschitz,
    "margin_bound": margin_bound,
    "gradients": gradients,
    "metric_oracles": metric_oracles,
}


def run_all(scale=1.0, names=None):
    names = list(SUITES) if names is None else names
    return [SUITES[n](scale=scale) for n in names]
