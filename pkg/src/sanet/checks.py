"""Registered finite-difference gradient checks for every differentiable op.

Used by the ``gradcheck`` subcommand and by the test-suite.  Each check runs
``trials`` randomized trials; inputs default to N(0, 1) but are nudged away
from non-differentiable points (relu at 0, the truncation boundary of the
balanced loss) so the central difference never straddles a kink.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import losses as L
from .errors import ConfigurationError
from .model import ModelConfig, ToySANet, sam_forward
from .superpixel import SuperpixelMap, compact_labels, sp_avg_pool, sp_unpool
from .tensor import (
    GradCheckReport,
    Graph,
    RunningStats,
    Tensor,
    activation,
    batchnorm2d,
    combine,
    conv2d,
    grad_check,
    relative_error,
    upsample_nearest2x,
)

PRECISIONS = {
    # dtype, finite-difference step, per-op tolerance, end-to-end tolerance,
    # relative-error floor.  A 1e-4 central difference on an O(1) objective
    # carries ~1e-12 of rounding, so derivatives below 1e-7 are compared
    # absolutely.  f32 analytic gradients are compared against f64
    # differences; the larger floor absorbs f32 rounding on derivatives that
    # are exactly zero (e.g. a bias feeding batch norm).
    "f64": (np.float64, 1e-4, 1e-5, 1e-3, 1e-7),
    "f32": (np.float32, 1e-4, 1e-2, 1e-2, 1e-5),
}
KINK_MARGIN = 1e-3


def _away_from_zero(rng, shape):
    z = rng.standard_normal(shape)
    return np.sign(z) * (np.abs(z) + 0.05)


def _probabilities(theta):
    """Probabilities in (0.05, 0.95) whose p_t stays clear of ``theta``."""

    def draw(rng, shape):
        p = rng.uniform(0.05, 0.95, shape)
        for edge in (theta, 1.0 - theta):
            near = np.abs(p - edge) < KINK_MARGIN
            p[near] += 2 * KINK_MARGIN
        return p

    return draw


def _binary(rng, shape):
    return rng.integers(0, 2, shape).astype(np.float64)


def _positive_var(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def random_maps(rng, count, height, width, regions):
    """``count`` random (not necessarily connected) maps with every label used."""
    maps = []
    for _ in range(count):
        labels = rng.integers(0, regions, (height, width))
        labels.ravel()[:regions] = np.arange(regions)
        maps.append(SuperpixelMap.from_labels(compact_labels(labels)))
    return tuple(maps)


@dataclass(frozen=True)
class OpCheck:
    name: str
    build: callable  # (rng) -> (op, shapes, samplers, constant, arg_names)


def _conv_check(rng):
    op = lambda x, w, b: conv2d(x, w, b, stride=1, padding=1)  # noqa: E731
    return op, [(1, 2, 5, 5), (2, 2, 3, 3), (2,)], None, (), ["input", "weight", "bias"]


def _conv_strided_check(rng):
    op = lambda x, w, b: conv2d(x, w, b, stride=2, padding=1)  # noqa: E731
    return op, [(2, 2, 6, 6), (3, 2, 3, 3), (3,)], None, (), ["input", "weight", "bias"]


def _bn_train_check(rng):
    def op(x, s, b):
        return batchnorm2d(x, s, b, RunningStats(3, x.dtype), mode="train")

    return op, [(2, 3, 3, 3), (3,), (3,)], None, (), ["input", "scale", "shift"]


def _bn_eval_check(rng):
    stats = RunningStats(3, np.float64)
    stats.mean = rng.standard_normal(3)
    stats.var = _positive_var(rng, 3)
    stats.initialized = True

    def op(x, s, b):
        return batchnorm2d(x, s, b, stats, mode="eval")

    return op, [(2, 3, 3, 3), (3,), (3,)], None, (), ["input", "scale", "shift"]


def _relu_check(rng):
    return (lambda x: activation(x, "relu")), [(2, 3, 4, 4)], _away_from_zero, (), ["input"]


def _sigmoid_check(rng):
    return (lambda x: activation(x, "sigmoid")), [(2, 3, 4, 4)], None, (), ["input"]


def _add_check(rng):
    return (lambda a, b: combine(a, b, "add")), [(2, 3, 4, 4)] * 2, None, (), ["a", "b"]


def _concat_check(rng):
    op = lambda a, b: combine(a, b, "concat_channels")  # noqa: E731
    return op, [(2, 3, 4, 4), (2, 2, 4, 4)], None, (), ["a", "b"]


def _upsample_check(rng):
    return upsample_nearest2x, [(2, 2, 3, 4)], None, (), ["input"]


def _pool_check(rng):
    maps = random_maps(rng, 2, 5, 6, 4)
    return (lambda x: sp_avg_pool(x, maps).values), [(2, 3, 5, 6)], None, (), ["input"]


def _unpool_check(rng):
    maps = random_maps(rng, 2, 5, 6, 4)
    template = sp_avg_pool(Tensor(np.zeros((2, 3, 5, 6))), maps)

    def op(v):
        return sp_unpool(type(template)(v, maps, template.offsets))

    return op, [(int(template.offsets[-1]), 3)], None, (), ["regional"]


def _sam_check(mode):
    def build(rng):
        maps = random_maps(rng, 2, 5, 6, 4)
        cin = 6 if mode == "concat" else 3

        def op(x, w, b):
            return sam_forward(x, maps, lambda m: conv2d(m, w, b), mode)

        return op, [(2, 3, 5, 6), (3, cin, 1, 1), (3,)], None, (), ["features", "weight", "bias"]

    return build


def _loss_check(value_fn, grad_fn, shape, *extra, theta=0.2):
    def build(rng):
        def op(p, q):
            return L.loss_node(p, lambda pp: value_fn(pp, q.data, *extra),
                               lambda pp: grad_fn(pp, q.data, *extra))

        return op, [shape, shape], [_probabilities(theta), _binary], (1,), ["p", "q"]

    return build


def _focal_check(gamma):
    def build(rng):
        op = lambda p: L.loss_node(p, L.focal, L.focal_grad, gamma)  # noqa: E731
        return op, [(12,)], lambda r, s: r.uniform(0.05, 0.95, s), (), ["p_t"]

    return build


_LOSS_CFG = L.LossConfig(gamma=1.0, theta=0.2)
_LOSS_CFG_G2 = L.LossConfig(gamma=2.0, theta=0.2, class_weights=L.inverse_ratio_weights())

OP_CHECKS = (
    OpCheck("conv2d", _conv_check),
    OpCheck("conv2d_strided", _conv_strided_check),
    OpCheck("batchnorm_train", _bn_train_check),
    OpCheck("batchnorm_eval", _bn_eval_check),
    OpCheck("relu", _relu_check),
    OpCheck("sigmoid", _sigmoid_check),
    OpCheck("add", _add_check),
    OpCheck("concat", _concat_check),
    OpCheck("upsample", _upsample_check),
    OpCheck("sp_avg_pool", _pool_check),
    OpCheck("sp_unpool", _unpool_check),
    OpCheck("sam_add", _sam_check("add")),
    OpCheck("sam_concat", _sam_check("concat")),
    OpCheck("jal", _loss_check(L.jal, L.jal_grad, (12,), 1e-6)),
    OpCheck("jal_macro", _loss_check(L.jal_macro, L.jal_macro_grad, (6, 5), 1e-6)),
    OpCheck("jal_micro", _loss_check(L.jal_micro, L.jal_micro_grad, (6, 5), 1e-6)),
    OpCheck("gbjal", _loss_check(L.gbjal, L.gbjal_grad, (6, 5), _LOSS_CFG)),
    OpCheck("focal", _focal_check(1.0)),
    OpCheck("focal_gamma2", _focal_check(2.0)),
    OpCheck("gbcel", _loss_check(L.gbcel, L.gbcel_grad, (6, 5), _LOSS_CFG)),
    OpCheck("gbcel_weighted", _loss_check(L.gbcel, L.gbcel_grad, (6, 5), _LOSS_CFG_G2)),
    OpCheck("baseline_ce_jal", _loss_check(L.baseline_ce_jal, L.baseline_ce_jal_grad, (6, 5), _LOSS_CFG)),
    OpCheck("total_loss", _loss_check(L.total_loss, L.total_loss_grad, (6, 5), _LOSS_CFG)),
)
OP_NAMES = tuple(c.name for c in OP_CHECKS) + ("end_to_end",)


def run_op_check(check, trials=100, precision="f64", seed=0):
    dtype, step, tol, _, floor = PRECISIONS[precision]
    rng = np.random.default_rng(seed)
    op, shapes, sampler, constant, names = check.build(rng)
    return grad_check(op, shapes, trials=trials, step=step, seed=seed, dtype=dtype,
                      sampler=sampler, name=check.name, tolerance=tol, arg_names=names,
                      constant=constant, reference_dtype=np.float64, error_floor=floor)


def _quadrant_map(size):
    half = size // 2
    labels = np.zeros((size, size), dtype=np.int64)
    labels[:half, half:] = 1
    labels[half:, :half] = 2
    labels[half:, half:] = 3
    return SuperpixelMap.from_labels(labels)


def _pattern(graph, probabilities, q, theta):
    """Which side of every kink the forward pass landed on."""
    sides = [node.output.data > 0 for node in graph.nodes if node.op == "relu"]
    p_t = np.where(q >= 0.5, probabilities, 1.0 - probabilities)
    sides.append(p_t < theta)
    return sides


def _kink_free_difference(flat, objective, step, rng, max_redraws, min_step=1e-7):
    """Central difference at a random coordinate of ``flat``.

    When the +/- evaluations land on different sides of a kink the step is
    shrunk tenfold (down to ``min_step``) and, failing that, a new coordinate
    is drawn.
    """
    for _ in range(max_redraws):
        e = int(rng.integers(flat.size))
        orig = flat[e]
        h = step
        while h >= min_step:
            flat[e] = orig + h
            fp, side_p = objective()
            flat[e] = orig - h
            fm, side_m = objective()
            flat[e] = orig
            if all(np.array_equal(a, b) for a, b in zip(side_p, side_m)):
                return (fp - fm) / (2 * h), e
            h /= 10
    return (fp - fm) / (2 * h * 10), e


def end_to_end_check(trials=100, precision="f64", seed=0, coords_per_param=1, base_channels=2,
                     max_redraws=20):
    """Check d total_loss / d parameter through the full toy network.

    Each trial builds a freshly seeded network on 28x28 inputs with a
    four-region map, draws a random image and random superpixel targets, and
    compares ``coords_per_param`` randomly chosen coordinates of every
    parameter against central differences.  Steps that flip any relu (or the
    loss truncation boundary) are shrunk or redrawn: a central difference
    across a kink does not estimate the derivative.
    """
    dtype, step, _, tol, floor = PRECISIONS[precision]
    name = np.dtype(dtype).name
    rng = np.random.default_rng(seed)
    cfg = _LOSS_CFG
    spmap = _quadrant_map(28)
    maps = (spmap, spmap)
    worst = {}
    for trial in range(trials):
        mcfg = ModelConfig(height=28, width=28, base_channels=base_channels,
                           seed=int(rng.integers(2**31)), dtype=name)
        model = ToySANet(mcfg)
        image = Tensor(rng.standard_normal((2, 3, 28, 28)).astype(dtype))
        q = _binary(rng, (8, 5))
        # finite differences always run on a float64 twin of the network
        ref = model if name == "float64" else ToySANet(dataclasses.replace(mcfg, dtype="float64"))
        for a, b in zip(model.parameters(), ref.parameters()):
            b.data = a.data.astype(np.float64)
        ref_image = Tensor(image.data.astype(np.float64))

        def objective():
            with Graph() as g:
                res = ref.forward(ref_image, maps, mode="train")
            p = res.probabilities.data.astype(np.float64)
            return L.total_loss(p, q, cfg), _pattern(g, p, q, cfg.theta)

        model.zero_grad()
        with Graph() as g:
            res = model.forward(image, maps, mode="train")
        g.backward(res.probabilities, L.total_loss_grad(res.probabilities.data, q, cfg).astype(dtype))
        for p, twin in zip(model.parameters(), ref.parameters()):
            flat = twin.data.reshape(-1)
            grad = p.grad.reshape(-1) if p.grad is not None else np.zeros(flat.size)
            err = worst.get(p.name, 0.0)
            for _ in range(min(coords_per_param, flat.size)):
                numeric, e = _kink_free_difference(flat, objective, step, rng, max_redraws)
                err = max(err, float(relative_error(grad[e], numeric, floor)))
            worst[p.name] = err
    return GradCheckReport("end_to_end", worst, trials, tol)


def run_suite(ops=None, trials=100, precision="f64", seed=0, progress=None):
    """Run the named checks (default: all) and return their reports."""
    if precision not in PRECISIONS:
        raise ConfigurationError(f"precision must be one of {sorted(PRECISIONS)}")
    wanted = list(OP_NAMES) if not ops else list(ops)
    unknown = [o for o in wanted if o not in OP_NAMES]
    if unknown:
        raise ConfigurationError(f"unknown gradient check(s): {', '.join(unknown)}")
    by_name = {c.name: c for c in OP_CHECKS}
    reports = []
    for name in wanted:
        if name == "end_to_end":
            report = end_to_end_check(trials, precision, seed)
        else:
            report = run_op_check(by_name[name], trials, precision, seed)
        reports.append(report)
        if progress:
            progress(report)
    return reports
