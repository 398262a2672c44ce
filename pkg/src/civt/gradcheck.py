"""Finite-difference verification of backward passes.

check_gradients perturbs each parameter element by +-h, evaluates the
scalar function twice, and compares the central difference against the
analytic gradient from backward().  Everything runs in float64; the
relative error uses a small denominator floor so elements whose true
gradient is numerically zero do not divide by noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericsError
from .tensor import Tensor, debug_nan_checks, no_grad

DENOM_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    """Outcome of checking one scalar function against finite differences."""

    name: str
    passed: bool
    max_rel_err: float = float("nan")
    max_abs_err: float = float("nan")
    worst_param: str = ""
    checked: int = 0
    note: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        if self.note:
            return f"{status} {self.name}: {self.note}"
        return (
            f"{status} {self.name}: max_rel_err={self.max_rel_err:.3e} "
            f"max_abs_err={self.max_abs_err:.3e} ({self.worst_param}, {self.checked} elems)"
        )


def check_gradients(name: str, f, params: dict[str, Tensor], h: float = 1e-5,
                    rel_tol: float = 1e-5, max_elements: int | None = None,
                    seed: int = 0) -> GradCheckReport:
    """Compare backward() of ``f()`` against central differences.

    Args:
        name: label for the report.
        f: zero-argument callable returning a scalar Tensor built from
           ``params`` (a closure over them).
        params: name -> float64 leaf Tensor with requires_grad=True.
        h: central-difference step.
        rel_tol: per-element relative error threshold.
        max_elements: if set, check a deterministic random subset of this
            many elements per parameter instead of all of them.
        seed: seed for the subset choice.

    A NumericsError raised inside ``f`` (for example by the non-finite
    check) is reported as a failure naming the offending op rather than
    propagating.
    """
    for pname, p in params.items():
        if p.data.dtype != np.float64:
            raise TypeError(f"gradcheck requires float64 params, {pname} is {p.data.dtype}")
        p.data = np.ascontiguousarray(p.data)  # perturbed through a flat view below
        p.grad = None

    try:
        with debug_nan_checks():
            loss = f()
        loss.backward()
    except NumericsError as exc:
        return GradCheckReport(name=name, passed=False, note=str(exc))

    analytic = {}
    for pname, p in params.items():
        analytic[pname] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    max_abs = 0.0
    worst = ""
    checked = 0
    try:
        for pname, p in params.items():
            flat = p.data.reshape(-1)
            n = flat.size
            idx = np.arange(n)
            if max_elements is not None and n > max_elements:
                idx = np.sort(rng.choice(n, size=max_elements, replace=False))
            ga = analytic[pname].reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                with no_grad(), debug_nan_checks():
                    up = f().item()
                flat[i] = orig - h
                with no_grad(), debug_nan_checks():
                    down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * h)
                abs_err = abs(ga[i] - numeric)
                rel_err = abs_err / max(DENOM_FLOOR, abs(ga[i]), abs(numeric))
                checked += 1
                max_abs = max(max_abs, abs_err)
                if rel_err > max_rel:
                    max_rel = rel_err
                    worst = pname
    except NumericsError as exc:
        return GradCheckReport(name=name, passed=False, note=str(exc))

    return GradCheckReport(
        name=name,
        passed=max_rel <= rel_tol,
        max_rel_err=max_rel,
        max_abs_err=max_abs,
        worst_param=worst or next(iter(params), ""),
        checked=checked,
    )


@dataclass
class SuiteCase:
    """One entry of the standard gradient suite."""

    name: str
    build: object  # () -> (f, params) with fresh float64 tensors
    rel_tol: float = 1e-5
    max_elements: int | None = None


def run_cases(cases, h: float = 1e-5) -> list[GradCheckReport]:
    reports = []
    for case in cases:
        f, params = case.build()
        reports.append(
            check_gradients(case.name, f, params, h=h, rel_tol=case.rel_tol,
                            max_elements=case.max_elements)
        )
    return reports


# ---------------------------------------------------------------------------
# the standard suite: primitives, layers, losses, full pipelines


def _rand(seed, *shape, lo=None, hi=None):
    rng = np.random.default_rng(seed)
    if lo is not None:
        return rng.uniform(lo, hi, size=shape)
    return rng.normal(size=shape)


def _t(seed, *shape, lo=None, hi=None):
    return Tensor(_rand(seed, *shape, lo=lo, hi=hi), requires_grad=True)


def _w(seed, *shape):
    return Tensor(_rand(seed, *shape))  # fixed weighting, not a check target


def build_suite() -> list[SuiteCase]:
    """Gradient checks over every primitive, layer, loss, and pipeline.

    Layer-level cases use rel_tol 1e-5; the end-to-end pipelines use
    1e-4.  All tensors are float64 and sized so the whole suite runs in
    well under five minutes on one core.
    """
    from . import layers as L
    from .distill import DistillConfig, civt_loss, cross_entropy, kd_kl
    from .models import ModelSpec, TokenLogits, build
    from .tensor import concat, log_softmax_rows, softmax_rows

    cases: list[SuiteCase] = []

    def case(name, builder, tol=1e-5, max_elements=None):
        cases.append(SuiteCase(name, builder, rel_tol=tol, max_elements=max_elements))

    # ---- primitives ----------------------------------------------------

    def elementwise(name, fn, lo=None, hi=None):
        def builder():
            x = _t(11, 3, 5, lo=lo, hi=hi)
            w = _w(12, 3, 5)
            return (lambda: (fn(x) * w).sum()), {"x": x}

        case(name, builder)

    elementwise("prim_exp", lambda x: x.exp())
    elementwise("prim_log", lambda x: x.log(), lo=0.2, hi=3.0)
    elementwise("prim_sqrt", lambda x: x.sqrt(), lo=0.2, hi=3.0)
    elementwise("prim_tanh", lambda x: x.tanh())
    elementwise("prim_gelu", lambda x: x.gelu())
    elementwise("prim_neg_pow", lambda x: (-x) ** 3 + x**2)

    def relu_builder():
        # keep inputs away from the kink where the derivative jumps
        x = Tensor(np.linspace(-2.05, 2.05, 42).reshape(6, 7), requires_grad=True)
        w = _w(13, 6, 7)
        return (lambda: (x.relu() * w).sum()), {"x": x}

    case("prim_relu", relu_builder)

    def arith_builder():
        a = _t(20, 4, 5)
        b = _t(21, 5)  # exercises broadcasting in both directions
        c = _t(22, 4, 5, lo=0.5, hi=2.0)
        w = _w(23, 4, 5)

        def f():
            z = (a + b) * c - (a - b) / c + 2.0 * a - b * 0.5
            return (z * w).sum()

        return f, {"a": a, "b": b, "c": c}

    case("prim_arithmetic", arith_builder)

    def matmul_builder():
        a = _t(30, 4, 6)
        b = _t(31, 6, 3)
        w = _w(32, 4, 3)
        return (lambda: ((a @ b) * w).sum()), {"a": a, "b": b}

    case("prim_matmul", matmul_builder)

    def matmul_batched_builder():
        a = _t(33, 2, 3, 4, 5)
        b = _t(34, 2, 3, 5, 2)
        w = _w(35, 2, 3, 4, 2)
        return (lambda: ((a @ b) * w).sum()), {"a": a, "b": b}

    case("prim_matmul_batched", matmul_batched_builder)

    def reduce_builder():
        x = _t(40, 3, 4, 5)
        w = _w(41, 3, 5)

        def f():
            return (x.sum(axis=1) * w).sum() + x.mean(axis=(0, 2)).sum() + x.mean()

        return f, {"x": x}

    case("prim_sum_mean", reduce_builder)

    def shape_builder():
        a = _t(50, 2, 3, 4)
        b = _t(51, 2, 1, 4)

        def f():
            z = concat([a, b.broadcast_to((2, 3, 4))], axis=1)
            z = z.transpose(1, 0, 2).reshape(6, 8)
            return (z[1:5, ::2] ** 2).sum() + z[0].sum()

        return f, {"a": a, "b": b}

    case("prim_shape_ops", shape_builder)

    def softmax_builder():
        x = _t(60, 4, 7)
        w = _w(61, 4, 7)
        return (lambda: (softmax_rows(x, temperature=2.3) * w).sum()), {"x": x}

    case("prim_softmax_rows", softmax_builder)

    def log_softmax_builder():
        x = _t(62, 4, 7)
        w = _w(63, 4, 7)
        return (lambda: (log_softmax_rows(x, temperature=0.7) * w).sum()), {"x": x}

    case("prim_log_softmax_rows", log_softmax_builder)

    # ---- layers ---------------------------------------------------------

    def linear_builder():
        lin = L.Linear(np.random.default_rng(70), 5, 7, dtype=np.float64)
        x = _t(71, 4, 5)
        w = _w(72, 4, 7)
        return (lambda: (lin(x) * w).sum()), {"x": x, "w": lin.w, "b": lin.b}

    case("layer_linear", linear_builder)

    def layer_norm_builder():
        ln = L.LayerNorm(6, dtype=np.float64)
        ln.gain.data = _rand(73, 6, lo=0.5, hi=1.5)
        ln.bias.data = _rand(74, 6) * 0.1
        x = _t(75, 5, 6)
        w = _w(76, 5, 6)
        return (lambda: (ln(x) * w).sum()), {"x": x, "gain": ln.gain, "bias": ln.bias}

    case("layer_layer_norm", layer_norm_builder)

    def group_norm_builder():
        gn = L.GroupNorm(2, 8, dtype=np.float64)
        gn.gain.data = _rand(77, 8, lo=0.5, hi=1.5)
        gn.bias.data = _rand(78, 8) * 0.1
        x = _t(79, 2, 8, 3, 3)
        w = _w(80, 2, 8, 3, 3)
        return (lambda: (gn(x) * w).sum()), {"x": x, "gain": gn.gain, "bias": gn.bias}

    case("layer_group_norm", group_norm_builder)

    def mhsa_builder():
        attn = L.MultiHeadSelfAttention(np.random.default_rng(81), 8, 2, dtype=np.float64)
        x = _t(82, 2, 5, 8)
        w = _w(83, 2, 5, 8)
        params = {"x": x}
        params.update(dict(attn.named_parameters()))
        return (lambda: (attn(x) * w).sum()), params

    case("layer_attention", mhsa_builder)

    def block_builder():
        blk = L.TransformerBlock(np.random.default_rng(84), 8, 2, dtype=np.float64)
        x = _t(85, 2, 4, 8)
        w = _w(86, 2, 4, 8)
        params = {"x": x}
        params.update(dict(blk.named_parameters()))
        return (lambda: (blk(x) * w).sum()), params

    case("layer_transformer_block", block_builder)

    def patch_builder():
        pe = L.PatchEmbed(np.random.default_rng(87), (8, 8), 4, 3, 6, dtype=np.float64)
        x = _t(88, 2, 3, 8, 8)
        w = _w(89, 2, 4, 6)
        params = {"x": x}
        params.update(dict(pe.named_parameters()))
        return (lambda: (pe(x) * w).sum()), params

    case("layer_patch_embed", patch_builder)

    def conv_builder(stride, padding, pad_mode, seed):
        def builder():
            x = _t(seed, 2, 3, 6, 6)
            wgt = Tensor(_rand(seed + 1, 4, 3, 3, 3) * 0.3, requires_grad=True)
            b = Tensor(_rand(seed + 2, 4) * 0.1, requires_grad=True)

            def f():
                y = L.conv2d(x, wgt, b, stride=stride, padding=padding, pad_mode=pad_mode)
                return (y * y).sum()

            return f, {"x": x, "w": wgt, "b": b}

        return builder

    case("layer_conv2d_zeros", conv_builder(1, 1, "zeros", 90))
    case("layer_conv2d_circular_s2", conv_builder(2, 1, "circular", 93))

    def involution_builder(stride, seed):
        def builder():
            inv = L.Involution2d(np.random.default_rng(seed), 8, kernel_size=3,
                                 groups=2, reduction=4, stride=stride, dtype=np.float64)
            # zero-init biases leave relu at the kink; nudge them off it
            inv.b_reduce.data = _rand(seed + 1, inv.b_reduce.size) * 0.3
            inv.b_span.data = _rand(seed + 2, inv.b_span.size) * 0.3
            x = _t(seed + 3, 2, 8, 5, 5)

            def f():
                y = inv(x)
                return (y * y).sum()

            params = {"x": x}
            params.update(dict(inv.named_parameters()))
            return f, params

        return builder

    case("layer_involution", involution_builder(1, 100))
    case("layer_involution_s2", involution_builder(2, 105))

    def pool_builder():
        x = _t(110, 2, 5, 3, 4)
        w = _w(111, 2, 5)
        return (lambda: (L.global_avg_pool(x) * w).sum()), {"x": x}

    case("layer_global_avg_pool", pool_builder)

    # ---- losses ---------------------------------------------------------

    def ce_hard_builder():
        z = _t(120, 6, 5)
        labels = np.array([0, 3, 2, 4, 1, 1])
        return (lambda: cross_entropy(z, labels)), {"logits": z}

    case("loss_cross_entropy", ce_hard_builder)

    def ce_soft_builder():
        z = _t(121, 5, 4)
        t = np.random.default_rng(122).dirichlet(np.ones(4), size=5)
        return (lambda: cross_entropy(z, t)), {"logits": z}

    case("loss_cross_entropy_soft", ce_soft_builder)

    def kd_builder():
        z = _t(123, 5, 7)
        t = _rand(124, 5, 7) * 2.0
        return (lambda: kd_kl(z, t, temperature=2.0)), {"student": z}

    case("loss_kd_kl", kd_builder)

    def civt_loss_builder():
        zc = _t(125, 4, 6)
        zv = _t(126, 4, 6)
        zi = _t(127, 4, 6)
        t0 = _rand(128, 4, 6)
        t1 = _rand(129, 4, 6)
        labels = np.array([0, 5, 2, 3])
        cfg = DistillConfig(mode="cross_bias", lambda0=1.0, lambda1=0.7,
                            lambda2=1.3, tau1=1.0, tau2=2.0)

        def f():
            out = TokenLogits(class_logits=zc, conv_logits=zv, inv_logits=zi)
            return civt_loss(out, labels, [t0, t1], cfg)[0]

        return f, {"class": zc, "conv": zv, "inv": zi}

    case("loss_civt_cross_bias", civt_loss_builder)

    def naive_builder():
        zc = _t(130, 4, 6)
        t0 = _rand(131, 4, 6)
        t1 = _rand(132, 4, 6)
        labels = np.array([1, 0, 5, 2])
        cfg = DistillConfig(mode="naive_multi", tau1=1.5, tau2=0.8)

        def f():
            out = TokenLogits(class_logits=zc)
            return civt_loss(out, labels, [t0, t1], cfg)[0]

        return f, {"class": zc}

    case("loss_naive_multi", naive_builder)

    # ---- pipelines (full model + loss, checked at 1e-4) ----------------

    def civt_pipeline_builder():
        spec = ModelSpec(family="civt", image_size=8, channels=3, classes=5,
                         width=8, depth=1, heads=2, patch=4)
        model = build(spec, seed=7, dtype=np.float64)
        x = _t(140, 2, 3, 8, 8)
        labels = np.array([1, 4])
        t0 = _rand(141, 2, 5)
        t1 = _rand(142, 2, 5)
        cfg = DistillConfig(mode="cross_bias")

        def f():
            return civt_loss(model(x), labels, [t0, t1], cfg)[0]

        params = {"images": x}
        params.update(dict(model.named_parameters()))
        return f, params

    case("pipeline_civt_distill", civt_pipeline_builder, tol=1e-4)

    def teacher_pipeline_builder(family, seed):
        # Teachers are checked at O(1) random weights: at the tiny build-time
        # init, GroupNorm divides by a near-zero std, which amplifies the
        # +-h probes enough to push pre-relu values across the kink and
        # corrupt the central differences.  O(1) weights shrink that window
        # by orders of magnitude without touching the code under test.
        def builder():
            spec = ModelSpec(family=family, image_size=6, channels=3, classes=4,
                             stage_widths=(8, 16), blocks_per_stage=1, gn_groups=4,
                             inv_kernel=3, inv_groups=2, inv_reduction=4)
            model = build(spec, seed=seed, dtype=np.float64)
            r = np.random.default_rng(seed + 500)
            for _, p in model.named_parameters():
                scale = 0.6 if p.data.ndim > 1 else 0.3
                p.data = r.normal(size=p.data.shape) * scale
            x = _t(seed + 900, 1, 3, 6, 6)
            labels = np.array([2])

            def f():
                return cross_entropy(model(x), labels)

            params = {"images": x}
            params.update(dict(model.named_parameters()))
            return f, params

        return builder

    case("pipeline_cnn_supervised", teacher_pipeline_builder("cnn", 150),
         tol=1e-4, max_elements=256)
    case("pipeline_inn_supervised", teacher_pipeline_builder("inn", 160),
         tol=1e-4, max_elements=256)

    def mixer_pipeline_builder():
        spec = ModelSpec(family="mixer", image_size=8, channels=3, classes=4,
                         width=8, depth=1, patch=4)
        model = build(spec, seed=9, dtype=np.float64)
        x = _t(170, 2, 3, 8, 8)
        labels = np.array([2, 1])

        def f():
            return cross_entropy(model(x), labels)

        params = {"images": x}
        params.update(dict(model.named_parameters()))
        return f, params

    case("pipeline_mixer_supervised", mixer_pipeline_builder, tol=1e-4)

    def single_tok_pipeline_builder():
        spec = ModelSpec(family="transformer", image_size=8, channels=3, classes=4,
                         width=8, depth=1, heads=2, patch=4)
        model = build(spec, seed=11, dtype=np.float64)
        x = _t(180, 2, 3, 8, 8)
        labels = np.array([3, 0])
        t0 = _rand(181, 2, 4)
        cfg = DistillConfig(mode="single", tau1=2.0)

        def f():
            return civt_loss(model(x), labels, [t0], cfg)[0]

        params = {"images": x}
        params.update(dict(model.named_parameters()))
        return f, params

    case("pipeline_single_teacher_distill", single_tok_pipeline_builder, tol=1e-4)

    return cases
