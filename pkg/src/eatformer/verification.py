"""Self-check suites run by ``eatformer verify``."""

from __future__ import annotations

import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import analysis
from . import functional as F
from . import tensor as T
from .attention import DeformableAttention, MultiHeadAttention, msa_forward
from .blocks import GLI
from .data import decode_dataset, encode_dataset, synthetic_blobs
from .evolution import Population, crossover, crossover_as_attention, evolve, mutation, mutation_as_linear, sphere
from .gradcheck import check_gradients
from .model import build_variant, load_checkpoint, save_checkpoint
from .modules import Conv2d
from .tensor import Tensor, count_macs, no_grad

SUITES = ("ea", "grad", "cost", "roundtrip")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _check(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failed check
        return CheckResult(name, False, f"{type(exc).__name__}: {exc}")
    return CheckResult(name, bool(ok), detail)


# ---------------------------------------------------------------------------
# ea
# ---------------------------------------------------------------------------


def _random_population(rng, max_l=8, max_d=8, bounds=None):
    L, D = int(rng.integers(2, max_l + 1)), int(rng.integers(1, max_d + 1))
    if bounds is None:
        lo = rng.uniform(0.0, 1.0, D)
        bounds = np.stack([lo, lo + rng.uniform(0.0, 1.0, D)], axis=1)
    return Population(rng.normal(size=(L, D)), CR=float(rng.random()), MU=float(rng.random()), bounds=bounds)


def crossover_equivalence(trials: int = 1000, seed: int = 0) -> int:
    """Number of trials where the attention form differs bitwise from crossover."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(trials):
        pop = _random_population(rng)
        child, trace = crossover(pop, int(rng.integers(pop.size)), rng)
        mismatches += not np.array_equal(child, crossover_as_attention(pop, trace))
    return mismatches


def mutation_equivalence(trials: int = 1000, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(trials):
        pop = _random_population(rng)
        i = int(rng.integers(pop.size))
        mutant, weights = mutation(pop, i, rng)
        mismatches += not np.array_equal(mutant, mutation_as_linear(pop.individuals[i], weights))
    return mismatches


def sphere_run(seed: int = 0, generations: int = 200):
    rng = np.random.default_rng(seed)
    pop = Population(rng.uniform(-5.0, 5.0, size=(16, 4)), CR=0.5, MU=0.5, bounds=(0.5, 1.5))
    return evolve(pop, generations, sphere, rng)


def ea_suite(seed: int = 0) -> list[CheckResult]:
    def smoke():
        h = sphere_run(seed)
        best = np.asarray(h.best_fitness)
        ratio = best[0] / max(best[-1], np.finfo(float).tiny)
        monotone = bool(np.all(np.diff(best) <= 0))
        return ratio >= 100 and monotone, f"improvement x{ratio:.3g}, non-increasing={monotone}"

    return [
        _check("ea.crossover_equivalence", lambda: ((m := crossover_equivalence(1000, seed)) == 0, f"{m} mismatches")),
        _check("ea.mutation_equivalence", lambda: ((m := mutation_equivalence(1000, seed)) == 0, f"{m} mismatches")),
        _check("ea.sphere_smoke", smoke),
    ]


# ---------------------------------------------------------------------------
# grad
# ---------------------------------------------------------------------------

OP_TOL = 1e-4
MODEL_TOL = 1e-3


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def op_gradient_cases(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    """Named closures returning the worst relative error of one op on a random instance."""

    def weighted(out, w):
        return (out * w).sum()

    def case_elementwise(op):
        def run():
            x = _leaf(rng, 3, 4)
            w = rng.normal(size=(3, 4))
            return check_gradients(lambda: weighted(op(x), w), [x])
        return run

    def case_softmax():
        x, v = _leaf(rng, 3, 5), rng.normal(size=(3, 5))
        return check_gradients(lambda: weighted(T.softmax(x, axis=1), v), [x])

    def case_matmul():
        a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
        w = rng.normal(size=(2, 3, 5))
        return check_gradients(lambda: weighted(a @ b, w), [a, b])

    def case_linear():
        x, W, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 6), _leaf(rng, 6)
        w = rng.normal(size=(2, 3, 6))
        return check_gradients(lambda: weighted(F.linear(x, W, b), w), [x, W, b])

    def case_conv():
        x, W, b = _leaf(rng, 2, 4, 6, 6), _leaf(rng, 6, 2, 3, 3), _leaf(rng, 6)
        w = rng.normal(size=(2, 6, 3, 3))
        return check_gradients(lambda: weighted(F.conv2d(x, W, b, stride=2, dilation=2, groups=2, padding=2), w),
                               [x, W, b])

    def case_depthwise():
        x, W = _leaf(rng, 2, 3, 5, 5), _leaf(rng, 3, 1, 3, 3)
        w = rng.normal(size=(2, 3, 5, 5))
        return check_gradients(lambda: weighted(F.conv2d(x, W, None, groups=3, padding=1), w), [x, W])

    def case_batchnorm():
        x, g, b = _leaf(rng, 4, 3, 2, 2), _leaf(rng, 3), _leaf(rng, 3)
        w = rng.normal(size=(4, 3, 2, 2))
        rm, rv = np.zeros(3), np.ones(3)
        return check_gradients(lambda: weighted(F.batch_norm(x, g, b, rm, rv, True), w), [x, g, b])

    def case_layernorm():
        x, g, b = _leaf(rng, 2, 5, 6), _leaf(rng, 6), _leaf(rng, 6)
        w = rng.normal(size=(2, 5, 6))
        return check_gradients(lambda: weighted(F.layer_norm(x, g, b, 1e-5, axis=-1), w), [x, g, b])

    def case_bilinear():
        x = _leaf(rng, 2, 3, 5, 6)
        loc = Tensor(rng.uniform(0.2, 3.8, size=(2, 7, 2)) + 0.05, requires_grad=True)
        w = rng.normal(size=(2, 3, 7))
        return check_gradients(lambda: weighted(F.bilinear_sample(x, loc), w), [x, loc])

    def case_msa():
        p = MultiHeadAttention(8, 2, rng)
        x = _leaf(rng, 2, 5, 8)
        w = rng.normal(size=(2, 5, 8))
        return check_gradients(lambda: weighted(msa_forward(x, p), w), [x, p.q.weight, p.k.weight, p.v.weight])

    def case_md_msa():
        p = DeformableAttention(8, 2, rng)
        p.offset.weight.data[:] = rng.normal(0.0, 0.3, size=p.offset.weight.shape)
        p.offset.bias.data[:] = rng.normal(0.0, 0.3, size=3)
        x = _leaf(rng, 1, 8, 4, 4)
        w = rng.normal(size=(1, 8, 4, 4))
        return check_gradients(lambda: weighted(p(x), w), [x, p.offset.weight, p.attn.k.weight])

    def case_cross_entropy():
        logits = _leaf(rng, 4, 5)
        labels = rng.integers(0, 5, size=4)
        return check_gradients(lambda: F.cross_entropy(logits, labels), [logits])

    return {
        "add": case_elementwise(lambda x: x + x * 0.5),
        "mul": case_elementwise(lambda x: x * x),
        "relu": case_elementwise(lambda x: T.relu(x + 0.0)),
        "gelu": case_elementwise(T.gelu),
        "sigmoid": case_elementwise(T.sigmoid),
        "softmax": case_softmax,
        "matmul": case_matmul,
        "linear": case_linear,
        "conv2d": case_conv,
        "conv2d_depthwise": case_depthwise,
        "batchnorm": case_batchnorm,
        "layernorm": case_layernorm,
        "bilinear_sample": case_bilinear,
        "msa": case_msa,
        "md_msa": case_md_msa,
        "cross_entropy": case_cross_entropy,
    }


def end_to_end_gradient(seed: int = 0, samples: int = 6, entries: int = 4) -> float:
    """Spot-check the desk-variant loss gradient on sampled parameter entries.

    Runs in inference mode so norms use fixed statistics. Deformable offset
    predictors get small random weights first: at zero they sample exactly
    on the pixel grid, where bilinear interpolation has a kink.
    """
    rng = np.random.default_rng(seed)
    model = build_variant("desk", seed).eval()
    for m in model.modules():
        if isinstance(m, DeformableAttention):
            m.offset.weight.data[:] = rng.normal(0.0, 0.05, size=m.offset.weight.shape)
    images = rng.normal(size=(2, 3, 32, 32))
    labels = np.array([1, 7])
    named = list(model.named_parameters())
    picks = [named[i][1] for i in rng.choice(len(named), samples, replace=False)]
    return check_gradients(lambda: F.cross_entropy(model(images), labels), picks, max_entries=entries, rng=rng)


def grad_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, case in op_gradient_cases(rng).items():
        results.append(_check(f"grad.{name}", lambda case=case: ((e := case()) <= OP_TOL, f"rel err {e:.2e}")))
    results.append(_check("grad.desk_end_to_end",
                          lambda: ((e := end_to_end_gradient(seed)) <= MODEL_TOL, f"rel err {e:.2e}")))
    return results


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------

VARIANT_PARAM_TOL = 0.10
VARIANT_FLOP_TOL = 0.15


def counted_msa_flops(C: int, L: int, seed: int = 0) -> int:
    p = MultiHeadAttention(C, max(1, C // 32), np.random.default_rng(seed))
    with no_grad(), count_macs() as counter:
        p(Tensor(np.zeros((1, L, C))))
    return counter.flops


def counted_conv_flops(C: int, k: int, G: int, side: int, seed: int = 0) -> int:
    conv = Conv2d(C, C, k, np.random.default_rng(seed), groups=G)
    with no_grad(), count_macs() as counter:
        conv(Tensor(np.zeros((1, C, side, side))))
    return counter.flops


def standalone_gli_costs(C: int, k: int, Cg: int, side: int, head_dim: int, seed: int = 0):
    """(conv/linear params, counted flops) of a plain-MSA GLI over one whole-map window."""
    gli = GLI(C, np.random.default_rng(seed), split_ratio=Cg / C, head_dim=head_dim, window=None, kernel=k,
              deformable=False)
    params = 0
    for name, p in gli.named_parameters():
        if name.startswith(("attn.", "local.dw.", "local.pw.")):
            params += p.size
    with no_grad(), count_macs() as counter:
        gli.eval()(Tensor(np.zeros((1, C, side, side))))
    return params, counter.flops, gli


def cost_suite(seed: int = 0) -> list[CheckResult]:
    def msa():
        counted = counted_msa_flops(64, 196, seed)
        return counted == analysis.msa_cost(64, 196)[1], f"counted {counted}"

    def conv():
        counted = counted_conv_flops(32, 3, 4, 7, seed)
        return counted == analysis.conv_cost(32, 3, 4, 49)[1], f"counted {counted}"

    def closed_forms():
        bad = 0
        for k in (3, 5, 7):
            for C in range(1, 129):
                cg = np.arange(C + 1, dtype=np.int64)
                bad += int(np.sum(analysis.gli_params_closed_form(C, k, cg) != analysis.gli_params_unfactored(C, k, cg)))
                for L in (1, 49, 196):
                    bad += int(np.sum(analysis.gli_flops_closed_form(C, k, cg, L)
                                      != analysis.gli_flops_unfactored(C, k, cg, L)))
        return bad == 0, f"{bad} mismatches"

    def standalone():
        params, flops, _ = standalone_gli_costs(64, 3, 32, 14, 32, seed)
        want = (analysis.gli_params_closed_form(64, 3, 32), analysis.gli_flops_closed_form(64, 3, 32, 196))
        return (params, flops) == want, f"counted {(params, flops)}, closed form {want}"

    def variants():
        details, ok = [], True
        for name in ("mobile", "tiny", "small"):
            rec = analysis.model_cost(build_variant(name), (224, 224)).reconcile()
            ok &= abs(rec["params_rel_error"]) <= VARIANT_PARAM_TOL and abs(rec["flops_rel_error"]) <= VARIANT_FLOP_TOL
            details.append(f"{name} {rec['params_rel_error']:+.3f}/{rec['flops_rel_error']:+.3f}")
        return ok, ", ".join(details)

    def counter_walk():
        model = build_variant("desk", seed).eval()
        report = analysis.model_cost(model, (32, 32))
        with no_grad(), count_macs() as counter:
            model(np.zeros((1, 3, 32, 32)))
        ok = report.total_macs == counter.macs and report.total_params == model.num_parameters()
        return ok, f"walk {report.total_macs} MACs vs counted {counter.macs}"

    return [
        _check("cost.msa_counter", msa),
        _check("cost.conv_counter", conv),
        _check("cost.gli_closed_forms", closed_forms),
        _check("cost.gli_standalone_counter", standalone),
        _check("cost.variant_reconciliation", variants),
        _check("cost.model_walk_vs_counter", counter_walk),
    ]


# ---------------------------------------------------------------------------
# roundtrip
# ---------------------------------------------------------------------------


def roundtrip_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)

    def img_seq():
        x = Tensor(rng.normal(size=(2, 8, 7, 5)))
        back = F.seq2img(F.img2seq(x), 7, 5)
        return np.array_equal(back.data, x.data), "img2seq/seq2img"

    def windows():
        ok = True
        for side, w in ((14, 7), (9, 7), (7, 7), (5, 3)):
            x = Tensor(rng.normal(size=(2, 3, side, side)))
            tiles, _, geo = F.window_partition(x, w)
            ok &= np.array_equal(F.window_reverse(tiles, geo).data, x.data)
        return ok, "window_partition/window_reverse"

    def checkpoint():
        model = build_variant("desk", seed).eval()
        images = rng.normal(size=(2, 3, 32, 32))
        with no_grad():
            before = model(images).data
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "desk.eatf"
            save_checkpoint(model, path)
            restored = load_checkpoint(path).eval()
        with no_grad():
            after = restored(images).data
        return np.array_equal(before, after), "save/load logits"

    def dataset():
        ds = synthetic_blobs(20, 4, 32, seed)
        back = decode_dataset(encode_dataset(ds))
        return np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels), "EATD container"

    return [
        _check("roundtrip.img2seq", img_seq),
        _check("roundtrip.windows", windows),
        _check("roundtrip.checkpoint", checkpoint),
        _check("roundtrip.dataset", dataset),
    ]


SUITE_RUNNERS = {"ea": ea_suite, "grad": grad_suite, "cost": cost_suite, "roundtrip": roundtrip_suite}


def run_suites(names, seed: int = 0) -> list[CheckResult]:
    results = []
    for name in names:
        results += SUITE_RUNNERS[name](seed)
    return results


def results_to_dict(results: list[CheckResult]) -> dict:
    return {
        "passed": all(r.passed for r in results),
        "checks": [asdict(r) for r in results],
        "failed": [r.name for r in results if not r.passed],
    }
