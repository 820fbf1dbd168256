"""Built-in self-check suite run by ``corrflow verify``.

Each check returns a :class:`CheckResult`; :func:`run_suite` collects them
and the CLI exits non-zero if any failed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import (
    full_affinity,
    feature_extent,
    resource_estimate,
    restricted_affinity,
    restricted_as_full,
    soft_copy,
)
from .autodiff import RunningStats, Tensor
from .colour import BottleneckConfig, NUM_CLASSES, Palette, fit_palette, rgb_to_lab
from .encoder import EncoderConfig, EncoderParams, init_params
from .training import TrainConfig, TrainingData, clip_loss, encoder_fn


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"[{status}] {self.name}: {self.value:.3g} (limit {self.threshold:g}, {self.seconds:.1f}s){extra}"


def _timed(name: str, threshold: float, fn: Callable[[], tuple[float, str]], below: bool = True) -> CheckResult:
    t0 = time.perf_counter()
    try:
        value, detail = fn()
    except Exception as e:  # a crashing check is a failed check
        return CheckResult(name, False, float("nan"), threshold, f"{type(e).__name__}: {e}", time.perf_counter() - t0)
    ok = bool(np.isfinite(value)) and (value < threshold if below else value >= threshold)
    return CheckResult(name, ok, float(value), threshold, detail, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# gradient checks of individual ops


def _leaf(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _op_cases(rng) -> dict[str, Callable[[], tuple[Callable[[], Tensor], list[Tensor]]]]:
    def softmax_case():
        x = _leaf(rng, 3, 4, 5)
        mask = rng.random((3, 4, 5)) > 0.3
        mask[..., 0] = True
        wts = rng.standard_normal((3, 4, 5))
        return (lambda: ad.total(ad.mul(ad.softmax_over(x, -1, mask), Tensor(wts)))), [x]

    def nll_case():
        x = _leaf(rng, 4, 4, 6)
        t = rng.integers(0, 6, (4, 4))
        return (lambda: ad.nll_of_probs(ad.softmax_over(x, -1), t)), [x]

    def conv_case(stride):
        def make():
            x = _leaf(rng, 2, 8, 8, 3)
            k = _leaf(rng, 3, 3, 3, 4)
            wts = rng.standard_normal((2, 8 // stride, 8 // stride, 4))
            return (lambda: ad.total(ad.mul(ad.conv2d(x, k, stride=stride), Tensor(wts)))), [x, k]

        return make

    def bn_case():
        x = _leaf(rng, 2, 4, 4, 3)
        s, b = _leaf(rng, 3), _leaf(rng, 3)
        wts = rng.standard_normal((2, 4, 4, 3))

        def loss():
            stats = RunningStats.fresh(3, np.float64)
            return ad.total(ad.mul(ad.batch_norm(x, s, b, stats, "train"), Tensor(wts)))

        return loss, [x, s, b]

    def affinity_case():
        fr, ft = _leaf(rng, 5, 6, 3), _leaf(rng, 5, 6, 3)
        src = _leaf(rng, 5, 6, 2)
        wts = rng.standard_normal((5, 6, 2))
        return (lambda: ad.total(ad.mul(soft_copy(restricted_affinity(fr, ft, 2, normalize=True), src), Tensor(wts)))), [fr, ft, src]

    def matmul_case():
        a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
        return (lambda: ad.total(ad.relu(ad.matmul(a, ad.transpose(ad.transpose(b)))))), [a, b]

    def log_case():
        x = Tensor(rng.random((3, 3)) + 0.5, requires_grad=True)
        return (lambda: ad.mean(ad.log(ad.mul(x, x)))), [x]

    return {
        "masked softmax": softmax_case,
        "nll of probabilities": nll_case,
        "conv2d stride 1": conv_case(1),
        "conv2d stride 2": conv_case(2),
        "batch norm (train)": bn_case,
        "restricted affinity + soft copy": affinity_case,
        "matmul/transpose/relu": matmul_case,
        "log/mul/mean": log_case,
    }


def op_gradient_checks(seed: int = 0, tol: float = 1e-6) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, make in _op_cases(rng).items():
        loss_fn, leaves = make()
        results.append(_timed(f"gradient: {name}", tol, lambda: (ad.finite_diff_check(loss_fn, leaves, eps=1e-6), "")))
    return results


# ---------------------------------------------------------------------------
# whole-pipeline gradient


def _fixture_palette(frames: np.ndarray, seed: int) -> Palette:
    return fit_palette(rgb_to_lab(frames.reshape(-1, 3).astype(np.float64)), NUM_CLASSES, seed)


def pipeline_gradient_error(
    params: EncoderParams | None = None,
    n_samples: int = 50,
    seed: int = 0,
    extent: int = 16,
    n: int = 2,
    M: int = 2,
) -> float:
    """Analytic vs central-difference gradient of the full clip loss in 64-bit.

    The loss includes the bottleneck, both scheduled-sampling branches'
    encoders and the cycle.  Random draws are replayed from a fixed seed on
    every evaluation, and the stop-gradient colour path is pinned by a cache
    so the objective is a smooth function of the parameters.
    """
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(EncoderConfig.preset("tiny"), seed, np.float64)
    params = params.astype(np.float64)
    frames = rng.random((n, extent, extent, 3)).astype(np.float32)
    data = TrainingData([frames], _fixture_palette(frames, seed))
    cfg = TrainConfig(n=n, M=M, encoder=params.config, bottleneck=BottleneckConfig(), seed=seed)
    clip = data.make_clip(0, range(n), np.array([True, False, True]))
    enc = encoder_fn(params, "train")
    cache: dict = {}

    def loss_fn():
        # p=0.5 with a replayed generator exercises both reference branches
        loss, _, _ = clip_loss(clip, enc, 0.5, np.random.default_rng(seed + 1), cfg, cache)
        return loss

    return ad.finite_diff_check(loss_fn, params.weights, eps=1e-6, n_samples=n_samples, seed=seed)


# ---------------------------------------------------------------------------
# attention properties


def affinity_row_sum_error(trials: int = 1000, seed: int = 0) -> tuple[float, str]:
    """Worst row-sum deviation over random pairs; also checks masking and sign."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        h, w = rng.integers(1, 9, size=2)
        c = int(rng.integers(1, 9))
        M = int(rng.integers(0, 7))
        scale = 10.0 ** rng.uniform(-2, 1.5)
        fr = rng.standard_normal((h, w, c)) * scale
        ft = rng.standard_normal((h, w, c)) * scale
        aff = restricted_affinity(fr, ft, M)
        wts = aff.weights.data
        if (wts[~aff.mask] != 0).any():
            return float("inf"), "non-zero weight at an out-of-frame offset"
        if (wts < 0).any() or not np.isfinite(wts).all():
            return float("inf"), "negative or non-finite weight"
        worst = max(worst, float(np.abs(wts.sum(axis=(-2, -1)) - 1).max()))
    return worst, f"{trials} random pairs"


def restricted_full_deviation(seed: int = 0, extent: int = 8, M: int = 8) -> float:
    """With a window covering the whole map the restricted and dense affinities coincide."""
    rng = np.random.default_rng(seed)
    fr = rng.standard_normal((extent, extent, 16))
    ft = rng.standard_normal((extent, extent, 16))
    dense = full_affinity(fr, ft).data
    return float(np.abs(restricted_as_full(restricted_affinity(fr, ft, M)) - dense).max())


def translated_pair(h: int, w: int, dy: int, dx: int, channels: int = 64, seed: int = 0):
    """Reference with per-cell unique unit features, and a target with ``tgt[i, j] = ref[i + dy, j + dx]``.

    Cells whose source would leave the frame get fresh random features.
    """
    rng = np.random.default_rng(seed)
    ref = rng.standard_normal((h, w, channels))
    ref /= np.linalg.norm(ref, axis=-1, keepdims=True)
    tgt = rng.standard_normal((h, w, channels))
    tgt /= np.linalg.norm(tgt, axis=-1, keepdims=True)
    for i in range(h):
        for j in range(w):
            if 0 <= i + dy < h and 0 <= j + dx < w:
                tgt[i, j] = ref[i + dy, j + dx]
    return ref, tgt


def translation_accuracy(M: int = 3, extent: int = 12, tau: float = 0.05, seed: int = 0) -> tuple[float, str]:
    """Fraction of interior cells whose argmax offset equals the applied shift, over every |shift| <= M."""
    hits = total = 0
    for dy in range(-M, M + 1):
        for dx in range(-M, M + 1):
            ref, tgt = translated_pair(extent, extent, dy, dx, seed=seed + 31 * (dy + M) + (dx + M))
            off = restricted_affinity(ref, tgt, M, tau=tau).argmax_offsets()
            interior = off[M : extent - M, M : extent - M]
            hits += int((interior == (dy, dx)).all(-1).sum())
            total += interior.shape[0] * interior.shape[1]
    return hits / total, f"{total} interior cells, {(2 * M + 1) ** 2} shifts"


# ---------------------------------------------------------------------------
# resources


def resource_table(cases=((854, 480, 6), (256, 256, 6))) -> str:
    rows = [f"{'input':>10} {'feature':>9} {'M':>3} {'restricted':>12} {'full':>14} {'ratio':>10} {'reduction':>10}"]
    for W, H, M in cases:
        h, w = feature_extent(H), feature_extent(W)
        r = resource_estimate(h, w, M)
        rows.append(
            f"{W:>4}x{H:<5} {w:>4}x{h:<4} {M:>3} {r['restricted_elements']:>12,} {r['full_elements']:>14,} "
            f"{r['ratio']:>10.5f} {1 / r['ratio']:>9.1f}x"
        )
    return "\n".join(rows)


def params_finite(params: EncoderParams) -> tuple[float, str]:
    bad = [k for k, t in params.weights.items() if not np.isfinite(t.data).all()]
    bad += [k for k, s in params.norm_stats.items() if not (np.isfinite(s.mean).all() and np.isfinite(s.var).all())]
    return float(len(bad)), ", ".join(bad[:5])


def run_suite(params: EncoderParams | None = None, seed: int = 0) -> list[CheckResult]:
    results = op_gradient_checks(seed)
    if params is not None:
        results.append(_timed("checkpoint tensors finite", 1, lambda: params_finite(params)))
    check_params = params if params is not None and params.num_parameters() < 100_000 else None
    results.append(
        _timed("gradient: full pipeline (tiny, 16x16, n=2, M=2, 64-bit)", 1e-3,
               lambda: (pipeline_gradient_error(check_params, 50, seed), "50 sampled parameters"))
    )
    results.append(_timed("affinity rows sum to 1", 1e-6, lambda: affinity_row_sum_error(1000, seed)))
    results.append(_timed("restricted == full (8x8, M=8)", 1e-6, lambda: (restricted_full_deviation(seed), "")))
    results.append(_timed("translation oracle", 1.0, lambda: translation_accuracy(seed=seed), below=False))
    r = resource_estimate(feature_extent(480), feature_extent(854), 6)
    results.append(_timed("restricted/full reduction at 480p", 150, lambda: (1 / r["ratio"], ""), below=False))
    return results
