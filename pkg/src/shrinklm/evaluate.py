"""Perplexity, ROUGE-L, and benchmark harnesses.

Perplexity is exp(mean next-token NLL) over non-overlapping fixed-length
windows. ROUGE-L is the sentence-level LCS variant with a recall-weighted
F measure (beta = 1.2), on case-folded whitespace tokens; scores are
percentages. Benchmark timings are medians over repeated single-threaded
runs after a warmup pass.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .model import forward, greedy_generate, tokenize_bytes

ROUGE_BETA = 1.2


# ---------------------------------------------------------------------------
# perplexity
# ---------------------------------------------------------------------------

def window_nll(model, window: np.ndarray) -> tuple[float, int]:
    """(total NLL, prediction count) for one token window."""
    logits = forward(model, window)
    zmax = np.max(logits, axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.sum(np.exp(logits - zmax), axis=-1))
    targets = window[1:]
    nll = lse[:-1] - logits[np.arange(len(targets)), targets]
    return float(np.sum(nll)), len(targets)


def perplexity_windows(model, windows) -> float:
    total, count = 0.0, 0
    for w in windows:
        nll, n = window_nll(model, np.asarray(w, dtype=np.int64))
        total += nll
        count += n
    if count == 0:
        raise ValidationError("perplexity: no predictions (empty windows)")
    return float(np.exp(total / count))


def corpus_windows(corpus: bytes, seq_len: int, max_windows: int | None = None) -> np.ndarray:
    ids = tokenize_bytes(corpus)
    n_windows = ids.size // seq_len
    if n_windows == 0:
        raise ValidationError(
            f"corpus too short: {ids.size} tokens < window length {seq_len}"
        )
    if max_windows is not None:
        n_windows = min(n_windows, max_windows)
    return ids[: n_windows * seq_len].reshape(n_windows, seq_len)


def perplexity(model, corpus: bytes, seq_len: int = 256,
               max_windows: int | None = None) -> float:
    """exp(mean next-token NLL) over non-overlapping windows of seq_len."""
    return perplexity_windows(model, corpus_windows(corpus, seq_len, max_windows))


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

def _as_words(x) -> list[str]:
    if isinstance(x, str):
        return x.lower().split()
    return [str(w).lower() for w in x]


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        ai = a[i - 1]
        for j in range(1, len(b) + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = cur[j - 1] if cur[j - 1] >= prev[j] else prev[j]
        prev = cur
    return prev[len(b)]


def rouge_l(hypothesis, reference) -> dict[str, float]:
    """LCS-based ROUGE-L: precision, recall, F (percentages 0..100).

    F uses the standard recall-weighted combination
    (1 + beta^2) P R / (R + beta^2 P) with beta = 1.2. Inputs may be
    strings (case-folded, whitespace-tokenized) or word sequences.
    """
    ref = _as_words(reference)
    if not ref:
        raise ValidationError("rouge_l: empty reference")
    hyp = _as_words(hypothesis)
    if not hyp:
        return {"precision": 0.0, "recall": 0.0, "f": 0.0}
    lcs = _lcs_length(hyp, ref)
    p = lcs / len(hyp)
    r = lcs / len(ref)
    if p + r == 0.0:
        f = 0.0
    else:
        b2 = ROUGE_BETA * ROUGE_BETA
        f = (1 + b2) * p * r / (r + b2 * p)
    return {"precision": 100.0 * p, "recall": 100.0 * r, "f": 100.0 * f}


# ---------------------------------------------------------------------------
# benchmarks
# ---------------------------------------------------------------------------

@dataclass
class ThroughputRow:
    name: str
    tokens_per_sec: float
    speedup: float
    seconds: float


def _time_generation(run, repeats: int) -> float:
    run()  # warmup
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def throughput_bench(dense_model, compressed_model, schedule, prompt,
                     gen_len: int = 16, repeats: int = 5,
                     progressive_model=None) -> list[ThroughputRow]:
    """Median tokens/sec for dense, static-compressed, and progressive decoding.

    One timed unit is prompt prefill plus gen_len greedy tokens; tokens/sec
    counts prompt and generated tokens together. The progressive row runs
    on `progressive_model` when given (a model materialized for the
    schedule), otherwise on `compressed_model`.
    """
    from .decoding import progressive_generate, static_generate

    prompt = np.asarray(prompt, dtype=np.int64)
    n_tokens_total = prompt.size + gen_len
    rows: list[ThroughputRow] = []

    dense_sec = _time_generation(lambda: greedy_generate(dense_model, prompt, gen_len), repeats)
    rows.append(ThroughputRow("dense", n_tokens_total / dense_sec, 1.0, dense_sec))

    budget = compressed_model.allocation.budget
    static_sec = _time_generation(
        lambda: static_generate(compressed_model, prompt, budget, gen_len), repeats
    )
    rows.append(ThroughputRow(
        "static_compressed", n_tokens_total / static_sec, dense_sec / static_sec, static_sec
    ))

    prog_model = progressive_model if progressive_model is not None else compressed_model
    prog_sec = _time_generation(
        lambda: progressive_generate(prog_model, prompt, schedule, gen_len), repeats
    )
    rows.append(ThroughputRow(
        "progressive", n_tokens_total / prog_sec, dense_sec / prog_sec, prog_sec
    ))
    return rows


@dataclass
class SearchTimeReport:
    fisher_seconds: float
    baseline_seconds: float
    ratio: float


def search_time_bench(model, calib_batches, calib_windows,
                      target_rate: float = 0.2) -> SearchTimeReport:
    """Wall-clock of the gradient-based rank search vs the perplexity-grid one.

    The gradient path is one calibration backward pass plus the O(params)
    importance reduction and the budget split; the baseline re-measures
    calibration perplexity per projection and grid rank.
    """
    from .compression import (
        baseline_allocate_perplexity, budget_for_params, compute_importance,
        allocate_ranks, default_caps, dense_projection_params,
    )
    from .model import backward

    t0 = time.perf_counter()
    for batch in calib_batches:
        backward(model, batch)
    imp = compute_importance(model, "fisher")
    target = int((1.0 - target_rate) * dense_projection_params(model.config))
    budget = budget_for_params(imp, target, model.config)
    allocate_ranks(imp, budget, 1, default_caps(model.config))
    fisher_seconds = time.perf_counter() - t0

    baseline = baseline_allocate_perplexity(model, calib_windows, target_rate)
    return SearchTimeReport(
        fisher_seconds=fisher_seconds,
        baseline_seconds=baseline.seconds,
        ratio=baseline.seconds / fisher_seconds,
    )


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    perplexity: float
    rouge_l: dict[str, float]
    compression_rate: float
    throughput: float
    wall_clock: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.perplexity < 1.0:
            raise ValidationError(f"perplexity {self.perplexity} below 1")
        for k, v in self.rouge_l.items():
            if not 0.0 <= v <= 100.0:
                raise ValidationError(f"rouge_l[{k}]={v} outside [0, 100]")
        for k, v in self.wall_clock.items():
            if v < 0.0:
                raise ValidationError(f"wall_clock[{k}]={v} negative")

    def to_json_dict(self) -> dict:
        return {
            "perplexity": self.perplexity,
            "rouge_l": self.rouge_l,
            "compression_rate": self.compression_rate,
            "throughput_tokens_per_sec": self.throughput,
            "wall_clock_seconds": self.wall_clock,
        }

    def to_table(self) -> str:
        lines = [
            f"{'metric':<28}{'value':>14}",
            f"{'-' * 42}",
            f"{'perplexity':<28}{self.perplexity:>14.4f}",
            f"{'rouge_l precision':<28}{self.rouge_l['precision']:>14.2f}",
            f"{'rouge_l recall':<28}{self.rouge_l['recall']:>14.2f}",
            f"{'rouge_l f':<28}{self.rouge_l['f']:>14.2f}",
            f"{'compression_rate %':<28}{100 * self.compression_rate:>14.2f}",
            f"{'throughput tok/s':<28}{self.throughput:>14.1f}",
        ]
        for k in sorted(self.wall_clock):
            lines.append(f"{'wall ' + k + ' s':<28}{self.wall_clock[k]:>14.3f}")
        return "\n".join(lines)
