"""End-to-end orchestration: calibrate, allocate, compress, schedule, score.

These helpers wire the modules together the way the CLI and the
experiment harness use them: gradients come from a calibration backward
pass, allocations are sized in parameter terms (a budget is searched so
the factorized parameter count matches the requested compression rate),
and progressive-decoding runs materialize the model at a budget whose
parameter count matches the dense projections (so a static schedule at
the start budget means roughly 0% compression and budgets decay from
there).
"""

from dataclasses import dataclass

import numpy as np

from .compression import (
    CompressedLM, ImportanceMap, RankAllocation, allocate_ranks, budget_for_params,
    compress_model, compute_importance, default_caps, dense_projection_params,
    uniform_rank_allocation,
)
from .decoding import (
    DecodeSchedule, RateAccounting, build_schedule_candidates,
    overall_compression_rate, progressive_generate, search_schedule, static_generate,
)
from .errors import ValidationError
from .evaluate import perplexity_windows, rouge_l
from .model import TinyLM, backward, detokenize, greedy_generate, tokenize_bytes


@dataclass(frozen=True)
class CalibConfig:
    sequences: int = 32
    length: int = 128
    seed: int = 7

    def to_dict(self) -> dict:
        return {"sequences": self.sequences, "length": self.length, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibConfig":
        return cls(**d)


def calibration_batches(corpus: bytes, calib: CalibConfig,
                        batch_size: int = 8) -> list[np.ndarray]:
    """Deterministic calibration windows grouped into backward-sized batches."""
    ids = tokenize_bytes(corpus)
    span = calib.length + 1
    if ids.size <= span:
        raise ValidationError("calibration corpus shorter than one sequence")
    rng = np.random.default_rng(calib.seed)
    starts = rng.integers(0, ids.size - span, size=calib.sequences)
    seqs = np.stack([ids[s : s + span] for s in starts])
    return [seqs[i : i + batch_size] for i in range(0, len(seqs), batch_size)]


def calibrate(model: TinyLM, batches) -> float:
    """Populate model.grads with the mean gradient over calibration batches."""
    batches = list(batches)
    if not batches:
        raise ValidationError("calibrate: no batches")
    acc: dict[str, np.ndarray] | None = None
    losses = []
    for batch in batches:
        losses.append(backward(model, batch))
        if acc is None:
            acc = {k: v.copy() for k, v in model.grads.items()}
        else:
            for k, v in model.grads.items():
                acc[k] += v
    for k in acc:
        acc[k] /= len(batches)
    model.grads = acc
    return float(np.mean(losses))


def allocation_for_rate(imp: ImportanceMap, config, target_rate: float,
                        floor: int = 1) -> RankAllocation:
    """Allocation whose factorized parameter count is ~(1 - rate) x dense."""
    if not 0.0 <= target_rate < 1.0:
        raise ValidationError(f"target_rate {target_rate} outside [0, 1)")
    target = int(round((1.0 - target_rate) * dense_projection_params(config)))
    budget = budget_for_params(imp, target, config, floor)
    return allocate_ranks(imp, budget, floor, default_caps(config))


def compress_at_rate(model: TinyLM, target_rate: float, metric: str = "fisher",
                     whitening: bool = True, calib_sequences=None,
                     floor: int = 1) -> CompressedLM:
    """Importance -> parameter-matched allocation -> factorization."""
    imp = compute_importance(model, metric)
    alloc = allocation_for_rate(imp, model.config, target_rate, floor)
    return compress_model(
        model, alloc, whitening=whitening, calib_sequences=calib_sequences, importance=imp,
    )


def calib_sequences_from_batches(batches) -> list[np.ndarray]:
    """Flatten calibration batches into single sequences for Gram collection."""
    return [seq for batch in batches for seq in np.asarray(batch)]


def make_prompt_pairs(dense_model: TinyLM, corpus: bytes, n_prompts: int,
                      prompt_len: int, n_tokens: int, seed: int):
    """(prompt tokens, reference text) pairs; references are the dense
    model's own greedy continuations.

    Prompts whose reference contains no words (a barely trained model can
    emit pure whitespace) are skipped and redrawn.
    """
    ids = tokenize_bytes(corpus)
    if ids.size <= prompt_len + 1:
        raise ValidationError("corpus too short for prompts")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(8 * n_prompts):
        if len(pairs) >= n_prompts:
            break
        s = int(rng.integers(0, ids.size - prompt_len - 1))
        prompt = ids[s : s + prompt_len]
        ref = detokenize(greedy_generate(dense_model, prompt, n_tokens))
        if ref.split():
            pairs.append((prompt, ref))
    if not pairs:
        raise ValidationError(
            "no usable calibration prompts: the reference model generates no words"
        )
    return pairs


# ---------------------------------------------------------------------------
# experiments backing the directional claims
# ---------------------------------------------------------------------------

def allocation_quality_experiment(model: TinyLM, eval_windows, rates,
                                  whitening: bool = True, calib_sequences=None,
                                  metric: str = "fisher") -> dict:
    """Eval perplexity of importance-guided vs uniform-rank allocation."""
    imp = compute_importance(model, metric)
    table: dict[str, dict[str, float]] = {}
    for rate in rates:
        alloc = allocation_for_rate(imp, model.config, rate)
        guided = compress_model(model, alloc, whitening=whitening,
                                calib_sequences=calib_sequences, importance=imp)
        target = int(round((1.0 - rate) * dense_projection_params(model.config)))
        uni_alloc = uniform_rank_allocation(model.config, target)
        uniform = compress_model(model, uni_alloc, whitening=whitening,
                                 calib_sequences=calib_sequences)
        table[f"{rate:.2f}"] = {
            metric: perplexity_windows(guided, eval_windows),
            "uniform": perplexity_windows(uniform, eval_windows),
            f"{metric}_params": guided.projection_params_used(),
            "uniform_params": uniform.projection_params_used(),
        }
    return table


def metric_ablation_experiment(model: TinyLM, eval_windows, rate: float,
                               whitening: bool = True, calib_sequences=None) -> dict:
    """Eval perplexity at one rate for fisher vs weight-only vs grad-only."""
    out: dict[str, float] = {}
    for metric in ("fisher", "weight_only", "grad_only"):
        imp = compute_importance(model, metric)
        alloc = allocation_for_rate(imp, model.config, rate)
        comp = compress_model(model, alloc, whitening=whitening,
                              calib_sequences=calib_sequences, importance=imp)
        out[metric] = perplexity_windows(comp, eval_windows)
    return out


def materialize_for_decoding(model: TinyLM, metric: str = "fisher",
                             whitening: bool = True, calib_sequences=None,
                             start_rate: float = 0.0, floor: int = 1) -> CompressedLM:
    """Compress at the schedule's starting budget (default: parameter parity
    with the dense projections, i.e. ~0% compression at the first token)."""
    return compress_at_rate(model, start_rate, metric, whitening, calib_sequences, floor)


def schedule_search_pipeline(compressed: CompressedLM, target_rate: float,
                             horizon: int, calib_pairs):
    """Candidates near the target overall rate, scored on calibration prompts."""
    acct = RateAccounting.for_model(compressed)
    candidates = build_schedule_candidates(
        target_rate, horizon, compressed.allocation.budget, acct
    )
    best, table = search_schedule(compressed, candidates, calib_pairs, n_tokens=horizon)
    return best, table, acct


def ablation_grid(model: TinyLM, target_rate: float, calib_batches, calib_pairs,
                  horizon: int = 64, whitening: bool = True) -> dict:
    """The three-row ablation: whitening-only, +guided allocation, +progressive.

    Every row lands at the same overall compression rate. Row 1 is the
    uniform-rank static baseline, row 2 swaps in the gradient-guided
    allocation (still static), row 3 adds the decaying decode schedule.
    Scores are mean ROUGE-L F against the dense model's own outputs.
    """
    calib_seqs = calib_sequences_from_batches(calib_batches) if whitening else None
    cfg = model.config
    target = int(round((1.0 - target_rate) * dense_projection_params(cfg)))
    rows: dict[str, dict] = {}

    def mean_rouge(comp: CompressedLM, schedule: DecodeSchedule | None) -> float:
        scores = []
        for prompt, ref in calib_pairs:
            if schedule is None:
                gen = static_generate(comp, prompt, comp.allocation.budget, horizon).tokens
            else:
                gen = progressive_generate(comp, prompt, schedule, horizon).tokens
            scores.append(rouge_l(detokenize(gen), ref)["f"])
        return float(np.mean(scores))

    uni_alloc = uniform_rank_allocation(cfg, target)
    uni_imp = ImportanceMap(values=dict.fromkeys(uni_alloc.ranks, 1.0), metric="weight_only")
    uni = compress_model(model, uni_alloc, whitening=whitening,
                         calib_sequences=calib_seqs, importance=uni_imp)
    rows["whitening_only"] = {
        "rouge_l_f": mean_rouge(uni, None),
        "params": uni.projection_params_used(),
    }

    imp = compute_importance(model, "fisher")
    guided_alloc = allocation_for_rate(imp, cfg, target_rate)
    guided = compress_model(model, guided_alloc, whitening=whitening,
                            calib_sequences=calib_seqs, importance=imp)
    rows["plus_guided_allocation"] = {
        "rouge_l_f": mean_rouge(guided, None),
        "params": guided.projection_params_used(),
    }

    materialized = materialize_for_decoding(model, "fisher", whitening, calib_seqs)
    best, _, acct = schedule_search_pipeline(materialized, target_rate, horizon, calib_pairs)
    rows["plus_progressive_decode"] = {
        "rouge_l_f": mean_rouge(materialized, best),
        "schedule": best.to_json_dict(),
        "overall_rate": overall_compression_rate(best, 0, horizon, acct),
    }
    return rows


def ablation_table_text(rows: dict, target_rate: float) -> str:
    lines = [
        f"ablation at target compression rate {target_rate:.0%}",
        f"{'configuration':<28}{'ROUGE-L F':>12}",
        "-" * 40,
    ]
    for name in ("whitening_only", "plus_guided_allocation", "plus_progressive_decode"):
        lines.append(f"{name:<28}{rows[name]['rouge_l_f']:>12.2f}")
    return "\n".join(lines)
