"""Progressive low-rank decoding.

A decode schedule is a step function from generated-token index to a
total rank budget. Before each token's forward pass the per-projection
active ranks are set from the same proportional allocation rule used at
compression time, evaluated at that token's budget and capped at the
materialized factorization ranks. Budgets are non-increasing in the
default form, so later tokens run with fewer parameters; because factor
columns are ordered by singular value, shrinking the active rank is a
metadata change only.

The prompt is processed as a single prefill step at the budget of token
0, and compression-rate accounting treats it as one step alongside the
generated tokens.

Candidate evaluation during schedule search is deterministic; a
CompressedLM's active ranks are mutable state, so concurrent decodes
need separate instances.
"""

import io
from dataclasses import dataclass

import numpy as np

from .compression import (
    CompressedLM, FactorizedProjection, ImportanceMap, RankAllocation,
    allocate_ranks, dense_projection_params,
)
from .errors import ValidationError
from .model import KVCache, forward, greedy_generate

SCHEDULE_FORMS = ("decreased", "static", "increased")
RATE_TOLERANCE = 0.01  # candidate generator: +/- 1 percentage point


@dataclass(frozen=True)
class DecodeSchedule:
    """Step function token_index -> rank budget.

    steps are (from_token, budget) pairs, from_token strictly increasing
    and starting at 0. The "decreased" form (the default decoding mode)
    requires non-increasing budgets; "static" is a single step;
    "increased" is the inverted baseline used only by the decoding-forms
    experiment and is rejected by the JSON loader.
    """

    steps: tuple[tuple[int, int], ...]
    form: str = "decreased"

    def __post_init__(self):
        if self.form not in SCHEDULE_FORMS:
            raise ValidationError(f"unknown schedule form {self.form!r}")
        if not self.steps:
            raise ValidationError("schedule needs at least one step")
        if self.steps[0][0] != 0:
            raise ValidationError("first schedule step must start at token 0")
        tks = [t for t, _ in self.steps]
        if any(b <= a for a, b in zip(tks, tks[1:])):
            raise ValidationError("schedule step start tokens must be strictly increasing")
        budgets = [b for _, b in self.steps]
        if any(b < 1 for b in budgets):
            raise ValidationError("schedule budgets must be >= 1")
        if self.form == "static" and len(self.steps) != 1:
            raise ValidationError("static schedule must have exactly one step")
        if self.form == "decreased" and any(b > a for a, b in zip(budgets, budgets[1:])):
            raise ValidationError("decreased schedule budgets must be non-increasing")
        if self.form == "increased" and any(b < a for a, b in zip(budgets, budgets[1:])):
            raise ValidationError("increased schedule budgets must be non-decreasing")

    def budget_at(self, t: int) -> int:
        if t < 0:
            raise ValidationError("token index must be >= 0")
        out = self.steps[0][1]
        for start, budget in self.steps:
            if start <= t:
                out = budget
            else:
                break
        return out

    @property
    def max_budget(self) -> int:
        return max(b for _, b in self.steps)

    def to_json_dict(self) -> dict:
        return {
            "form": self.form,
            "steps": [{"from_token": t, "budget": b} for t, b in self.steps],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "DecodeSchedule":
        form = d.get("form", "decreased")
        if form == "increased":
            raise ValidationError(
                "increased-form schedules are an experiment-only construction "
                "and cannot be loaded from JSON"
            )
        steps = tuple((int(s["from_token"]), int(s["budget"])) for s in d["steps"])
        return cls(steps=steps, form=form)


def set_active_rank(proj: FactorizedProjection, k: int):
    """Use only the leading k factor columns/rows from now on (O(1))."""
    if not 1 <= k <= proj.full_rank:
        raise ValidationError(f"active rank {k} outside [1, {proj.full_rank}]")
    proj.active_rank = k


def token_rank_config(imp: ImportanceMap, budget_t: int, floor: int,
                      materialized: RankAllocation) -> RankAllocation:
    """Per-token rank configuration: the allocation rule at budget_t,
    additionally capped by the materialized factorization ranks."""
    return allocate_ranks(imp, budget_t, floor, caps=dict(materialized.ranks))


class RateAccounting:
    """Parameter accounting for schedules over one compressed model.

    Caches the rank configuration per distinct budget; params_at(budget)
    is the factorized parameter count sum(r * (m + n)) of that
    configuration, and dense_params is the dense projection total the
    compression rate is measured against.
    """

    def __init__(self, imp: ImportanceMap, floor: int, materialized: RankAllocation,
                 config):
        self.imp = imp
        self.floor = floor
        self.materialized = materialized
        self.config = config
        self.dense_params = dense_projection_params(config)
        self._configs: dict[int, RankAllocation] = {}

    @classmethod
    def for_model(cls, model: CompressedLM) -> "RateAccounting":
        if model.importance is None:
            raise ValidationError(
                "compressed model carries no importance map; progressive decoding "
                "needs the allocation-time importance"
            )
        return cls(model.importance, model.allocation.floor, model.allocation, model.config)

    def min_budget(self) -> int:
        return self.floor * len(self.materialized.ranks)

    def config_at(self, budget: int) -> RankAllocation:
        if budget not in self._configs:
            self._configs[budget] = token_rank_config(
                self.imp, budget, self.floor, self.materialized
            )
        return self._configs[budget]

    def params_at(self, budget: int) -> int:
        from .compression import factorized_params

        return factorized_params(self.config_at(budget).ranks, self.config)

    def budget_for_params(self, target_params: int) -> int:
        """Budget whose configuration lands nearest target_params."""
        lo, hi = self.min_budget(), self.materialized.budget
        if self.params_at(lo) >= target_params:
            return lo
        if self.params_at(hi) <= target_params:
            return hi
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if self.params_at(mid) <= target_params:
                lo = mid
            else:
                hi = mid
        below, above = self.params_at(lo), self.params_at(hi)
        return hi if abs(above - target_params) < abs(target_params - below) else lo

    def validate_schedule(self, schedule: DecodeSchedule):
        if schedule.max_budget > self.materialized.budget:
            raise ValidationError(
                f"schedule budget {schedule.max_budget} exceeds materialized budget "
                f"{self.materialized.budget}: active ranks cannot exceed factorized ranks"
            )
        if schedule.steps[-1][1] < self.min_budget():
            raise ValidationError(
                f"schedule budget {schedule.steps[-1][1]} below minimum feasible "
                f"budget {self.min_budget()}"
            )

    def step_params(self, schedule: DecodeSchedule, n_tokens: int) -> list[int]:
        """params_used per step: prefill (at the token-0 budget) + each token."""
        pre = self.params_at(schedule.budget_at(0))
        return [pre] + [self.params_at(schedule.budget_at(t)) for t in range(n_tokens)]


def overall_compression_rate(schedule: DecodeSchedule, prompt_len: int, n_tokens: int,
                             accounting: RateAccounting) -> float:
    """Average parameter reduction per step across prefill and decoding.

    rate = 1 - sum_t params_used(t) / ((1 + n_tokens) * dense_params);
    the prompt counts as a single prefill step at the token-0 budget,
    regardless of prompt_len.
    """
    if n_tokens < 1:
        raise ValidationError("n_tokens must be >= 1")
    if prompt_len < 0:
        raise ValidationError("prompt_len must be >= 0")
    used = sum(accounting.step_params(schedule, n_tokens))
    return 1.0 - used / ((1 + n_tokens) * accounting.dense_params)


@dataclass
class GenerationResult:
    tokens: np.ndarray
    trace: list[tuple[int, int, int]]  # (token_index, budget, params_used)
    prefill_budget: int
    prefill_params: int
    schedule: DecodeSchedule

    def trace_csv(self) -> str:
        buf = io.StringIO()
        buf.write("token_index,budget,params_used\n")
        for token_index, budget, params in self.trace:
            buf.write(f"{token_index},{budget},{params}\n")
        return buf.getvalue()


def progressive_generate(model: CompressedLM, prompt, schedule: DecodeSchedule,
                         n_tokens: int) -> GenerationResult:
    """Greedy decoding with per-token rank budgets from the schedule.

    Prefill runs at the token-0 budget; before each generated token t the
    active ranks are set per the token configuration at budget(t). Emits
    a per-token parameter-count trace.
    """
    if n_tokens < 1:
        raise ValidationError("n_tokens must be >= 1")
    acct = RateAccounting.for_model(model)
    acct.validate_schedule(schedule)

    cache = KVCache(model.config)
    model.set_ranks(acct.config_at(schedule.budget_at(0)).ranks)
    prefill_params = model.projection_params_used()
    logits = forward(model, prompt, cache=cache)

    tokens: list[int] = []
    trace: list[tuple[int, int, int]] = []
    prev_budget = None
    for t in range(n_tokens):
        budget = schedule.budget_at(t)
        if schedule.form == "decreased" and prev_budget is not None and budget > prev_budget:
            raise ValidationError("decreased schedule produced an increasing budget")
        prev_budget = budget
        model.set_ranks(acct.config_at(budget).ranks)
        used = model.projection_params_used()
        if t > 0:
            logits = forward(model, np.array([tokens[-1]]), cache=cache)
        nxt = int(np.argmax(logits[-1]))
        tokens.append(nxt)
        trace.append((t, budget, used))

    model.reset_active_ranks()
    return GenerationResult(
        tokens=np.array(tokens, dtype=np.int64), trace=trace,
        prefill_budget=schedule.budget_at(0), prefill_params=prefill_params,
        schedule=schedule,
    )


def static_generate(model: CompressedLM, prompt, budget: int, n_tokens: int) -> GenerationResult:
    """Fixed-budget decoding: one rank configuration for prefill and all tokens."""
    if n_tokens < 1:
        raise ValidationError("n_tokens must be >= 1")
    acct = RateAccounting.for_model(model)
    schedule = DecodeSchedule(steps=((0, budget),), form="static")
    acct.validate_schedule(schedule)
    model.set_ranks(acct.config_at(budget).ranks)
    used = model.projection_params_used()
    tokens = greedy_generate(model, prompt, n_tokens)
    model.reset_active_ranks()
    return GenerationResult(
        tokens=tokens, trace=[(t, budget, used) for t in range(n_tokens)],
        prefill_budget=budget, prefill_params=used, schedule=schedule,
    )


# ---------------------------------------------------------------------------
# schedule candidates and calibration search
# ---------------------------------------------------------------------------

def _switch_grid(horizon: int) -> list[int]:
    # Geometric grid of switch tokens, ratio ~sqrt(2).
    pts = []
    x = 1.0
    while x < horizon:
        pts.append(int(round(x)))
        x *= np.sqrt(2.0)
    return sorted({p for p in pts if 1 <= p < horizon})


def _budget_levels(materialized_budget: int, min_budget: int) -> list[int]:
    fracs = np.arange(1.0, 0.05, -0.1)
    levels = sorted(
        {max(min_budget, int(round(f * materialized_budget))) for f in fracs}, reverse=True
    )
    return [b for b in levels if b <= materialized_budget]


def build_schedule_candidates(target_rate: float, horizon: int, materialized_budget: int,
                              accounting: RateAccounting,
                              max_candidates: int = 24) -> list[DecodeSchedule]:
    """Non-increasing step schedules near a target overall compression rate.

    Candidates start at the materialized budget, place 1-4 switch points
    on a geometric grid of the horizon with budgets on a 10% grid, and
    are kept when their overall rate is within +/-1 point of the target.
    The returned set spans early-drop to late-drop switch points.
    """
    if not 0.0 <= target_rate < 1.0:
        raise ValidationError(f"target_rate {target_rate} outside [0, 1)")
    if horizon < 1:
        raise ValidationError("generation horizon must be >= 1")
    if materialized_budget > accounting.materialized.budget:
        raise ValidationError("materialized_budget exceeds the model's factorized budget")

    def rate_of(sched: DecodeSchedule) -> float:
        return overall_compression_rate(sched, 0, horizon, accounting)

    min_budget = accounting.min_budget()
    static = DecodeSchedule(steps=((0, materialized_budget),), form="static")
    static_rate = rate_of(static)
    if target_rate < static_rate - RATE_TOLERANCE:
        raise ValidationError(
            f"target rate {target_rate:.3f} below the static rate "
            f"{static_rate:.3f} of the materialized budget"
        )
    floor_sched = DecodeSchedule(steps=((0, materialized_budget), (1, min_budget)))
    if horizon > 1 and target_rate > rate_of(floor_sched) + RATE_TOLERANCE:
        raise ValidationError(
            f"target rate {target_rate:.3f} infeasible: even an immediate drop to the "
            f"floor budget only reaches {rate_of(floor_sched):.3f}"
        )

    switches = _switch_grid(horizon)
    levels = [b for b in _budget_levels(materialized_budget, min_budget)
              if b < materialized_budget]

    found: dict[tuple, DecodeSchedule] = {}

    def consider(steps: tuple[tuple[int, int], ...]):
        sched = DecodeSchedule(steps=steps)
        if abs(rate_of(sched) - target_rate) <= RATE_TOLERANCE and steps not in found:
            found[steps] = sched

    if abs(static_rate - target_rate) <= RATE_TOLERANCE:
        found[static.steps] = static
    for s in switches:
        for b in levels:
            consider(((0, materialized_budget), (s, b)))
    for i, s1 in enumerate(switches):
        for s2 in switches[i + 1:]:
            for j, b1 in enumerate(levels):
                for b2 in levels[j + 1:]:
                    consider(((0, materialized_budget), (s1, b1), (s2, b2)))
    # A few deeper staircases (3-4 switch points) from consecutive grid runs.
    for i in range(len(switches) - 2):
        for j in range(len(levels) - 2):
            consider((
                (0, materialized_budget),
                (switches[i], levels[j]),
                (switches[i + 1], levels[j + 1]),
                (switches[i + 2], levels[j + 2]),
            ))
            if i + 3 < len(switches) and j + 3 < len(levels):
                consider((
                    (0, materialized_budget),
                    (switches[i], levels[j]),
                    (switches[i + 1], levels[j + 1]),
                    (switches[i + 2], levels[j + 2]),
                    (switches[i + 3], levels[j + 3]),
                ))

    if not found:
        raise ValidationError(
            f"no schedule candidate within {RATE_TOLERANCE:.0%} of target rate {target_rate}"
        )

    # Span switch points: round-robin across first-switch groups.
    candidates = sorted(found.values(), key=lambda s: (s.steps[1][0] if len(s.steps) > 1 else 0,
                                                       s.steps))
    groups: dict[int, list[DecodeSchedule]] = {}
    for c in candidates:
        groups.setdefault(c.steps[1][0] if len(c.steps) > 1 else 0, []).append(c)
    picked: list[DecodeSchedule] = []
    while len(picked) < min(max_candidates, len(candidates)):
        progressed = False
        for key in sorted(groups):
            if groups[key]:
                picked.append(groups[key].pop(0))
                progressed = True
                if len(picked) >= max_candidates:
                    break
        if not progressed:
            break
    return picked


@dataclass
class ScheduleScore:
    schedule: DecodeSchedule
    mean_score: float
    per_prompt: list[float]


def search_schedule(model: CompressedLM, candidates, calib_pairs,
                    scorer=None, n_tokens: int = 64):
    """Pick the candidate with the best mean calibration score.

    calib_pairs is a sequence of (prompt_tokens, reference) where the
    reference is what the scorer compares a generation against (by
    default ROUGE-L F against text decoded from the reference tokens).
    Deterministic: candidate order breaks ties. Returns (best, table).
    """
    from .evaluate import rouge_l
    from .model import detokenize

    candidates = list(candidates)
    calib_pairs = list(calib_pairs)
    if not candidates:
        raise ValidationError("search_schedule: no candidates")
    if not calib_pairs:
        raise ValidationError("search_schedule: no calibration prompts")

    if scorer is None:
        def scorer(generated, reference):
            ref_text = reference if isinstance(reference, str) else detokenize(reference)
            if not ref_text.split():
                return 0.0
            return rouge_l(detokenize(generated), ref_text)["f"]

    table: list[ScheduleScore] = []
    for cand in candidates:
        scores = [
            scorer(progressive_generate(model, prompt, cand, n_tokens).tokens, ref)
            for prompt, ref in calib_pairs
        ]
        table.append(ScheduleScore(cand, float(np.mean(scores)), scores))

    best = max(table, key=lambda row: row.mean_score)
    # max() keeps the first of equal scores: candidate order is the tie-break.
    return best.schedule, table


# ---------------------------------------------------------------------------
# decoding-forms comparison (static / increased / decreased)
# ---------------------------------------------------------------------------

@dataclass
class DecodingFormsReport:
    scores: dict[str, float]
    schedules: dict[str, DecodeSchedule]
    avg_params: dict[str, float]
    per_prompt: dict[str, list[float]]
    matched_within: float

    def to_json_dict(self) -> dict:
        return {
            "scores": self.scores,
            "avg_params": self.avg_params,
            "matched_within": self.matched_within,
            "schedules": {k: v.to_json_dict() for k, v in self.schedules.items()},
        }


def build_matched_forms(accounting: RateAccounting, target_rate: float, n_tokens: int,
                        switch_frac: float = 0.125,
                        tolerance: float = 0.005) -> dict[str, DecodeSchedule]:
    """Three schedules with identical average per-token parameter usage.

    decreased: full materialized budget until a switch token s, then a
    lower level chosen so the average hits the target; increased is the
    exact mirror (switch at n_tokens-1-s), which matches the average
    identically; static picks the single budget nearest the average.
    Horizons too short for a switch collapse all forms to the static one.
    """
    dense = accounting.dense_params
    target_avg = (1.0 - target_rate) * dense
    top = accounting.materialized.budget
    p_top = accounting.params_at(top)
    h = n_tokens

    if h < 4 or p_top <= target_avg:
        budget = accounting.budget_for_params(int(round(target_avg)))
        sched = DecodeSchedule(steps=((0, budget),), form="static")
        return {"static": sched,
                "increased": DecodeSchedule(steps=((0, budget),), form="increased"),
                "decreased": DecodeSchedule(steps=((0, budget),), form="decreased")}

    total_target = (h + 1) * target_avg
    schedule = None
    for s in [max(1, int(round(switch_frac * h)))] + list(range(1, h - 1)):
        if s > h - 2:
            continue
        x_target = (total_target - (s + 1) * p_top) / (h - s)
        if x_target < accounting.params_at(accounting.min_budget()):
            continue
        low = accounting.budget_for_params(int(round(x_target)))
        if low >= top:
            continue
        schedule = (s, low)
        break
    if schedule is None:
        raise ValidationError(
            f"cannot build matched decoding forms for target rate {target_rate}"
        )
    s, low = schedule
    decreased = DecodeSchedule(steps=((0, top), (s, low)), form="decreased")
    increased = DecodeSchedule(steps=((0, low), (h - 1 - s, top)), form="increased")

    def avg(sched: DecodeSchedule) -> float:
        return float(np.mean(accounting.step_params(sched, h)))

    static_budget = accounting.budget_for_params(int(round(avg(decreased))))
    static = DecodeSchedule(steps=((0, static_budget),), form="static")

    avgs = {"decreased": avg(decreased), "increased": avg(increased), "static": avg(static)}
    spread = (max(avgs.values()) - min(avgs.values())) / max(avgs.values())
    if spread > tolerance:
        raise ValidationError(
            f"matched-average construction failed: averages differ by {spread:.2%} "
            f"(> {tolerance:.2%})"
        )
    return {"static": static, "increased": increased, "decreased": decreased}


def compare_decoding_forms(model: CompressedLM, target_rate: float, calib_pairs,
                           n_tokens: int = 64, scorer=None,
                           tolerance: float = 0.005) -> DecodingFormsReport:
    """Score static / increased / decreased decoding at matched average
    per-token parameter usage (within `tolerance`)."""
    from .evaluate import rouge_l
    from .model import detokenize

    acct = RateAccounting.for_model(model)
    forms = build_matched_forms(acct, target_rate, n_tokens, tolerance=tolerance)

    if scorer is None:
        def scorer(generated, reference):
            ref_text = reference if isinstance(reference, str) else detokenize(reference)
            if not ref_text.split():
                return 0.0
            return rouge_l(detokenize(generated), ref_text)["f"]

    scores: dict[str, float] = {}
    per_prompt: dict[str, list[float]] = {}
    avg_params: dict[str, float] = {}
    for name, sched in forms.items():
        vals = [
            scorer(progressive_generate(model, prompt, sched, n_tokens).tokens, ref)
            for prompt, ref in calib_pairs
        ]
        per_prompt[name] = vals
        scores[name] = float(np.mean(vals))
        avg_params[name] = float(np.mean(acct.step_params(sched, n_tokens)))

    spread = (max(avg_params.values()) - min(avg_params.values())) / max(avg_params.values())
    return DecodingFormsReport(
        scores=scores, schedules=forms, avg_params=avg_params,
        per_prompt=per_prompt, matched_within=spread,
    )
