"""Importance scoring, rank allocation, whitening, and SVD factorization.

The allocation pipeline: a calibration backward pass fills gradient
buffers, each projection gets an importance score, and an integer rank
budget is split across projections proportionally to importance, with
rounding corrected so the budget is met exactly. Each projection is then
factorized at its allocated rank; the factors are ordered by singular
value so a prefix of k columns/rows is itself the best rank-k
approximation, which is what lets decoding shrink ranks on the fly.

Importance metrics:
    fisher      sum_i (G[i] * W[i])^2   (gradient x weight, squared)
    weight_only sum_i W[i]^2
    grad_only   sum_i G[i]^2

Importance is deliberately not normalized by parameter count, so larger
matrices can dominate; the per-projection report makes this visible.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import NumericalError, ValidationError
from .model import (
    ModelConfig, ProjectionId, TinyLM, all_projection_ids, forward, projection_shape,
)

IMPORTANCE_METRICS = ("fisher", "weight_only", "grad_only")


# ---------------------------------------------------------------------------
# importance
# ---------------------------------------------------------------------------

@dataclass
class ImportanceMap:
    """Per-projection importance alpha >= 0 plus the total S = sum(alpha)."""

    values: dict[ProjectionId, float]
    metric: str
    total: float = field(init=False)

    def __post_init__(self):
        for pid, a in self.values.items():
            if a < 0 or not np.isfinite(a):
                raise ValidationError(f"importance for {pid} must be finite and >= 0, got {a}")
        self.total = float(sum(self.values[p] for p in self.ordered_pids()))

    def ordered_pids(self) -> list[ProjectionId]:
        return sorted(self.values, key=lambda p: p.sort_key)

    def to_json_dict(self) -> dict:
        return {
            "metric": self.metric,
            "total": self.total,
            "entries": [
                {"layer": p.layer, "proj": p.kind, "alpha": self.values[p]}
                for p in self.ordered_pids()
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ImportanceMap":
        values = {
            ProjectionId(e["layer"], e["proj"]): float(e["alpha"]) for e in d["entries"]
        }
        return cls(values=values, metric=d.get("metric", "fisher"))


def compute_importance(model: TinyLM, metric: str) -> ImportanceMap:
    """One importance value per projection; needs grads except for weight_only."""
    if metric not in IMPORTANCE_METRICS:
        raise ValidationError(f"unknown importance metric {metric!r}")
    values: dict[ProjectionId, float] = {}
    for pid in all_projection_ids(model.config):
        w = model.projection(pid)
        if metric == "weight_only":
            values[pid] = float(np.sum(w * w))
            continue
        g = model.projection_grad(pid)
        if g is None:
            raise ValidationError(
                f"metric {metric!r} needs gradients but none are present for {pid}; "
                "run a calibration backward pass first"
            )
        if metric == "fisher":
            gw = g * w
            values[pid] = float(np.sum(gw * gw))
        else:
            values[pid] = float(np.sum(g * g))
    return ImportanceMap(values=values, metric=metric)


# ---------------------------------------------------------------------------
# rank allocation
# ---------------------------------------------------------------------------

@dataclass
class RankAllocation:
    """Integer rank per projection; sums exactly to `budget`."""

    ranks: dict[ProjectionId, int]
    budget: int
    floor: int
    caps: dict[ProjectionId, int]

    def ordered_pids(self) -> list[ProjectionId]:
        return sorted(self.ranks, key=lambda p: p.sort_key)

    def to_json_dict(self) -> dict:
        return {
            "budget": self.budget,
            "floor": self.floor,
            "ranks": [
                {"layer": p.layer, "proj": p.kind, "rank": self.ranks[p]}
                for p in self.ordered_pids()
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict, caps: dict[ProjectionId, int]) -> "RankAllocation":
        ranks = {ProjectionId(e["layer"], e["proj"]): int(e["rank"]) for e in d["ranks"]}
        return cls(ranks=ranks, budget=int(d["budget"]), floor=int(d["floor"]), caps=caps)


def default_caps(config: ModelConfig) -> dict[ProjectionId, int]:
    return {
        pid: min(projection_shape(config, pid.kind))
        for pid in all_projection_ids(config)
    }


def allocate_ranks(imp: ImportanceMap, budget: int, floor: int = 1,
                   caps: dict[ProjectionId, int] | None = None) -> RankAllocation:
    """Proportional integer rank split: r_p = round(alpha_p / S * budget).

    Rounding is half-away-from-zero; results are clamped to [floor, cap]
    and then corrected one rank at a time until the budget is met
    exactly. The correction targets the entry whose current rank deviates
    most from its ideal share (largest raw-minus-assigned remainder when
    adding, smallest when removing); ties go to the earlier projection
    when adding and the later one when removing.
    """
    pids = imp.ordered_pids()
    n = len(pids)
    if n == 0:
        raise ValidationError("allocate_ranks: empty importance map")
    if floor < 1:
        raise ValidationError("allocate_ranks: floor must be >= 1 (rank 0 disallowed)")
    caps = dict(caps) if caps is not None else {}
    for pid in pids:
        caps.setdefault(pid, budget)
        if caps[pid] < floor:
            raise ValidationError(f"allocate_ranks: cap {caps[pid]} below floor for {pid}")
    if budget < floor * n:
        raise ValidationError(
            f"allocate_ranks: budget {budget} infeasible, below floors ({floor} x {n} projections)"
        )
    cap_total = sum(caps[p] for p in pids)
    if budget > cap_total:
        raise ValidationError(
            f"allocate_ranks: budget {budget} infeasible, above total cap {cap_total}"
        )

    if imp.total > 0.0:
        raw = np.array([imp.values[p] / imp.total * budget for p in pids])
    else:
        # All-zero importance: fall back to an even split.
        raw = np.full(n, budget / n)
    assigned = np.floor(raw + 0.5).astype(np.int64)
    lo = np.full(n, floor, dtype=np.int64)
    hi = np.array([caps[p] for p in pids], dtype=np.int64)
    assigned = np.clip(assigned, lo, hi)

    resid = budget - int(assigned.sum())
    while resid != 0:
        remainder = raw - assigned
        if resid > 0:
            best, best_rem = -1, -np.inf
            for i in range(n):
                if assigned[i] < hi[i] and remainder[i] > best_rem:
                    best, best_rem = i, remainder[i]
            assigned[best] += 1
            resid -= 1
        else:
            best, best_rem = -1, np.inf
            for i in range(n):
                if assigned[i] > lo[i] and remainder[i] <= best_rem:
                    best, best_rem = i, remainder[i]
            assigned[best] -= 1
            resid += 1

    ranks = {pid: int(assigned[i]) for i, pid in enumerate(pids)}
    return RankAllocation(ranks=ranks, budget=budget, floor=floor, caps=caps)


def dense_projection_params(config: ModelConfig) -> int:
    """Parameter count of the seven projection kinds in the dense model."""
    return sum(
        int(np.prod(projection_shape(config, pid.kind)))
        for pid in all_projection_ids(config)
    )


def factorized_params(ranks: dict[ProjectionId, int], config: ModelConfig) -> int:
    """Parameters used by a rank-r factorization: r * (rows + cols) per projection."""
    total = 0
    for pid, r in ranks.items():
        m, n = projection_shape(config, pid.kind)
        total += r * (m + n)
    return total


def breakeven_report(alloc: RankAllocation, config: ModelConfig) -> list[ProjectionId]:
    """Projections allocated above the parameter-saving breakeven m*n/(m+n)."""
    over = []
    for pid, r in alloc.ranks.items():
        m, n = projection_shape(config, pid.kind)
        if r * (m + n) > m * n:
            over.append(pid)
    return sorted(over, key=lambda p: p.sort_key)


def budget_for_params(imp: ImportanceMap, target_params: int, config: ModelConfig,
                      floor: int = 1) -> int:
    """Smallest-error budget whose allocation uses ~target_params parameters.

    Allocated parameter count is strictly increasing in the budget, so a
    binary search finds the largest budget at or under the target; the
    neighbour above is taken instead when it lands closer.
    """
    caps = default_caps(config)
    pids = imp.ordered_pids()
    lo, hi = floor * len(pids), sum(caps[p] for p in pids)

    def params_at(budget: int) -> int:
        return factorized_params(allocate_ranks(imp, budget, floor, caps).ranks, config)

    if params_at(lo) >= target_params:
        return lo
    if params_at(hi) <= target_params:
        return hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if params_at(mid) <= target_params:
            lo = mid
        else:
            hi = mid
    below, above = params_at(lo), params_at(hi)
    return hi if abs(above - target_params) < abs(target_params - below) else lo


def uniform_rank_allocation(config: ModelConfig, target_params: int,
                            floor: int = 1) -> RankAllocation:
    """Every projection at the same rank, chosen to land near target_params."""
    caps = default_caps(config)
    pids = all_projection_ids(config)
    per_rank = sum(sum(projection_shape(config, p.kind)) for p in pids)
    r = int(np.clip(np.floor(target_params / per_rank + 0.5), floor, min(caps.values())))
    best_r = min(
        (rr for rr in {max(floor, r - 1), r, min(min(caps.values()), r + 1)}),
        key=lambda rr: (abs(rr * per_rank - target_params), rr),
    )
    ranks = {pid: best_r for pid in pids}
    return RankAllocation(ranks=ranks, budget=best_r * len(pids), floor=floor, caps=caps)


# ---------------------------------------------------------------------------
# activation-aware whitening
# ---------------------------------------------------------------------------

@dataclass
class Whitener:
    """Cholesky-of-Gram scaling: s @ s.T = X'X/N + damping*I, s_inv = s^-1."""

    s: np.ndarray
    s_inv: np.ndarray
    damping: float


def whiten_from_gram(gram: np.ndarray, count: int, damping_scale: float = 1e-4) -> Whitener:
    if count < 1:
        raise ValidationError("whitening needs at least one activation sample")
    g = gram / count
    d = g.shape[0]
    damping = damping_scale * float(np.trace(g)) / d
    try:
        s = linalg.cholesky(g + damping * np.eye(d), label="activation gram")
    except NumericalError as exc:
        raise NumericalError(
            f"activation Gram matrix not positive definite even with damping "
            f"{damping:.3e}; try a larger damping_scale ({exc})"
        ) from exc
    s_inv = linalg.lower_triangular_inverse(s)
    return Whitener(s=s, s_inv=s_inv, damping=damping)


def whiten(w, activations, damping_scale: float = 1e-4):
    """Scale w by the Cholesky factor of the activation Gram matrix.

    Returns (w_scaled, whitener); the compressed path is
    truncate(svd(w_scaled)) followed by a right-multiply with s_inv.
    """
    w = linalg.as_matrix(w, "weight")
    x = linalg.as_matrix(activations, "activations")
    if x.shape[1] != w.shape[1]:
        raise ValidationError(
            f"activation feature dim {x.shape[1]} does not match weight input dim {w.shape[1]}"
        )
    whitener = whiten_from_gram(x.T @ x, x.shape[0], damping_scale)
    return w @ whitener.s, whitener


class GramCollector:
    """Accumulates per-projection input Gram matrices during forward passes.

    q/k/v share one input, as do gate/up, so only one Gram is kept per
    input site and aliased for the siblings.
    """

    _ALIAS = {"k_proj": "q_proj", "v_proj": "q_proj", "up_proj": "gate_proj"}

    def __init__(self):
        self.grams: dict[tuple[int, str], np.ndarray] = {}
        self.counts: dict[tuple[int, str], int] = {}

    def add(self, layer: int, kind: str, x: np.ndarray):
        key = (layer, kind)
        if key not in self.grams:
            self.grams[key] = np.zeros((x.shape[-1], x.shape[-1]))
            self.counts[key] = 0
        flat = x.reshape(-1, x.shape[-1])
        self.grams[key] += flat.T @ flat
        self.counts[key] += flat.shape[0]

    def whitener_for(self, pid: ProjectionId, damping_scale: float = 1e-4) -> Whitener:
        key = (pid.layer, self._ALIAS.get(pid.kind, pid.kind))
        if key not in self.grams:
            raise ValidationError(f"no activations collected for {pid}")
        return whiten_from_gram(self.grams[key], self.counts[key], damping_scale)


def collect_grams(model, sequences) -> GramCollector:
    """Run calibration sequences through the model, collecting projection inputs."""
    collector = GramCollector()
    for seq in sequences:
        forward(model, seq, capture=collector)
    return collector


# ---------------------------------------------------------------------------
# factorization
# ---------------------------------------------------------------------------

@dataclass
class FactorizedProjection:
    """w ~ a @ b with columns of a / rows of b ordered by singular value.

    a = U_r diag(sigma_r) (m x r), b = V_r^T (r x n, with the unwhitening
    factor folded in when whitening was used). Only the first
    `active_rank` columns/rows participate in a forward pass; changing
    the active rank is a metadata update, no data moves.
    """

    a: np.ndarray
    b: np.ndarray
    full_rank: int
    active_rank: int
    singular_values: np.ndarray

    @property
    def out_features(self) -> int:
        return self.a.shape[0]

    @property
    def in_features(self) -> int:
        return self.b.shape[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        k = self.active_rank
        return (x @ self.b[:k].T) @ self.a[:, :k].T

    def reconstruct(self, k: int | None = None) -> np.ndarray:
        k = self.full_rank if k is None else k
        return self.a[:, :k] @ self.b[:k]

    def params_used(self, k: int | None = None) -> int:
        k = self.active_rank if k is None else k
        return k * (self.out_features + self.in_features)


def factorize(w, r: int, whitener: Whitener | None = None,
              label: str = "projection") -> FactorizedProjection:
    """Best rank-r factorization (of the whitened matrix when a whitener is given)."""
    w = linalg.as_matrix(w, label)
    m, n = w.shape
    if not 1 <= r <= min(m, n):
        raise ValidationError(f"factorize({label}): rank {r} outside [1, {min(m, n)}]")
    target = w @ whitener.s if whitener is not None else w
    res = linalg.svd(target, label=label)
    u_r, s_r, vt_r = res.truncated(r)
    a = u_r * s_r[None, :]
    b = vt_r @ whitener.s_inv if whitener is not None else vt_r
    return FactorizedProjection(
        a=a, b=np.ascontiguousarray(b), full_rank=r, active_rank=r,
        singular_values=s_r.copy(),
    )


# ---------------------------------------------------------------------------
# compressed model
# ---------------------------------------------------------------------------

@dataclass
class CompressedLM:
    """Model whose seven projection kinds are low-rank factor pairs.

    Runs through the same forward engine as the dense model. active_rank
    is per-instance mutable state: do not share one instance across
    concurrent decodes.
    """

    config: ModelConfig
    projections: dict[ProjectionId, FactorizedProjection]
    dense: dict[str, np.ndarray]
    allocation: RankAllocation
    importance: ImportanceMap | None = None
    whitened: bool = False

    def apply_projection(self, layer: int, kind: str, x: np.ndarray) -> np.ndarray:
        return self.projections[ProjectionId(layer, kind)].apply(x)

    def dense_tensors(self) -> dict[str, np.ndarray]:
        return self.dense

    def reset_active_ranks(self):
        for proj in self.projections.values():
            proj.active_rank = proj.full_rank

    def set_ranks(self, ranks: dict[ProjectionId, int]):
        for pid, r in ranks.items():
            proj = self.projections[pid]
            if not 1 <= r <= proj.full_rank:
                raise ValidationError(
                    f"rank {r} for {pid} outside [1, {proj.full_rank}] "
                    "(cannot exceed factorized rank)"
                )
            proj.active_rank = r

    def projection_params_used(self) -> int:
        return sum(p.params_used() for p in self.projections.values())


def compress_model(model: TinyLM, alloc: RankAllocation, whitening: bool = False,
                   calib_sequences=None, importance: ImportanceMap | None = None,
                   damping_scale: float = 1e-4, n_threads: int = 1) -> CompressedLM:
    """Factorize every projection at its allocated rank (active = full).

    With whitening on, calibration sequences are run through the dense
    model first to collect per-projection input Gram matrices.
    Factorizations of distinct projections are independent; with
    n_threads > 1 they run concurrently (results are assembled in
    canonical projection order either way, so output is identical).
    """
    cfg = model.config
    pids = all_projection_ids(cfg)
    missing = [p for p in pids if p not in alloc.ranks]
    if missing:
        raise ValidationError(f"allocation missing projections: {', '.join(map(str, missing))}")
    extra = [p for p in alloc.ranks if p not in set(pids)]
    if extra:
        raise ValidationError(f"allocation has unknown projections: {', '.join(map(str, extra))}")

    collector = None
    if whitening:
        if calib_sequences is None:
            raise ValidationError("whitening requires calibration sequences")
        collector = collect_grams(model, calib_sequences)

    def build(pid: ProjectionId) -> FactorizedProjection:
        whitener = collector.whitener_for(pid, damping_scale) if collector else None
        return factorize(model.projection(pid), alloc.ranks[pid], whitener, label=str(pid))

    projections: dict[ProjectionId, FactorizedProjection] = {}
    if n_threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            futures = {pid: pool.submit(build, pid) for pid in pids}
            for pid in pids:
                projections[pid] = futures[pid].result()
    else:
        for pid in pids:
            projections[pid] = build(pid)

    proj_names = {pid.param_name for pid in pids}
    dense = {name: arr for name, arr in model.params.items() if name not in proj_names}
    return CompressedLM(
        config=cfg, projections=projections, dense=dense,
        allocation=alloc, importance=importance, whitened=whitening,
    )


# ---------------------------------------------------------------------------
# perplexity-grid baseline allocator (slow path for the timing comparison)
# ---------------------------------------------------------------------------

def cheapest_rank_within_threshold(increases: dict[int, float], cap: int,
                                   threshold: float) -> int:
    """Smallest grid rank whose perplexity increase stays within threshold."""
    for rank in sorted(increases):
        if increases[rank] <= threshold:
            return rank
    return cap


@dataclass
class BaselineAllocationResult:
    allocation: RankAllocation
    seconds: float
    dense_ppl: float
    sensitivity: dict[ProjectionId, dict[int, float]]


def baseline_allocate_perplexity(model: TinyLM, calib_windows, target_rate: float,
                                 grid=(0.25, 0.5, 0.75, 1.0),
                                 floor: int = 1) -> BaselineAllocationResult:
    """Rank allocation by measuring perplexity at a grid of per-projection ranks.

    For every projection and grid rank, that projection alone is replaced
    by its truncated SVD and calibration perplexity is measured (the SVD
    per projection is computed once and truncated per rank). Ranks are
    then assigned greedily: starting from full rank, the downgrade with
    the least perplexity increase per rank saved is applied until the
    total rank budget reaches (1 - target_rate) of the full-rank total.
    Wall-clock time is measured and reported.
    """
    from .evaluate import perplexity_windows  # local import, avoids cycle

    t0 = time.perf_counter()
    cfg = model.config
    caps = default_caps(cfg)
    pids = all_projection_ids(cfg)
    dense_ppl = perplexity_windows(model, calib_windows)

    sensitivity: dict[ProjectionId, dict[int, float]] = {}
    grid_ranks: dict[ProjectionId, list[int]] = {}
    for pid in pids:
        cap = caps[pid]
        svd_res = linalg.svd(model.projection(pid), label=str(pid))
        ranks = sorted({max(floor, int(np.floor(f * cap + 0.5))) for f in grid})
        grid_ranks[pid] = ranks
        increases: dict[int, float] = {}
        original = model.params[pid.param_name]
        try:
            for r in ranks:
                if r >= cap:
                    increases[r] = 0.0
                    continue
                u_r, s_r, vt_r = svd_res.truncated(r)
                model.params[pid.param_name] = (u_r * s_r[None, :]) @ vt_r
                increases[r] = perplexity_windows(model, calib_windows) - dense_ppl
        finally:
            model.params[pid.param_name] = original
        sensitivity[pid] = increases

    full_total = sum(caps[p] for p in pids)
    target_total = int(np.floor((1.0 - target_rate) * full_total + 0.5))
    chosen = {pid: caps[pid] for pid in pids}
    # Greedy: repeatedly apply the grid downgrade with the least
    # ppl increase per rank saved until the rank budget target is met.
    while sum(chosen.values()) > max(target_total, floor * len(pids)):
        best = None
        for pid in pids:
            lower = [r for r in grid_ranks[pid] if r < chosen[pid]]
            if not lower:
                continue
            nxt = max(lower)
            saved = chosen[pid] - nxt
            cost = (sensitivity[pid][nxt] - sensitivity[pid].get(chosen[pid], 0.0)) / saved
            if best is None or cost < best[0]:
                best = (cost, pid, nxt)
        if best is None:
            break
        chosen[best[1]] = best[2]

    alloc = RankAllocation(
        ranks=chosen, budget=sum(chosen.values()), floor=floor, caps=caps,
    )
    return BaselineAllocationResult(
        allocation=alloc, seconds=time.perf_counter() - t0,
        dense_ppl=dense_ppl, sensitivity=sensitivity,
    )


# ---------------------------------------------------------------------------
# compressed model I/O
# ---------------------------------------------------------------------------

def save_compressed(model: CompressedLM, path: str, extra_meta: dict | None = None):
    from .checkpoint import atomic_write_bytes, pack_container

    meta = {
        "kind": "compressed-lm",
        "config": model.config.to_dict(),
        "allocation": model.allocation.to_json_dict(),
        "importance": model.importance.to_json_dict() if model.importance else None,
        "whitened": model.whitened,
    }
    if extra_meta:
        meta.update(extra_meta)
    tensors: dict[str, np.ndarray] = dict(model.dense)
    for pid, proj in model.projections.items():
        tensors[f"{pid.param_name}.a"] = proj.a
        tensors[f"{pid.param_name}.b"] = proj.b
        tensors[f"{pid.param_name}.sv"] = proj.singular_values
    atomic_write_bytes(path, pack_container(meta, tensors))


def load_compressed(path: str) -> tuple[CompressedLM, dict]:
    from .checkpoint import unpack_container
    from .model import param_names

    with open(path, "rb") as fh:
        blob = fh.read()
    meta, tensors = unpack_container(blob, source=path)
    if meta.get("kind") != "compressed-lm":
        raise ValidationError(f"{path}: not a compressed model (kind={meta.get('kind')!r})")
    cfg = ModelConfig.from_dict(meta["config"])
    caps = default_caps(cfg)
    alloc = RankAllocation.from_json_dict(meta["allocation"], caps)
    imp = ImportanceMap.from_json_dict(meta["importance"]) if meta.get("importance") else None

    projections: dict[ProjectionId, FactorizedProjection] = {}
    for pid in all_projection_ids(cfg):
        try:
            a = tensors[f"{pid.param_name}.a"]
            b = tensors[f"{pid.param_name}.b"]
            sv = tensors[f"{pid.param_name}.sv"]
        except KeyError as exc:
            raise ValidationError(f"{path}: missing factor tensor for {pid}") from exc
        r = alloc.ranks[pid]
        if a.shape[1] != r or b.shape[0] != r:
            raise ValidationError(f"{path}: factor rank mismatch for {pid}")
        projections[pid] = FactorizedProjection(
            a=np.asarray(a, dtype=np.float64), b=np.asarray(b, dtype=np.float64),
            full_rank=r, active_rank=r, singular_values=np.asarray(sv, dtype=np.float64),
        )
    proj_tensor_names = {
        f"{pid.param_name}{suffix}" for pid in projections for suffix in (".a", ".b", ".sv")
    }
    dense = {
        name: np.asarray(arr, dtype=np.float64)
        for name, arr in tensors.items() if name not in proj_tensor_names
    }
    expected_dense = {
        n for n in param_names(cfg) if n not in {p.param_name for p in projections}
    }
    if set(dense) != expected_dense:
        raise ValidationError(f"{path}: dense tensor set mismatch")
    return (
        CompressedLM(config=cfg, projections=projections, dense=dense,
                     allocation=alloc, importance=imp, whitened=bool(meta.get("whitened"))),
        meta,
    )
