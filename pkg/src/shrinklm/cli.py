"""Command-line pipeline driver.

One subcommand per pipeline stage, all reading a shared JSON run config
(flags > config file > defaults). Every artifact is written atomically
and embeds the hash of the config that produced it, so re-running a
stage with identical config and seeds reproduces it bit for bit.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, fields

THREAD_ENV = "SHRINKLM_NUM_THREADS"


def _apply_thread_override():
    # Must happen before numpy is imported anywhere in the process.
    n = os.environ.get(THREAD_ENV)
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


@dataclass
class RunConfig:
    corpus_train: str = "builtin:train"
    corpus_calib: str = "builtin:calib"
    corpus_eval: str = "builtin:eval"
    out_dir: str = "runs/default"
    seed: int = 0
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 192
    max_seq_len: int = 512
    steps: int = 2000
    batch_size: int = 8
    train_seq_len: int = 128
    learning_rate: float = 1.5e-3
    calib_sequences: int = 32
    calib_length: int = 128
    calib_seed: int = 7
    metric: str = "fisher"
    target_rate: float = 0.2
    floor: int = 1
    whitening: bool = True
    schedule_form: str = "decreased"
    horizon: int = 64
    prompt_len: int = 32
    n_prompts: int = 16
    prompt_seed: int = 11
    eval_seq_len: int = 128
    eval_max_windows: int = 96
    temperature: float = 0.0
    prompt_text: str = ""

    def config_hash(self) -> str:
        canon = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_run_config(args) -> "RunConfig":
    cfg = RunConfig()
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        known = {f.name for f in fields(RunConfig)}
        unknown = set(file_cfg) - known
        if unknown:
            from .errors import ValidationError

            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg = RunConfig(**{**asdict(cfg), **file_cfg})
    overrides = {
        f.name: getattr(args, f.name)
        for f in fields(RunConfig)
        if getattr(args, f.name, None) is not None
    }
    if overrides:
        cfg = RunConfig(**{**asdict(cfg), **overrides})
    from .errors import ValidationError

    if not 0.0 <= cfg.target_rate < 1.0:
        raise ValidationError(f"target_rate {cfg.target_rate} outside [0, 1)")
    if cfg.metric not in ("fisher", "weight_only", "grad_only"):
        raise ValidationError(f"unknown metric {cfg.metric!r}")
    if cfg.schedule_form not in ("decreased", "static"):
        raise ValidationError(f"schedule_form must be decreased or static, got {cfg.schedule_form!r}")
    return cfg


def _paths(cfg: RunConfig) -> dict[str, str]:
    d = cfg.out_dir
    return {
        "model": os.path.join(d, "model.tlmc"),
        "grads": os.path.join(d, "grads.tlmc"),
        "importance": os.path.join(d, "importance.json"),
        "allocation": os.path.join(d, "allocation.json"),
        "compressed": os.path.join(d, "compressed.tlmc"),
        "decode_model": os.path.join(d, "decode_model.tlmc"),
        "schedule": os.path.join(d, "schedule.json"),
        "schedule_scores": os.path.join(d, "schedule_scores.json"),
        "generation": os.path.join(d, "generation.txt"),
        "trace": os.path.join(d, "trace.csv"),
        "eval_json": os.path.join(d, "eval_report.json"),
        "eval_txt": os.path.join(d, "eval_report.txt"),
        "bench": os.path.join(d, "bench.csv"),
        "ablation_json": os.path.join(d, "ablation.json"),
        "ablation_txt": os.path.join(d, "ablation.txt"),
    }


def _write_json(path: str, payload: dict, cfg: RunConfig):
    from .checkpoint import atomic_write_text

    payload = {
        "config_hash": cfg.config_hash(),
        "seeds": {"seed": cfg.seed, "calib_seed": cfg.calib_seed,
                  "prompt_seed": cfg.prompt_seed},
        **payload,
    }
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _model_config(cfg: RunConfig):
    from .model import ModelConfig

    return ModelConfig(
        d_model=cfg.d_model, n_layers=cfg.n_layers, n_heads=cfg.n_heads,
        d_ff=cfg.d_ff, max_seq_len=cfg.max_seq_len, seed=cfg.seed,
    )


def _train_config(cfg: RunConfig):
    from .model import TrainConfig

    return TrainConfig(
        steps=cfg.steps, batch_size=cfg.batch_size, seq_len=cfg.train_seq_len,
        learning_rate=cfg.learning_rate,
    )


def _load_model(cfg: RunConfig, paths):
    from .checkpoint import load_checkpoint
    from .errors import ValidationError

    if not os.path.exists(paths["model"]):
        raise ValidationError(f"missing model checkpoint {paths['model']}; run `train` first")
    model, _ = load_checkpoint(paths["model"])
    return model


def _load_calib_batches(cfg: RunConfig):
    from .data import load_corpus
    from .pipeline import CalibConfig, calibration_batches

    corpus = load_corpus(cfg.corpus_calib)
    calib = CalibConfig(sequences=cfg.calib_sequences, length=cfg.calib_length,
                        seed=cfg.calib_seed)
    return calibration_batches(corpus, calib)


def _require_grads(cfg: RunConfig, paths, model):
    from .checkpoint import load_grads
    from .errors import ValidationError

    if not os.path.exists(paths["grads"]):
        raise ValidationError(
            f"metric {cfg.metric!r} needs calibration gradients but {paths['grads']} "
            "is missing; run `calibrate` first"
        )
    load_grads(paths["grads"], model)


def cmd_train(cfg: RunConfig, paths) -> int:
    from .checkpoint import save_checkpoint
    from .data import load_corpus
    from .model import train

    corpus = load_corpus(cfg.corpus_train)
    tc = _train_config(cfg)
    model, losses = train(_model_config(cfg), corpus, cfg.steps, tc, log_every=200)
    save_checkpoint(model, paths["model"], train_config=tc, extra_meta={
        "config_hash": cfg.config_hash(),
        "initial_loss": losses[0] if losses else None,
        "final_loss": losses[-1] if losses else None,
    })
    print(f"saved {paths['model']}"
          + (f" (loss {losses[0]:.4f} -> {losses[-1]:.4f})" if losses else ""))
    return 0


def cmd_calibrate(cfg: RunConfig, paths) -> int:
    from .checkpoint import save_grads
    from .pipeline import calibrate

    model = _load_model(cfg, paths)
    batches = _load_calib_batches(cfg)
    loss = calibrate(model, batches)
    save_grads(model, paths["grads"], extra_meta={
        "config_hash": cfg.config_hash(), "calibration_loss": loss,
        "calib": {"sequences": cfg.calib_sequences, "length": cfg.calib_length,
                  "seed": cfg.calib_seed},
    })
    print(f"saved {paths['grads']} (calibration loss {loss:.4f})")
    return 0


def cmd_allocate(cfg: RunConfig, paths) -> int:
    from .compression import compute_importance
    from .pipeline import allocation_for_rate

    model = _load_model(cfg, paths)
    if cfg.metric in ("fisher", "grad_only"):
        _require_grads(cfg, paths, model)
    imp = compute_importance(model, cfg.metric)
    alloc = allocation_for_rate(imp, model.config, cfg.target_rate, cfg.floor)
    _write_json(paths["importance"], {"importance": imp.to_json_dict()}, cfg)
    _write_json(paths["allocation"], {
        "allocation": alloc.to_json_dict(),
        "target_rate": cfg.target_rate,
        "metric": cfg.metric,
    }, cfg)
    print(f"{'projection':<16}{'alpha':>16}{'rank':>6}")
    for pid in imp.ordered_pids():
        print(f"{str(pid):<16}{imp.values[pid]:>16.6e}{alloc.ranks[pid]:>6}")
    print(f"saved {paths['allocation']} (budget {alloc.budget})")
    return 0


def cmd_compress(cfg: RunConfig, paths) -> int:
    from .compression import (ImportanceMap, RankAllocation, compress_model,
                              default_caps, save_compressed)
    from .errors import ValidationError
    from .pipeline import calib_sequences_from_batches

    model = _load_model(cfg, paths)
    if not os.path.exists(paths["allocation"]):
        raise ValidationError(f"missing {paths['allocation']}; run `allocate` first")
    with open(paths["allocation"]) as fh:
        alloc_doc = json.load(fh)
    alloc = RankAllocation.from_json_dict(alloc_doc["allocation"], default_caps(model.config))
    imp = None
    if os.path.exists(paths["importance"]):
        with open(paths["importance"]) as fh:
            imp = ImportanceMap.from_json_dict(json.load(fh)["importance"])
    calib_seqs = None
    if cfg.whitening:
        calib_seqs = calib_sequences_from_batches(_load_calib_batches(cfg))
    n_threads = int(os.environ.get(THREAD_ENV) or "1")
    comp = compress_model(model, alloc, whitening=cfg.whitening,
                          calib_sequences=calib_seqs, importance=imp,
                          n_threads=n_threads)
    save_compressed(comp, paths["compressed"], extra_meta={"config_hash": cfg.config_hash()})
    print(f"saved {paths['compressed']} "
          f"(projection params {comp.projection_params_used()})")
    return 0


def cmd_schedule_search(cfg: RunConfig, paths) -> int:
    from .compression import save_compressed
    from .data import load_corpus
    from .decoding import overall_compression_rate
    from .pipeline import (calib_sequences_from_batches, make_prompt_pairs,
                           materialize_for_decoding, schedule_search_pipeline)

    model = _load_model(cfg, paths)
    if cfg.metric in ("fisher", "grad_only"):
        _require_grads(cfg, paths, model)
    batches = _load_calib_batches(cfg)
    calib_seqs = calib_sequences_from_batches(batches) if cfg.whitening else None
    materialized = materialize_for_decoding(model, cfg.metric, cfg.whitening, calib_seqs,
                                            floor=cfg.floor)
    calib_corpus = load_corpus(cfg.corpus_calib)
    pairs = make_prompt_pairs(model, calib_corpus, cfg.n_prompts, cfg.prompt_len,
                              cfg.horizon, cfg.prompt_seed)
    if cfg.schedule_form == "static":
        from .decoding import DecodeSchedule, RateAccounting

        acct = RateAccounting.for_model(materialized)
        target = int(round((1.0 - cfg.target_rate) * acct.dense_params))
        best = DecodeSchedule(steps=((0, acct.budget_for_params(target)),), form="static")
        table = []
        rate = overall_compression_rate(best, cfg.prompt_len, cfg.horizon, acct)
    else:
        best, table, acct = schedule_search_pipeline(
            materialized, cfg.target_rate, cfg.horizon, pairs
        )
        rate = overall_compression_rate(best, cfg.prompt_len, cfg.horizon, acct)
    save_compressed(materialized, paths["decode_model"],
                    extra_meta={"config_hash": cfg.config_hash()})
    _write_json(paths["schedule"], {
        "schedule": best.to_json_dict(),
        "overall_rate": rate,
        "materialized_budget": materialized.allocation.budget,
    }, cfg)
    _write_json(paths["schedule_scores"], {"table": [
        {"schedule": row.schedule.to_json_dict(), "mean_score": row.mean_score,
         "per_prompt": row.per_prompt}
        for row in table
    ]}, cfg)
    print(f"saved {paths['schedule']} and {paths['decode_model']} "
          f"(overall rate {rate:.4f}, {len(table)} candidates scored)")
    return 0


def _load_compressed(cfg: RunConfig, paths, key: str = "compressed"):
    from .compression import load_compressed
    from .errors import ValidationError

    stage = "compress" if key == "compressed" else "schedule-search"
    if not os.path.exists(paths[key]):
        raise ValidationError(f"missing {paths[key]}; run `{stage}` first")
    comp, _ = load_compressed(paths[key])
    return comp


def _load_schedule(cfg: RunConfig, paths):
    from .decoding import DecodeSchedule
    from .errors import ValidationError

    if not os.path.exists(paths["schedule"]):
        raise ValidationError(f"missing {paths['schedule']}; run `schedule-search` first")
    with open(paths["schedule"]) as fh:
        return DecodeSchedule.from_json_dict(json.load(fh)["schedule"])


def cmd_generate(cfg: RunConfig, paths) -> int:
    from .checkpoint import atomic_write_text
    from .data import load_corpus
    from .decoding import progressive_generate
    from .model import detokenize, sample_generate, tokenize_bytes

    if cfg.prompt_text:
        prompt = tokenize_bytes(cfg.prompt_text.encode("utf-8"))
    else:
        corpus = load_corpus(cfg.corpus_eval)
        prompt = tokenize_bytes(corpus)[: cfg.prompt_len]

    progressive_ready = (os.path.exists(paths["decode_model"])
                         and os.path.exists(paths["schedule"]))
    if progressive_ready and cfg.temperature <= 0.0:
        # scored/progressive decoding is greedy-only; sampling requests
        # fall through to the dense model below
        comp = _load_compressed(cfg, paths, "decode_model")
        schedule = _load_schedule(cfg, paths)
        result = progressive_generate(comp, prompt, schedule, cfg.horizon)
        tokens = result.tokens
        atomic_write_text(paths["trace"], result.trace_csv())
        print(f"saved {paths['trace']}")
    else:
        model = _load_model(cfg, paths)
        tokens = sample_generate(model, prompt, cfg.horizon, cfg.temperature, cfg.seed)
    text = detokenize(prompt) + detokenize(tokens)
    atomic_write_text(paths["generation"], text + "\n")
    print(text)
    print(f"saved {paths['generation']}")
    return 0


def cmd_eval(cfg: RunConfig, paths) -> int:
    import time

    import numpy as np

    from .data import load_corpus
    from .decoding import RateAccounting, overall_compression_rate, progressive_generate
    from .evaluate import EvalReport, corpus_windows, perplexity_windows, rouge_l, throughput_bench
    from .model import detokenize
    from .pipeline import make_prompt_pairs

    model = _load_model(cfg, paths)
    comp = _load_compressed(cfg, paths)
    decode_model = _load_compressed(cfg, paths, "decode_model")
    schedule = _load_schedule(cfg, paths)
    eval_corpus = load_corpus(cfg.corpus_eval)
    windows = corpus_windows(eval_corpus, cfg.eval_seq_len, cfg.eval_max_windows)
    wall: dict[str, float] = {}

    t = time.perf_counter()
    dense_ppl = perplexity_windows(model, windows)
    comp_ppl = perplexity_windows(comp, windows)
    wall["perplexity"] = time.perf_counter() - t

    t = time.perf_counter()
    pairs = make_prompt_pairs(model, eval_corpus, cfg.n_prompts, cfg.prompt_len,
                              cfg.horizon, cfg.prompt_seed)
    scores = {"precision": [], "recall": [], "f": []}
    for prompt, ref in pairs:
        gen = progressive_generate(decode_model, prompt, schedule, cfg.horizon).tokens
        r = rouge_l(detokenize(gen), ref)
        for k in scores:
            scores[k].append(r[k])
    rouge = {k: float(np.mean(v)) for k, v in scores.items()}
    wall["generation"] = time.perf_counter() - t

    acct = RateAccounting.for_model(decode_model)
    rate = overall_compression_rate(schedule, cfg.prompt_len, cfg.horizon, acct)

    t = time.perf_counter()
    rows = throughput_bench(model, comp, schedule, pairs[0][0], gen_len=16, repeats=5,
                            progressive_model=decode_model)
    wall["throughput_bench"] = time.perf_counter() - t
    progressive_row = next(r for r in rows if r.name == "progressive")

    report = EvalReport(
        perplexity=comp_ppl, rouge_l=rouge, compression_rate=rate,
        throughput=progressive_row.tokens_per_sec, wall_clock=wall,
    )
    _write_json(paths["eval_json"], {
        "report": report.to_json_dict(),
        "dense_perplexity": dense_ppl,
        "throughput_rows": [
            {"name": r.name, "tokens_per_sec": r.tokens_per_sec, "speedup": r.speedup}
            for r in rows
        ],
    }, cfg)
    from .checkpoint import atomic_write_text

    atomic_write_text(paths["eval_txt"], report.to_table() + "\n")
    print(report.to_table())
    print(f"dense perplexity {dense_ppl:.4f}")
    print(f"saved {paths['eval_json']}")
    return 0


def cmd_bench(cfg: RunConfig, paths) -> int:
    from .checkpoint import atomic_write_text
    from .data import load_corpus
    from .evaluate import corpus_windows, search_time_bench, throughput_bench
    from .model import tokenize_bytes

    model = _load_model(cfg, paths)
    comp = _load_compressed(cfg, paths)
    decode_model = _load_compressed(cfg, paths, "decode_model")
    schedule = _load_schedule(cfg, paths)
    prompt = tokenize_bytes(load_corpus(cfg.corpus_eval))[: cfg.prompt_len]

    rows = throughput_bench(model, comp, schedule, prompt, gen_len=16, repeats=5,
                            progressive_model=decode_model)
    calib_corpus = load_corpus(cfg.corpus_calib)
    bench_windows = corpus_windows(calib_corpus, 128, max_windows=4)
    batches = _load_calib_batches(cfg)
    stime = search_time_bench(model, batches[:1], bench_windows, cfg.target_rate)

    lines = ["name,tokens_per_sec,speedup,seconds"]
    for r in rows:
        lines.append(f"{r.name},{r.tokens_per_sec:.2f},{r.speedup:.3f},{r.seconds:.5f}")
    lines.append(f"search_fisher,,,{stime.fisher_seconds:.5f}")
    lines.append(f"search_baseline,,,{stime.baseline_seconds:.5f}")
    lines.append(f"search_ratio,,,{stime.ratio:.2f}")
    atomic_write_text(paths["bench"], "\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"saved {paths['bench']}")
    return 0


def cmd_ablate(cfg: RunConfig, paths) -> int:
    from .checkpoint import atomic_write_text
    from .data import load_corpus
    from .pipeline import ablation_grid, ablation_table_text, make_prompt_pairs

    model = _load_model(cfg, paths)
    _require_grads(cfg, paths, model)
    batches = _load_calib_batches(cfg)
    calib_corpus = load_corpus(cfg.corpus_calib)
    pairs = make_prompt_pairs(model, calib_corpus, cfg.n_prompts, cfg.prompt_len,
                              cfg.horizon, cfg.prompt_seed)
    rows = ablation_grid(model, cfg.target_rate, batches, pairs,
                         horizon=cfg.horizon, whitening=cfg.whitening)
    _write_json(paths["ablation_json"], {"rows": rows, "target_rate": cfg.target_rate}, cfg)
    text = ablation_table_text(rows, cfg.target_rate)
    atomic_write_text(paths["ablation_txt"], text + "\n")
    print(text)
    print(f"saved {paths['ablation_json']}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "allocate": cmd_allocate,
    "compress": cmd_compress,
    "schedule-search": cmd_schedule_search,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shrinklm",
        description="Train, compress (low-rank + budgeted ranks), and decode a tiny LM.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON run config")
        for f in fields(RunConfig):
            arg = "--" + f.name.replace("_", "-")
            if f.type == "bool" or isinstance(f.default, bool):
                p.add_argument(arg, default=None, type=lambda s: s.lower() in ("1", "true", "yes"))
            else:
                p.add_argument(arg, default=None, type=type(f.default))
    return parser


def main(argv=None) -> int:
    _apply_thread_override()
    args = build_parser().parse_args(argv)
    from .errors import NumericalError, ValidationError

    try:
        cfg = load_run_config(args)
        os.makedirs(cfg.out_dir, exist_ok=True)
        return COMMANDS[args.command](cfg, _paths(cfg))
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
