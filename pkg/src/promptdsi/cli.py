"""Command-line entry point and experiment configuration.

Subcommands: gen-data, train-base, continue, eval, report, bench-pass,
seed-sweep. One JSON config format covers configs, manifests and reports;
every run directory is named by the config hash and carries everything needed
to reproduce it. Exit codes: 0 ok, 2 config error, 3 data error, 4 runtime or
numeric error. PROMPTDSI_THREADS caps evaluation parallelism.
"""

import argparse
import copy
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import continual as cl
from . import data as dt
from . import encoder as enc
from . import prompts as pr
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, PromptDsiError
from .metrics import (METRICS, PerfMatrix, cl_metrics, params_accounting,
                      read_perf_csv, write_perf_csv)
from .prompts import utilization_stats

DEFAULT_CONFIG = {
    "seed": 0,
    "dtype": "float32",
    "strategy": "PROMPTDSI_L2P",
    "data": {"synthetic": {}},
    "encoder": {
        "num_layers": 4,
        "dim": 64,
        "num_heads": 4,
        "ff_dim": 128,
        "max_seq_len": 16,
        "prompt_layers": [2],
    },
    "train": {
        "d0_epochs": 30,
        "d0_lr": 1e-3,
        "d0_batch": 64,
        "cl_epochs": 6,
        "cl_lr": 1e-3,
        "cl_batch": 32,
        "weight_decay": 0.01,
        "promptdsi_epoch_mult": 2,
        "replay_every": 4,
        "centroid_refine_epochs": 10,
    },
    "pool": {
        "size": 5,
        "prompt_len": 20,
        "top_n": 1,
        "coda_prompts_per_task": 2,
        "coda_prompt_len": 10,
        "match_coeff": 1.0,
        "num_topics": 8,
        "topic_freeze_after_first": False,
    },
}


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and key != "data":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be an object")
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: dict) -> None:
    if cfg["strategy"] not in cl.STRATEGY_TAGS:
        raise ConfigError(f"unknown strategy {cfg['strategy']!r}; "
                          f"choose one of {', '.join(cl.STRATEGY_TAGS)}")
    if cfg["dtype"] not in ("float32", "float64"):
        raise ConfigError("dtype must be float32 or float64")
    data = cfg["data"]
    if not isinstance(data, dict) or not ({"synthetic", "path"} & set(data)):
        raise ConfigError("data must contain 'synthetic' or 'path'")
    for section, key in (("train", "d0_epochs"), ("pool", "size")):
        if not isinstance(cfg[section][key], (int, float)):
            raise ConfigError(f"{section}.{key} must be numeric")


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def synthetic_spec(cfg: dict) -> dt.SyntheticSpec:
    spec_obj = dict(cfg["data"].get("synthetic", {}))
    spec_obj.setdefault("seed", cfg["seed"])
    return dt.SyntheticSpec.from_json(spec_obj)


def load_timeline(cfg: dict):
    data = cfg["data"]
    if "path" in data:
        return dt.load_jsonl(data["path"])
    return dt.generate_corpora(synthetic_spec(cfg))


def vocab_size_for(cfg: dict, timeline: dt.CorpusTimeline) -> int:
    if "synthetic" in cfg["data"]:
        return synthetic_spec(cfg).vocab_size
    top = 0
    for corpus in timeline.corpora:
        for d in corpus.docs:
            top = max(top, max(d.tokens, default=0))
        for q in corpus.queries:
            top = max(top, max(q.tokens, default=0))
    return top + 1


def encoder_config(cfg: dict, vocab_size: int, strategy: str | None = None) -> enc.EncoderConfig:
    strategy = strategy or cfg["strategy"]
    mode = enc.TWO_PASS if cl.is_naive(strategy) else enc.SINGLE_PASS
    e = cfg["encoder"]
    return enc.EncoderConfig(
        vocab_size=vocab_size,
        num_layers=e["num_layers"],
        dim=e["dim"],
        num_heads=e["num_heads"],
        ff_dim=e["ff_dim"],
        max_seq_len=e["max_seq_len"],
        prompt_layers=tuple(e["prompt_layers"]),
        selection_mode=mode,
    )


def timestep_plan(cfg: dict, strategy: str | None = None, seed: int | None = None) -> cl.TimestepPlan:
    t = cfg["train"]
    p = cfg["pool"]
    return cl.TimestepPlan(
        strategy=strategy or cfg["strategy"],
        d0=cl.PhaseSettings(t["d0_epochs"], t["d0_lr"], t["d0_batch"], t["weight_decay"]),
        cl=cl.PhaseSettings(t["cl_epochs"], t["cl_lr"], t["cl_batch"], t["weight_decay"]),
        pool_cfg=pr.PoolConfig(
            size=p["size"], prompt_len=p["prompt_len"], top_n=p["top_n"],
            coda_prompts_per_task=p["coda_prompts_per_task"],
            coda_prompt_len=p["coda_prompt_len"], match_coeff=p["match_coeff"],
            topic_freeze_after_first=p["topic_freeze_after_first"],
        ),
        num_topics=p["num_topics"],
        promptdsi_epoch_mult=t["promptdsi_epoch_mult"],
        replay_every=t["replay_every"],
        centroid_refine_epochs=t["centroid_refine_epochs"],
        seed=cfg["seed"] if seed is None else seed,
    )


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def write_selection_log(path, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["corpus_id", "query_id", "prompt_ids", "distances"])
        for r in records:
            w.writerow([r.corpus_id, r.query_id,
                        ";".join(str(p) for p in r.prompt_ids),
                        ";".join(repr(d) for d in r.distances)])


def read_selection_log(path):
    records = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            records.append(pr.SelectionRecord(
                corpus_id=int(row["corpus_id"]),
                query_id=row["query_id"],
                prompt_ids=tuple(int(x) for x in row["prompt_ids"].split(";") if x),
                distances=tuple(float(x) for x in row["distances"].split(";") if x),
            ))
    return records


def write_utilization_csv(path, records, pool_size: int) -> None:
    stats = utilization_stats(records, pool_size)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["corpus_id", "prompt_id", "count"])
        for corpus, prompt, count in stats.rows():
            w.writerow([corpus, prompt, count])


def table2_summary(perf: dict, t_final: int, trainable_params: int) -> dict:
    summary: dict = {"t": t_final, "trainable_params": trainable_params,
                     "d0": {}, "a": {}, "la": {}, "f": {}, "forgetting_d0": {}}
    for m in METRICS:
        matrix = perf[m]
        summary["d0"][m] = matrix.get(t_final, 0) if matrix.has(t_final, 0) else None
        complete = all(matrix.has(i, j) for i in range(t_final + 1) for j in range(i + 1))
        vals = cl_metrics(matrix, t_final) if complete else None
        if vals is None and matrix.has(t_final, 0):
            # MULTI/JOINT fill only the final row; A_t is still well defined
            a = sum(matrix.get(t_final, i) for i in range(1, t_final + 1)) / max(t_final, 1)
            vals = {"A_t": a, "LA_t": None, "F_t": None,
                    "forgetting_d0": max(matrix.get(t_final, 0) - matrix.get(0, 0), 0.0)}
        if vals is not None:
            summary["a"][m] = vals["A_t"]
            summary["la"][m] = vals["LA_t"]
            summary["f"][m] = vals["F_t"]
            summary["forgetting_d0"][m] = vals["forgetting_d0"]
    return summary


def write_trace_csv(path, trace_rows) -> None:
    cols = ["t"] + [f"{m}:{k}" for m in METRICS for k in ("A_t", "LA_t", "F_t", "forgetting_d0")]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for row in trace_rows:
            w.writerow([row.get(c, "") if row.get(c) is not None else "" for c in cols])


def write_run_artifacts(run_dir: Path, result: cl.ScheduleResult, cfg: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
    write_perf_csv(run_dir / "perf_matrix.csv", result.perf)
    write_selection_log(run_dir / "selection_log.csv", result.selection_log)
    pool_size = result.model.pool.size if result.model.pool is not None else 0
    write_utilization_csv(run_dir / "utilization.csv", result.selection_log, pool_size)
    t_final = result.perf["hits@10"].max_t
    params = params_accounting(result.model.registry, result.model.encoder.config.dim,
                               result.model.pool, t_start=1, t_end=t_final)
    (run_dir / "table2.json").write_text(json.dumps(
        table2_summary(result.perf, t_final, params), indent=1, sort_keys=True))
    write_trace_csv(run_dir / "trace.csv", result.trace())
    report = {
        "strategy": cfg["strategy"],
        "seed": cfg["seed"],
        "config_hash": config_hash(cfg),
        "continual_layer_invocations": result.continual_invocations,
        "continual_wall_s": result.continual_wall_s,
        "audit_ok": result.audit_ok,
        "pool_size": pool_size,
        "steps": result.reports,
    }
    (run_dir / "train_report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    if result.topic_model is not None:
        result.topic_model.save(run_dir / "topic_model.json")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed} if args.seed is not None else None)
    spec = synthetic_spec(cfg)
    timeline = dt.generate_corpora(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dt.save_jsonl(timeline, out)
    n_docs = sum(len(c.docs) for c in timeline.corpora)
    n_q = sum(len(c.queries) for c in timeline.corpora)
    print(f"wrote {n_docs} documents and {n_q} queries over "
          f"{timeline.num_timesteps} corpora to {out}")
    return 0


def cmd_train_base(args) -> int:
    cfg = load_config(args.config, _data_override(args))
    timeline = load_timeline(cfg)
    ecfg = encoder_config(cfg, vocab_size_for(cfg, timeline))
    plan = timestep_plan(cfg)
    model = cl.build_model(ecfg, plan.seed, cfg["dtype"])
    access = cl.DataAccess(timeline)
    t0 = time.perf_counter()
    report = cl.train_initial(model, access, plan)
    vals = cl.evaluate_corpus(model, access.queries(0, dt.TEST))
    out = Path(args.out)
    save_checkpoint(out, model, timestep=0, config_hash=config_hash(cfg))
    (out / "train_base_report.json").write_text(json.dumps(
        {"report": report, "d0_test": vals, "wall_s": time.perf_counter() - t0},
        indent=1, sort_keys=True))
    print(f"base checkpoint at {out}; D_0 test hits@10={vals['hits@10']:.3f}")
    return 0


def _data_override(args) -> dict | None:
    if getattr(args, "data", None):
        return {"data": {"path": args.data}}
    return None


def _run_dir(base: Path, cfg: dict) -> Path:
    return base / f"run_{config_hash(cfg)}"


def cmd_continue(args) -> int:
    overrides = _data_override(args) or {}
    if args.strategy:
        overrides["strategy"] = args.strategy
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    timeline = load_timeline(cfg)
    base, _ = load_checkpoint(args.checkpoint)
    plan = timestep_plan(cfg)
    run_dir = _run_dir(Path(args.out), cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    result = cl.run_schedule(plan, timeline, base_model=base, dtype=cfg["dtype"],
                             checkpoint_dir=run_dir)
    write_run_artifacts(run_dir, result, cfg)
    t_final = result.perf["hits@10"].max_t
    print(f"run dir {run_dir}")
    print(f"P[{t_final}][0] hits@10 = {result.perf['hits@10'].get(t_final, 0):.3f}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, _data_override(args))
    timeline = load_timeline(cfg)
    model, manifest = load_checkpoint(args.checkpoint)
    t = manifest["timestep"]
    access = cl.DataAccess(timeline)
    perf = {m: PerfMatrix(m) for m in METRICS}
    cl.evaluate_row(model, access, t, perf)
    rows = [(t, i, m, perf[m].get(t, i)) for m in sorted(METRICS) for i in range(t + 1)]
    out = Path(args.out) if args.out else None
    if out:
        with open(out, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["t", "i", "metric", "value"])
            for tt, i, m, v in sorted(rows):
                w.writerow([tt, i, m, repr(v)])
        print(f"wrote {out}")
    else:
        for tt, i, m, v in sorted(rows):
            print(f"P[{tt}][{i}] {m} = {v}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    perf = read_perf_csv(run_dir / "perf_matrix.csv")
    report = json.loads((run_dir / "train_report.json").read_text())
    t_final = perf["hits@10"].max_t
    params = sum(step.get("trainable_params", 0) for step in report["steps"]
                 if step.get("t", 0) >= 1)
    summary = table2_summary(perf, t_final, params)
    (run_dir / "table2.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    with open(run_dir / "table2.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["block", "metric", "value"])
        for block in ("d0", "a", "la", "f", "forgetting_d0"):
            for m, v in summary[block].items():
                w.writerow([block, m, "" if v is None else repr(v)])
        w.writerow(["params", "trainable", summary["trainable_params"]])
    trace_rows = []
    for t in range(t_final + 1):
        row = {"t": t}
        complete = all(perf["hits@10"].has(i, j) for i in range(t + 1) for j in range(i + 1))
        if complete:
            for m in METRICS:
                for k, v in cl_metrics(perf[m], t).items():
                    row[f"{m}:{k}"] = v
        trace_rows.append(row)
    write_trace_csv(run_dir / "trace.csv", trace_rows)
    log_path = run_dir / "selection_log.csv"
    if log_path.exists():
        records = read_selection_log(log_path)
        pool_size = report.get("pool_size") or \
            1 + max((max(r.prompt_ids, default=0) for r in records), default=0)
        write_utilization_csv(run_dir / "utilization.csv", records, pool_size)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def cmd_bench_pass(args) -> int:
    cfg = load_config(args.config, _data_override(args))
    if cl.is_naive(cfg["strategy"]) or not cl.is_promptdsi(cfg["strategy"]):
        raise ConfigError("bench-pass needs a single-pass PROMPTDSI_* strategy in the config")
    naive_tag = "NAIVE_" + cfg["strategy"]
    timeline = load_timeline(cfg)
    out = {}
    for tag in (cfg["strategy"], naive_tag):
        base, _ = load_checkpoint(args.checkpoint)
        plan = timestep_plan(cfg, strategy=tag)
        result = cl.run_schedule(plan, timeline, base_model=base, dtype=cfg["dtype"])
        t_final = result.perf["hits@10"].max_t
        a_vals = cl_metrics(result.perf["hits@10"], t_final)
        out[tag] = {
            "layer_invocations": result.continual_invocations,
            "wall_s": result.continual_wall_s,
            "hits@10_d0": result.perf["hits@10"].get(t_final, 0),
            "hits@10_a": a_vals["A_t"],
        }
    single, naive = out[cfg["strategy"]], out[naive_tag]
    out["ratio_naive_over_single"] = naive["layer_invocations"] / single["layer_invocations"]
    out["single_pass_faster"] = naive["wall_s"] > single["wall_s"]
    payload = json.dumps(out, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(payload)
    print(payload)
    return 0


def cmd_seed_sweep(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    if not seeds:
        raise ConfigError("seed-sweep needs at least one seed")
    cfg0 = load_config(args.config, _data_override(args))
    timeline = load_timeline(cfg0)
    rows = []
    out_base = Path(args.out)
    for seed in seeds:
        cfg = load_config(args.config, {**(_data_override(args) or {}), "seed": seed})
        plan = timestep_plan(cfg)
        if args.checkpoint:
            base, _ = load_checkpoint(args.checkpoint)
            result = cl.run_schedule(plan, timeline, base_model=base, dtype=cfg["dtype"])
        else:
            ecfg = encoder_config(cfg, vocab_size_for(cfg, timeline))
            result = cl.run_schedule(plan, timeline, encoder_config=ecfg, dtype=cfg["dtype"])
        run_dir = _run_dir(out_base, cfg)
        write_run_artifacts(run_dir, result, cfg)
        t_final = result.perf["hits@10"].max_t
        row = {"seed": seed, "d0_hits@10": result.perf["hits@10"].get(t_final, 0)}
        a = cl_metrics(result.perf["hits@10"], t_final)["A_t"]
        row["a_hits@10"] = a
        rows.append(row)
    summary = {"seeds": seeds, "runs": rows}
    for key in ("d0_hits@10", "a_hits@10"):
        vals = np.asarray([r[key] for r in rows], dtype=np.float64)
        summary[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=0))}
    out_base.mkdir(parents=True, exist_ok=True)
    (out_base / "sweep_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(json.dumps({k: summary[k] for k in ("d0_hits@10", "a_hits@10")}, indent=1))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptdsi",
        description="continual document indexing experiments on synthetic corpora",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus timeline as JSONL")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-base", help="train the initial-corpus checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None, help="JSONL corpus (default: synthetic from config)")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("continue", help="run the continual schedule from a base checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--strategy", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="directory that will hold run_<hash>")
    p.set_defaults(func=cmd_continue)

    p = sub.add_parser("eval", help="recompute metrics from a checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render summary tables from a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench-pass", help="single- vs two-pass cost on identical workloads")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench_pass)

    p = sub.add_parser("seed-sweep", help="repeat a run over seeds; report mean and std")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--seeds", required=True, help="comma-separated seed list")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_seed_sweep)
    return parser


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except PromptDsiError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
