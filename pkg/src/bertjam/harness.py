"""Experiment pipeline (data -> micro-BERT -> three-phase run) and the
ablation, size-sweep and baseline-comparison harnesses built on it."""
from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .config import RunConfig
from .data import SPLITS, SynthTaskSpec, Vocab, build_vocab, encode_pairs, generate_bitext, read_corpus
from .decode import BeamConfig
from .jamodel import BertJamConfig, BertJamModel
from .microbert import MicroBert, MicroBertConfig, pretrain_mlm
from .trainer import PhasePlan, PhaseSpec, TrainData, curves_csv, run_three_phase

log = logging.getLogger(__name__)

BASELINE = "baseline"


# -- pipeline pieces ---------------------------------------------------------------

def task_spec(cfg: RunConfig) -> SynthTaskSpec:
    return SynthTaskSpec(
        task=cfg.task, content_vocab=cfg.content_vocab, n_polysemous=cfg.n_polysemous,
        n_markers=cfg.n_markers, min_len=cfg.min_len, max_len=cfg.max_len, reorder=cfg.reorder,
        n_train=cfg.n_train, n_valid=cfg.n_valid, n_test=cfg.n_test, seed=cfg.data_seed,
    )


@dataclass
class TaskData:
    data: TrainData
    src_vocab: Vocab
    tgt_vocab: Vocab


def load_task(cfg: RunConfig, data_dir=None) -> TaskData:
    """Generate the corpus in memory, or read it from a ``gen`` output directory."""
    if data_dir is None:
        bt = generate_bitext(task_spec(cfg))
        raw = {s: bt.split(s) for s in SPLITS}
    else:
        raw = {s: read_corpus(data_dir, s) for s in SPLITS}
    src_vocab, tgt_vocab = build_vocab(list(raw.values()))
    if data_dir is not None and (Path(data_dir) / "vocab.src").exists():
        src_vocab = Vocab.load(Path(data_dir) / "vocab.src")
        tgt_vocab = Vocab.load(Path(data_dir) / "vocab.tgt")
    data = TrainData(*(encode_pairs(raw[s], src_vocab, tgt_vocab) for s in SPLITS))
    return TaskData(data, src_vocab, tgt_vocab)


def bert_config(cfg: RunConfig, vocab_size: int) -> MicroBertConfig:
    return MicroBertConfig(vocab_size, cfg.bert_layers, cfg.bert_dim, cfg.bert_heads, cfg.bert_ff, cfg.bert_dropout)


def pretrain_bert(cfg: RunConfig, task: TaskData) -> MicroBert:
    corpus = [s for s, _ in task.data.train]
    return pretrain_mlm(corpus, bert_config(cfg, len(task.src_vocab)), cfg.bert_steps, seed=cfg.seed,
                        batch_size=cfg.bert_batch, lr=cfg.bert_lr)


def model_config(cfg: RunConfig, src_vocab: int, tgt_vocab: int) -> BertJamConfig:
    combiner = {"M1": "linear", "M2": "last"}.get(cfg.variant, "glu")
    return BertJamConfig(
        src_vocab, tgt_vocab, d_model=cfg.d_model, d_ff=cfg.d_ff, n_heads=cfg.n_heads,
        n_layers=cfg.n_layers, dropout=cfg.dropout, combiner=combiner,
        use_bert=cfg.use_bert, attn_scale=cfg.attn_scale,
        encdec_self_keys=cfg.encdec_self_keys, label_smoothing=cfg.label_smoothing,
    )


def beam_config(cfg: RunConfig) -> BeamConfig:
    return BeamConfig(width=cfg.beam, penalty=cfg.length_penalty, style=cfg.penalty_style)


def build_plan(cfg: RunConfig) -> PhasePlan:
    """Phase schedule for ``cfg.variant``; a no-BERT model gets one phase
    with the whole epoch budget."""
    e1, e2, e3 = cfg.epochs()
    if not cfg.use_bert:
        phases = [PhaseSpec(3, e1 + e2 + e3, "early_stop", BASELINE)]
    elif cfg.variant in ("M0", "M1"):
        phases = [PhaseSpec(1, e1, "converge")]
        if e2:
            phases.append(PhaseSpec(2, e2, "converge"))
    elif cfg.variant == "M2":
        # no gate to warm up: phase 2 is dropped and phase 1 takes its budget
        phases = [PhaseSpec(1, e1 + e2, "converge", "1+2")]
    else:
        # M3: everything except BERT from scratch, then fine-tuning
        phases = [PhaseSpec(2, e1 + e2, "converge", "1+2")]
    if cfg.use_bert and e3:
        phases.append(PhaseSpec(3, e3, "early_stop"))
    return PhasePlan(
        phases, accum=cfg.accum, avg_window=cfg.avg_window, patience=cfg.patience, min_delta=cfg.min_delta,
        converge_epochs=cfg.converge_epochs, max_tokens=cfg.max_tokens, warmup=cfg.warmup,
        peak_lr=cfg.peak_lr, init_lr=cfg.init_lr, reset_optimizer=cfg.reset_optimizer, beam=beam_config(cfg),
    )


def build_model(cfg: RunConfig, task: TaskData, bert: MicroBert | None = None) -> BertJamModel:
    if cfg.use_bert and bert is None:
        bert = pretrain_bert(cfg, task)
    mcfg = model_config(cfg, len(task.src_vocab), len(task.tgt_vocab))
    return BertJamModel(mcfg, bert if cfg.use_bert else None, seed=cfg.seed)


@dataclass
class Experiment:
    config: RunConfig
    report: dict
    metrics: list
    curves: list
    weights: dict
    model: BertJamModel


def run_experiment(cfg: RunConfig, run_dir=None, task: TaskData | None = None, bert: MicroBert | None = None,
                   resume: bool = False, stop_after: int | None = None) -> Experiment:
    """One full run.  ``report`` carries per-phase summaries plus the final
    valid/test BLEU of the returned (averaged) weights.  Without ``bert`` a
    micro-BERT is pretrained from the training sources."""
    t0 = time.perf_counter()
    task = task or load_task(cfg)
    model = build_model(cfg, task, bert)
    plan = build_plan(cfg)
    res = run_three_phase(plan, model, task.data, seed=cfg.seed, run_dir=run_dir, resume=resume,
                          stop_after=stop_after, config=cfg.to_dict())
    last = res.report["phases"][-1]
    report = {
        "variant": cfg.variant if cfg.use_bert else BASELINE,
        "seed": cfg.seed,
        "task": cfg.task,
        "final": {
            "valid_bleu": last["valid_bleu"],
            "test_bleu": last["test_bleu"],
            "valid_loss": last["avg_valid_loss"],
        },
        **res.report,
        "runtime_s": time.perf_counter() - t0,
    }
    return Experiment(cfg, report, res.metrics, res.curves, res.weights, model)


# -- job plumbing -------------------------------------------------------------------

def _run_job(cfg_dict: dict, run_dir: str) -> dict:
    """Worker entry: run (or reuse a finished run in ``run_dir``) and return
    a picklable summary.  Failures come back as ``{"error": ...}``."""
    cfg = RunConfig(**cfg_dict)
    path = Path(run_dir)
    done = path / "report.json"
    if done.exists() and (path / "config.json").exists():
        if json.loads((path / "config.json").read_text()) == cfg.to_dict():
            return json.loads(done.read_text())
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    try:
        exp = run_experiment(cfg, run_dir=path)
    except Exception as exc:  # recorded, the harness carries on
        log.error("run %s failed: %s", run_dir, exc)
        return {"error": f"{type(exc).__name__}: {exc}", "seed": cfg.seed}
    out = dict(exp.report)
    out["curves"] = exp.curves
    done.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out


def run_jobs(jobs: Sequence[tuple[RunConfig, Path]], workers: int = 1) -> list[dict]:
    args = [(c.to_dict(), str(d)) for c, d in jobs]
    if workers <= 1 or len(args) <= 1:
        return [_run_job(*a) for a in args]
    with ProcessPoolExecutor(max_workers=min(workers, len(args))) as pool:
        futures = [pool.submit(_run_job, *a) for a in args]
        return [f.result() for f in futures]


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x) -> str:
    return "" if x is None else repr(round(float(x), 10))


def _write_curves(out: Path, name: str, summary: dict) -> None:
    if "curves" in summary:
        d = out / "curves"
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{name}.csv").write_text(curves_csv(summary["curves"]))


def _median(xs):
    xs = [x for x in xs if x is not None]
    return statistics.median(xs) if xs else None


# -- ablation ----------------------------------------------------------------------

ABLATION_HEADER = ["variant", "seed", "phase", "epochs", "valid_bleu", "test_bleu"]
TABLE_HEADER = ["variant", "phase_1", "phase_2", "phase_3", "epochs"]
MERGED = "merged"


def run_ablation(cfg: RunConfig, seeds: Sequence[int], out_dir, jobs: int = 1,
                 variants: Sequence[str] = ("M0", "M1", "M2", "M3")) -> dict:
    """Train every variant for every seed; write the long CSV, the per-seed
    and median variant-by-phase tables and per-run curves."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    todo = [(cfg.replace(variant=v, seed=s, use_bert=True), out / "runs" / f"{v}_seed{s}")
            for v in variants for s in seeds]
    results = run_jobs(todo, jobs)

    rows, failures, by_variant = [], [], {v: [] for v in variants}
    for (c, _), res in zip(todo, results):
        name = f"{c.variant}_seed{c.seed}"
        if "error" in res:
            failures.append({"variant": c.variant, "seed": c.seed, "error": res["error"]})
            continue
        _write_curves(out, name, res)
        by_variant[c.variant].append(res)
        for ph in res["phases"]:
            rows.append([c.variant, c.seed, ph["phase"], ph["epochs"], _num(ph["valid_bleu"]), _num(ph["test_bleu"])])
    (out / "ablation.csv").write_text(_csv(ABLATION_HEADER, rows))

    per_seed, table = [], []
    for v in variants:
        for res in by_variant[v]:
            per_seed.append([v, res["seed"], *_table_cells(res["phases"])])
        table.append([v, *_median_cells([r["phases"] for r in by_variant[v]])])
    (out / "ablation_by_seed.csv").write_text(_csv(["variant", "seed", *TABLE_HEADER[1:]], per_seed))
    (out / "ablation_table.csv").write_text(_csv(TABLE_HEADER, table))
    summary = {
        "seeds": list(seeds),
        "variants": list(variants),
        "table": [dict(zip(TABLE_HEADER, r)) for r in table],
        "failures": failures,
    }
    (out / "ablation.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def _phase_columns(phases: list[dict]) -> dict[str, dict]:
    """Map phase reports onto the three table columns; a merged "1+2"
    phase fills column 1 and marks column 2."""
    cols = {}
    for ph in phases:
        if ph["phase"] == "1+2":
            cols["1"] = ph
            cols["2"] = {"merged": True}
        else:
            cols[ph["phase"]] = ph
    return cols


def _table_cells(phases: list[dict]) -> list[str]:
    cols = _phase_columns(phases)
    cells = []
    for k in ("1", "2", "3"):
        ph = cols.get(k)
        cells.append("" if ph is None else MERGED if ph.get("merged") else _num(ph["test_bleu"]))
    cells.append("+".join(str(ph["epochs"]) for ph in phases))
    return cells


def _median_cells(runs: list[list[dict]]) -> list[str]:
    if not runs:
        return ["", "", "", ""]
    cells = []
    for k in ("1", "2", "3"):
        vals = [_phase_columns(p).get(k) for p in runs]
        if any(v is not None and v.get("merged") for v in vals):
            cells.append(MERGED)
        else:
            cells.append(_num(_median([v["test_bleu"] for v in vals if v is not None])))
    cells.append("+".join(str(ph["epochs"]) for ph in runs[0]))
    return cells


# -- BERT size sweep ---------------------------------------------------------------

SWEEP_LAYERS = (1, 2, 4)
SWEEP_DIMS = (16, 32, 64)
SWEEP_HEADER = ["L_B", "H_B", "seed", "test_bleu", "runtime_s"]


def count_inversions(grid: dict[tuple[int, int], float | None], layers, dims) -> dict:
    """Pairs along a row (growing H_B) or column (growing L_B) where the
    larger BERT scores strictly lower."""
    def count(lines):
        inv = pairs = 0
        for line in lines:
            vals = [grid.get(c) for c in line]
            for i in range(len(vals)):
                for j in range(i + 1, len(vals)):
                    if vals[i] is None or vals[j] is None:
                        continue
                    pairs += 1
                    inv += vals[j] < vals[i]
        return inv, pairs

    r_inv, r_pairs = count([[(L, H) for H in dims] for L in layers])
    c_inv, c_pairs = count([[(L, H) for L in layers] for H in dims])
    return {"row_inversions": r_inv, "row_pairs": r_pairs, "col_inversions": c_inv, "col_pairs": c_pairs}


def run_sweep(cfg: RunConfig, seeds: Sequence[int], out_dir, jobs: int = 1,
              layers: Sequence[int] = SWEEP_LAYERS, dims: Sequence[int] = SWEEP_DIMS) -> dict:
    """One full M0 run per (L_B, H_B, seed); each cell pretrains its own
    micro-BERT with the same step budget."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    todo = []
    for L in layers:
        for H in dims:
            for s in seeds:
                c = cfg.replace(bert_layers=L, bert_dim=H, bert_ff=2 * H, seed=s, variant="M0", use_bert=True)
                todo.append((c, out / "runs" / f"L{L}_H{H}_seed{s}"))
    results = run_jobs(todo, jobs)

    rows, failures, cells = [], [], {}
    total = 0.0
    for (c, _), res in zip(todo, results):
        key = (c.bert_layers, c.bert_dim)
        if "error" in res:
            failures.append({"L_B": key[0], "H_B": key[1], "seed": c.seed, "error": res["error"]})
            rows.append([key[0], key[1], c.seed, "", ""])
            continue
        _write_curves(out, f"L{key[0]}_H{key[1]}_seed{c.seed}", res)
        total += res["runtime_s"]
        cells.setdefault(key, []).append(res["final"]["test_bleu"])
        rows.append([key[0], key[1], c.seed, _num(res["final"]["test_bleu"]), f"{res['runtime_s']:.1f}"])
    (out / "sweep.csv").write_text(_csv(SWEEP_HEADER, rows))

    grid = {k: _median(v) for k, v in cells.items()}
    grid_rows = [[L, *(_num(grid.get((L, H))) for H in dims)] for L in layers]
    (out / "sweep_grid.csv").write_text(_csv(["L_B\\H_B", *map(str, dims)], grid_rows))
    summary = {
        "layers": list(layers),
        "dims": list(dims),
        "seeds": list(seeds),
        "grid": {f"{L}x{H}": grid.get((L, H)) for L in layers for H in dims},
        "trend": count_inversions(grid, layers, dims),
        "total_runtime_s": total,
        "failures": failures,
    }
    (out / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


# -- baseline comparison -------------------------------------------------------------

def compare_baseline(cfg: RunConfig, seeds: Sequence[int], out_dir, jobs: int = 1,
                     baseline: RunConfig | None = None) -> dict:
    """Paired runs of M0 and a no-BERT baseline per seed.  ``baseline``
    overrides the comparison system (default: ``cfg`` with ``use_bert`` off)."""
    out = Path(out_dir)
    m0 = cfg.replace(variant="M0", use_bert=True)
    base = baseline or cfg.replace(use_bert=False)
    todo = [(m0.replace(seed=s), out / "runs" / f"M0_seed{s}") for s in seeds]
    base_name = BASELINE if baseline is None else "other"
    todo += [(base.replace(seed=s), out / "runs" / f"{base_name}_seed{s}") for s in seeds]
    results = run_jobs(todo, jobs)
    n = len(seeds)
    m0_res, base_res = results[:n], results[n:]
    for (c, d), res in zip(todo, results):
        if "error" not in res:
            _write_curves(out, d.name, res)

    def score(r):
        return None if "error" in r else r["final"]["test_bleu"]

    diffs = [None if score(a) is None or score(b) is None else score(a) - score(b)
             for a, b in zip(m0_res, base_res)]
    report = {
        "seeds": list(seeds),
        "m0_test_bleu": [score(r) for r in m0_res],
        "baseline_test_bleu": [score(r) for r in base_res],
        "differences": diffs,
        "median_difference": _median(diffs),
        "m0_phases": [r.get("phases") for r in m0_res],
        "m0_phase3": [r.get("phase3") for r in m0_res],
        "failures": [r for r in results if "error" in r],
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.json").write_text(json.dumps(report, indent=2) + "\n")
    return report
