"""Optimisation: Adam, the inverse-sqrt schedule, gradient accumulation,
checkpoint files and averaging, and the three-phase training driver."""
from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .bleu import bleu
from .data import batch_iterator
from .decode import BeamConfig, translate
from .jamodel import (
    BertJamModel,
    compensated_alpha_names,
    evaluating,
    set_phase,
)
from .numkernel import NumericalError, RngStream

log = logging.getLogger(__name__)

METRICS_HEADER = ["phase", "epoch", "step", "lr", "train_loss", "valid_loss", "valid_bleu"]


class TrainingDivergence(NumericalError):
    def __init__(self, phase: str, message: str):
        super().__init__(f"phase {phase}: {message}")
        self.phase = phase


# -- learning rate ----------------------------------------------------------------

def lr_at(step: int, warmup: int = 4000, peak: float = 5e-4, init: float = 1e-7) -> float:
    """Linear warmup from ``init`` to ``peak`` over ``warmup`` steps, then
    ``peak * sqrt(warmup) / sqrt(step)``."""
    if step < 1:
        raise ValueError(f"learning-rate step must be >= 1, got {step}")
    if step >= warmup:
        return peak * (math.sqrt(warmup) / math.sqrt(step))
    return init + (peak - init) * (step / warmup)


@dataclass
class LrSchedule:
    warmup: int = 4000
    peak: float = 5e-4
    init: float = 1e-7

    def __call__(self, step: int) -> float:
        return lr_at(step, self.warmup, self.peak, self.init)


# -- Adam -------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], step: int) -> "AdamState":
        st = cls(step=step)
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            (st.m if kind == "m" else st.v)[name] = arr.copy()
        return st


def adam_step(named_params: Sequence[tuple[str, nk.Parameter]], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update of every trainable parameter from its ``.grad``."""
    live = [(n, p) for n, p in named_params if p.trainable]
    for name, p in live:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            bad = int(np.size(p.grad) - np.isfinite(p.grad).sum())
            raise NumericalError(f"non-finite gradient in parameter {name!r} ({bad} entries)")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in live:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- checkpoint files ---------------------------------------------------------------

MAGIC = b"BJAMCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    weights: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    rng_state: dict | None = None
    optim: dict[str, np.ndarray] = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    records = []
    blobs = []
    for section, arrays in (("param", ckpt.weights), ("optim", ckpt.optim)):
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            records.append({"name": name, "section": section, "shape": list(arr.shape)})
            blobs.append(arr.tobytes(order="C"))
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "rng_state": ckpt.rng_state,
        "records": records,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError("not a bertjam checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(raw[start: start + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    offset = start + hlen
    weights, optim = {}, {}
    for rec in header["records"]:
        count = int(np.prod(rec["shape"])) if rec["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        arr = arr.reshape(tuple(rec["shape"])).astype(np.float64)
        offset += 8 * count
        (weights if rec["section"] == "param" else optim)[rec["name"]] = arr
    return Checkpoint(weights, header["config"], header["meta"], header["rng_state"], optim)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode_checkpoint(ckpt))
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def canonical_weights(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    """Weights with any active x2 compensation folded into alpha."""
    out = dict(ckpt.weights)
    for name in ckpt.meta.get("compensated", []):
        out[name] = out[name] * 2.0
    return out


def average_checkpoints(checkpoints: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Entrywise arithmetic mean, computed as first + mean of differences so
    that identical inputs come back bit-identical."""
    if not checkpoints:
        raise ValueError("nothing to average")
    first = checkpoints[0]
    names = list(first)
    for i, ck in enumerate(checkpoints[1:], 1):
        if list(ck) != names:
            diff = sorted(set(ck) ^ set(names)) or [n for n, m in zip(names, ck) if n != m]
            raise ValueError(f"checkpoint {i} parameter names differ (first: {diff[0]!r})")
        for n in names:
            if ck[n].shape != first[n].shape:
                raise ValueError(f"checkpoint {i} shape mismatch for {n!r}: {ck[n].shape} vs {first[n].shape}")
    k = len(checkpoints)
    out = {}
    for n in names:
        base = first[n]
        acc = np.zeros_like(base)
        for ck in checkpoints[1:]:
            acc += ck[n] - base
        out[n] = base + acc / k
    return out


class CheckpointStore:
    """Ring of the last ``window`` epoch checkpoints (on disk when ``directory`` is set)."""

    def __init__(self, directory=None, window: int = 5):
        if window < 1:
            raise ValueError("averaging window must be >= 1")
        self.directory = Path(directory) if directory is not None else None
        self.window = window
        self.entries: list[tuple[str, Checkpoint]] = []

    def add(self, tag: str, ckpt: Checkpoint) -> None:
        if self.directory is not None:
            save_checkpoint(self.directory / f"{tag}.ckpt", ckpt)
        self.entries.append((tag, ckpt))
        while len(self.entries) > self.window:
            old, _ = self.entries.pop(0)
            if self.directory is not None:
                with contextlib.suppress(FileNotFoundError):
                    (self.directory / f"{old}.ckpt").unlink()

    def tags(self) -> list[str]:
        return [t for t, _ in self.entries]

    def restore(self, tags: Sequence[str]) -> None:
        self.entries = [(t, load_checkpoint(self.directory / f"{t}.ckpt")) for t in tags]

    def averaged(self) -> dict[str, np.ndarray]:
        return average_checkpoints([canonical_weights(c) for _, c in self.entries])


# -- plan -------------------------------------------------------------------------

@dataclass
class PhaseSpec:
    phase: int
    max_epochs: int
    rule: str = "converge"  # converge | fixed | early_stop
    label: str = ""

    def __post_init__(self):
        if self.rule not in ("converge", "fixed", "early_stop"):
            raise ValueError(f"unknown stopping rule {self.rule!r}")
        if not self.label:
            self.label = str(self.phase)


@dataclass
class PhasePlan:
    phases: list[PhaseSpec]
    accum: int = 1
    avg_window: int = 5
    patience: int = 2
    min_delta: float = 1e-3
    converge_epochs: int = 3
    max_tokens: int = 1024
    warmup: int = 400
    peak_lr: float = 5e-4
    init_lr: float = 1e-7
    reset_optimizer: bool = True
    beam: BeamConfig = field(default_factory=BeamConfig)
    valid_bleu: bool = True
    test_bleu_per_phase: bool = True

    def __post_init__(self):
        if self.avg_window < 1:
            raise ValueError("avg_window must be >= 1")
        if self.accum < 1:
            raise ValueError("accumulation count must be >= 1")
        for p in self.phases:
            if p.max_epochs < 1:
                raise ValueError(f"phase {p.label} needs a budget of at least one epoch")

    @classmethod
    def three_phase(cls, epochs=(8, 2, 2), **kw) -> "PhasePlan":
        e1, e2, e3 = epochs
        phases = [PhaseSpec(1, e1, "converge")]
        if e2 > 0:
            phases.append(PhaseSpec(2, e2, "converge"))
        if e3 > 0:
            phases.append(PhaseSpec(3, e3, "early_stop"))
        return cls(phases, **kw)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.warmup, self.peak_lr, self.init_lr)


@dataclass
class TrainData:
    train: list
    valid: list
    test: list


# -- evaluation helpers --------------------------------------------------------------

def evaluate_loss(model: BertJamModel, pairs, max_tokens: int = 4096) -> float:
    total, count = 0.0, 0
    with evaluating(model), nk.no_grad():
        for batch in batch_iterator(pairs, max_tokens):
            n = int(batch.tgt_mask.sum())
            total += model.loss(batch).item() * n
            count += n
    return total / count


def evaluate_bleu(model: BertJamModel, pairs, beam: BeamConfig | None = None, greedy_only: bool = False) -> float:
    srcs = [s for s, _ in pairs]
    with evaluating(model):
        hyps = translate(model, srcs, beam, greedy_only=greedy_only)
    return bleu([h.output for h in hyps], [t for _, t in pairs]).score


@contextlib.contextmanager
def swapped_weights(model: BertJamModel, weights: dict[str, np.ndarray]):
    """Temporarily load folded-form ``weights`` into ``model``."""
    saved = model.state_dict()
    flags = [(c, c.compensation_active, c.folded) for c in model.combiners()]
    model.load_state_dict(weights)
    for c, _, _ in flags:
        c.compensation_active = False
        c.folded = True
    try:
        yield model
    finally:
        model.load_state_dict(saved)
        for c, comp, folded in flags:
            c.compensation_active, c.folded = comp, folded


# -- training driver ------------------------------------------------------------------

@dataclass
class RunState:
    phase_idx: int = 0
    epoch_in_phase: int = 0
    global_epoch: int = 0
    step: int = 0
    adam_step: int = 0
    best_valid: float = math.inf
    since_best: int = 0
    best_avg: float = math.inf
    since_best_avg: int = 0
    best_avg_epoch: int = 0
    phase_avg_losses: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    curves: list = field(default_factory=list)
    phase_reports: list = field(default_factory=list)
    ring: list = field(default_factory=list)
    done: bool = False

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("best_valid", "best_avg"):
            if math.isinf(d[k]):
                d[k] = None
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunState":
        d = dict(d)
        for k in ("best_valid", "best_avg"):
            if d[k] is None:
                d[k] = math.inf
        return cls(**d)


@dataclass
class RunResult:
    weights: dict
    report: dict
    metrics: list
    curves: list


def fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float):
        return repr(round(x, 10))
    return str(x)


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([fmt(r.get(k)) for k in METRICS_HEADER])
    return buf.getvalue()


CURVE_HEADER = ["epoch", "phase", "train_loss", "valid_loss", "avg_valid_loss", "valid_bleu"]


def curves_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    for r in rows:
        w.writerow([fmt(r.get(k)) for k in CURVE_HEADER])
    return buf.getvalue()


def train_epoch(model: BertJamModel, named, batches, adam: AdamState, schedule, step: int, accum: int = 1,
                drop_rng=None, label: str = "") -> tuple[int, float, float]:
    """One pass over ``batches``; gradients of ``accum`` consecutive batches are
    averaged before each Adam update.  Returns (step, last lr, token-mean loss)."""
    total, count, pending = 0.0, 0, 0
    lr = schedule(max(step, 1))
    for bi, batch in enumerate(batches):
        loss = model.loss(batch, drop_rng)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergence(label, f"non-finite training loss at step {step + 1}")
        loss.backward()
        n = int(batch.tgt_mask.sum())
        total += value * n
        count += n
        pending += 1
        if pending == accum or bi == len(batches) - 1:
            if pending > 1:
                for _, p in named:
                    if p.trainable:
                        p.grad /= pending
            step += 1
            lr = schedule(step)
            try:
                adam_step(named, adam, lr)
            except NumericalError as exc:
                raise TrainingDivergence(label, str(exc)) from exc
            model.zero_grad()
            pending = 0
    return step, lr, total / count


class Interrupted(RuntimeError):
    """Raised by the ``stop_after`` hook to simulate a killed run."""


def run_three_phase(
    plan: PhasePlan,
    model: BertJamModel,
    data: TrainData,
    seed: int = 0,
    run_dir=None,
    resume: bool = False,
    stop_after: int | None = None,
    config: dict | None = None,
) -> RunResult:
    """Execute the phases of ``plan`` in order and return the evaluation model.

    Phases with rule ``converge`` stop after ``converge_epochs`` epochs without
    a validation improvement larger than ``min_delta``.  A phase with rule
    ``early_stop`` averages the last ``avg_window`` checkpoints after every
    epoch and stops once that average has not improved for ``patience``
    epochs; its best average is the returned model.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    store = CheckpointStore(run_dir / "checkpoints" if run_dir else None, plan.avg_window)
    schedule = plan.schedule()
    shuffle_rng = RngStream(seed, nk.STREAM_SHUFFLE).generator()
    drop_rng = RngStream(seed, nk.STREAM_DROPOUT).generator()
    st = RunState()
    adam = AdamState()
    best_avg_weights: dict | None = None
    config = config or {}

    if resume:
        if run_dir is None:
            raise ValueError("resume needs a run directory")
        latest = run_dir / "checkpoints" / "latest.json"
        if latest.exists():
            tag = json.loads(latest.read_text())["tag"]
            ck = load_checkpoint(run_dir / "checkpoints" / f"{tag}.ckpt")
            st = RunState.from_json(ck.meta["run_state"])
            model.load_state_dict(ck.weights)
            for c, (comp, folded) in zip(model.combiners(), ck.meta["combiner_flags"]):
                c.compensation_active, c.folded = comp, folded
            shuffle_rng.bit_generator.state = ck.rng_state["shuffle"]
            drop_rng.bit_generator.state = ck.rng_state["dropout"]
            adam = AdamState.from_arrays(ck.optim, st.adam_step)
            store.restore(st.ring)
            best_path = run_dir / "checkpoints" / "best_avg.ckpt"
            if best_path.exists():
                best_avg_weights = load_checkpoint(best_path).weights
            if st.phase_idx < len(plan.phases) and st.epoch_in_phase > 0:
                set_phase(model, plan.phases[st.phase_idx].phase)

    named = list(model.named_parameters())
    while not st.done and st.phase_idx < len(plan.phases):
        spec = plan.phases[st.phase_idx]
        if st.epoch_in_phase == 0:
            set_phase(model, spec.phase)
            if plan.reset_optimizer or st.phase_idx == 0:
                adam = AdamState()
            st.best_valid, st.since_best = math.inf, 0
            st.best_avg, st.since_best_avg, st.phase_avg_losses = math.inf, 0, []
        # -- one epoch
        model.train()
        batches = batch_iterator(data.train, plan.max_tokens, shuffle_rng, shuffle=True)
        st.step, lr, train_loss = train_epoch(model, named, batches, adam, schedule, st.step, plan.accum,
                                              drop_rng, spec.label)
        st.adam_step = adam.step
        valid_loss = evaluate_loss(model, data.valid)
        if not math.isfinite(valid_loss):
            raise TrainingDivergence(spec.label, "non-finite validation loss")
        valid_bleu = evaluate_bleu(model, data.valid, greedy_only=True) if plan.valid_bleu else None
        st.global_epoch += 1
        st.epoch_in_phase += 1
        tag = f"epoch{st.global_epoch:04d}"
        store.add(tag, Checkpoint(model.state_dict(), meta={"compensated": compensated_alpha_names(model)}))
        st.ring = store.tags()
        row = {
            "phase": spec.label, "epoch": st.global_epoch, "step": st.step, "lr": lr,
            "train_loss": train_loss, "valid_loss": valid_loss, "valid_bleu": valid_bleu,
        }
        st.metrics.append(row)
        curve = dict(row)
        log.info("phase %s epoch %d train %.4f valid %.4f bleu %s", spec.label, st.global_epoch,
                 train_loss, valid_loss, valid_bleu)

        # -- stopping rules
        stop, reason = False, "budget"
        if spec.rule == "converge":
            if valid_loss < st.best_valid - plan.min_delta:
                st.best_valid, st.since_best = valid_loss, 0
            else:
                st.since_best += 1
            if st.since_best >= plan.converge_epochs:
                stop, reason = True, "converged"
        elif spec.rule == "early_stop":
            avg = store.averaged()
            with swapped_weights(model, avg):
                avg_loss = evaluate_loss(model, data.valid)
            curve["avg_valid_loss"] = avg_loss
            st.phase_avg_losses.append(avg_loss)
            if avg_loss < st.best_avg:
                st.best_avg, st.since_best_avg, st.best_avg_epoch = avg_loss, 0, st.global_epoch
                best_avg_weights = avg
                if run_dir is not None:
                    save_checkpoint(run_dir / "checkpoints" / "best_avg.ckpt", Checkpoint(avg))
            else:
                st.since_best_avg += 1
            if st.since_best_avg >= plan.patience:
                stop, reason = True, "early_stop"
        st.curves.append(curve)
        if st.epoch_in_phase >= spec.max_epochs:
            stop = True

        if stop:
            st.phase_reports.append(_phase_report(model, spec, st, store, data, plan, reason, best_avg_weights))
            st.phase_idx += 1
            st.epoch_in_phase = 0
            st.done = st.phase_idx >= len(plan.phases)

        if run_dir is not None:
            _persist(run_dir, model, store, tag, st, adam, shuffle_rng, drop_rng, config)
        if stop_after is not None and st.global_epoch >= stop_after and not st.done:
            raise Interrupted(f"stopped after epoch {st.global_epoch}")

    last = plan.phases[-1]
    if last.rule == "early_stop" and best_avg_weights is not None:
        final = best_avg_weights
    else:
        final = store.averaged()
    report = {
        "phases": st.phase_reports,
        "total_epochs": st.global_epoch,
        "total_steps": st.step,
    }
    report.update(_fine_tune_summary(st.phase_reports))
    if run_dir is not None:
        (run_dir / "metrics.csv").write_text(metrics_csv(st.metrics))
    return RunResult(final, report, st.metrics, st.curves)


def _persist(run_dir: Path, model, store, tag, st: RunState, adam: AdamState, shuffle_rng, drop_rng, config) -> None:
    ckpt_dir = run_dir / "checkpoints"
    flags = [[c.compensation_active, c.folded] for c in model.combiners()]
    ck = store.entries[-1][1]
    full = Checkpoint(
        weights=ck.weights,
        config=config,
        meta={"compensated": ck.meta["compensated"], "combiner_flags": flags, "run_state": st.to_json()},
        rng_state={"shuffle": shuffle_rng.bit_generator.state, "dropout": drop_rng.bit_generator.state},
        optim=adam.arrays(),
    )
    store.entries[-1] = (tag, full)
    save_checkpoint(ckpt_dir / f"{tag}.ckpt", full)
    (ckpt_dir / "latest.json").write_text(json.dumps({"tag": tag}) + "\n")
    (run_dir / "metrics.csv").write_text(metrics_csv(st.metrics))


def _phase_report(model, spec: PhaseSpec, st: RunState, store: CheckpointStore, data: TrainData,
                  plan: PhasePlan, reason: str, best_avg_weights) -> dict:
    rows = [r for r in st.metrics if r["phase"] == spec.label]
    if spec.rule == "early_stop" and best_avg_weights is not None:
        weights = best_avg_weights
    else:
        weights = store.averaged()
    with swapped_weights(model, weights):
        avg_valid_loss = evaluate_loss(model, data.valid)
        valid_bleu = evaluate_bleu(model, data.valid, greedy_only=True)
        test_bleu = evaluate_bleu(model, data.test, plan.beam) if plan.test_bleu_per_phase else None
    rep = {
        "phase": spec.label,
        "epochs": len(rows),
        "stop_reason": reason,
        "end_valid_loss": rows[-1]["valid_loss"],
        "end_train_loss": rows[-1]["train_loss"],
        "avg_valid_loss": avg_valid_loss,
        "valid_bleu": valid_bleu,
        "test_bleu": test_bleu,
        "valid_losses": [r["valid_loss"] for r in rows],
    }
    if spec.rule == "early_stop":
        rep["avg_valid_losses"] = list(st.phase_avg_losses)
        rep["best_avg_epoch"] = st.best_avg_epoch
        rep["best_avg_valid_loss"] = st.best_avg
    return rep


def _fine_tune_summary(reports: list[dict]) -> dict:
    """Decline-then-rebound bookkeeping for the fine-tuning phase."""
    fine = [r for r in reports if "avg_valid_losses" in r]
    if not fine or len(reports) < 2:
        return {}
    p3 = fine[-1]
    prev = reports[reports.index(p3) - 1]
    before = prev["end_valid_loss"]
    return {
        "phase3": {
            "previous_phase_end_valid_loss": before,
            "previous_phase_avg_valid_loss": prev["avg_valid_loss"],
            "min_valid_loss": min(p3["valid_losses"]),
            "best_avg_valid_loss": p3["best_avg_valid_loss"],
            "dipped_below_previous": min(p3["valid_losses"]) < before,
            "best_avg_below_previous": p3["best_avg_valid_loss"] <= before,
            "rebound_detected": p3["stop_reason"] == "early_stop",
        }
    }


def train_phase(model: BertJamModel, data: TrainData, spec: PhaseSpec, plan: PhasePlan | None = None,
                seed: int = 0, run_dir=None) -> list[dict]:
    """Run a single phase (``set_phase`` applied inside) and return its metrics rows."""
    plan = plan or PhasePlan([spec])
    single = PhasePlan([spec], **{k: v for k, v in asdict(plan).items() if k not in ("phases", "beam")},
                       beam=plan.beam)
    return run_three_phase(single, model, data, seed, run_dir).metrics
