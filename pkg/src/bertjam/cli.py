"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .bleu import bleu
from .config import ConfigError, RunConfig
from .data import DataError, Vocab, generate_bitext, write_corpus
from .decode import BeamConfig, translate, write_hypotheses
from .harness import (
    beam_config,
    bert_config,
    compare_baseline,
    load_task,
    model_config,
    pretrain_bert,
    run_ablation,
    run_experiment,
    run_sweep,
    task_spec,
)
from .jamodel import BertJamModel, load_folded
from .microbert import MicroBert, mlm_accuracy
from .numkernel import DimensionError, NumericalError
from .trainer import Checkpoint, curves_csv, load_checkpoint, save_checkpoint

log = logging.getLogger("bertjam")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--desk", action="store_true", help="desk-scale preset used by the acceptance suite")
    p.add_argument("--config", type=Path, help="JSON file of config keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--task", choices=["cipher", "copy"])
    p.add_argument("--seed", type=int)
    p.add_argument("--phase-epochs", dest="phase_epochs")
    p.add_argument("--variant", choices=list(cfgmod.VARIANTS))


def _resolve(args) -> RunConfig:
    over = cfgmod.parse_overrides(args.set)
    for key in ("task", "seed", "phase_epochs", "variant"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    return cfgmod.build(args.desk, args.config, over)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bertjam", description="Desk-scale joint-attention translation experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic corpus")
    _config_args(g)
    g.add_argument("--out", type=Path, required=True)

    pt = sub.add_parser("pretrain", help="MLM-pretrain a micro-BERT")
    _config_args(pt)
    pt.add_argument("--data", type=Path, help="corpus directory from `gen` (default: generate in memory)")
    pt.add_argument("--out", type=Path, required=True, help="output checkpoint file")

    t = sub.add_parser("train", help="three-phase training run")
    _config_args(t)
    t.add_argument("--data", type=Path)
    t.add_argument("--bert", type=Path, help="pretrained micro-BERT checkpoint (default: pretrain inline)")
    t.add_argument("--out", type=Path, required=True, help="run directory")
    t.add_argument("--resume", action="store_true")

    d = sub.add_parser("decode", help="translate a source file with a trained run")
    d.add_argument("--run", type=Path, required=True, help="run directory holding final.ckpt")
    d.add_argument("--input", type=Path, required=True)
    d.add_argument("--out", type=Path, required=True)
    d.add_argument("--beam", type=int, default=None)
    d.add_argument("--penalty", type=float, default=None)
    d.add_argument("--greedy", action="store_true")

    b = sub.add_parser("bleu", help="score a hypothesis file")
    b.add_argument("hyp", type=Path)
    b.add_argument("ref", type=Path)
    b.add_argument("--out", type=Path, help="bleu.json path (default: next to the hypothesis file)")

    for name, helptext in (("ablate", "ablation variants M0-M3"), ("sweep", "micro-BERT size sweep"),
                           ("compare", "M0 against the no-BERT baseline")):
        h = sub.add_parser(name, help=helptext)
        _config_args(h)
        h.add_argument("--seeds", type=_seeds, default=None)
        h.add_argument("--jobs", type=int, default=1)
        h.add_argument("--out", type=Path, required=True)
    return p


# -- commands ---------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _resolve(args)
    spec = task_spec(cfg)
    bitext = generate_bitext(spec)  # validates before anything is written
    write_corpus(bitext, spec, args.out)
    print(f"wrote {len(bitext.train)}/{len(bitext.valid)}/{len(bitext.test)} pairs to {args.out}")
    return EXIT_OK


def _bert_checkpoint(bert: MicroBert, cfg: RunConfig, vocab: Vocab) -> Checkpoint:
    return Checkpoint(bert.state_dict(), config={"run": cfg.to_dict(), "bert": bert.config.to_dict()},
                      meta={"src_vocab": vocab.itos})


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    task = load_task(cfg, args.data)
    bert = pretrain_bert(cfg, task)
    acc = mlm_accuracy(bert, [s for s, _ in task.data.valid], cfg.seed)
    save_checkpoint(args.out, _bert_checkpoint(bert, cfg, task.src_vocab))
    print(json.dumps({"mlm_valid_accuracy": acc, "steps": cfg.bert_steps}))
    return EXIT_OK


def _load_bert(path: Path, cfg: RunConfig, vocab_size: int) -> MicroBert:
    if not path.exists():
        raise FileNotFoundError(f"micro-BERT checkpoint not found: {path}")
    ck = load_checkpoint(path)
    bert = MicroBert(bert_config(cfg, vocab_size), cfg.seed)
    bert.load_state_dict(ck.weights)
    bert.eval()
    return bert


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out: Path = args.out
    if args.data is not None and not args.data.exists():
        raise FileNotFoundError(f"corpus directory not found: {args.data}")
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, out)
    task = load_task(cfg, args.data)
    task.src_vocab.save(out / "vocab.src")
    task.tgt_vocab.save(out / "vocab.tgt")
    bert = _load_bert(args.bert, cfg, len(task.src_vocab)) if args.bert is not None else None
    exp = run_experiment(cfg, run_dir=out, task=task, bert=bert, resume=args.resume)
    meta = {"src_vocab": len(task.src_vocab), "tgt_vocab": len(task.tgt_vocab), "folded": True}
    save_checkpoint(out / "final.ckpt", Checkpoint(exp.weights, config=cfg.to_dict(), meta=meta))
    (out / "report.json").write_text(json.dumps(exp.report, indent=2) + "\n")
    (out / "curves.csv").write_text(curves_csv(exp.curves))
    print(json.dumps(exp.report["final"]))
    return EXIT_OK


def load_run(run_dir: Path) -> tuple[BertJamModel, RunConfig, Vocab, Vocab]:
    ck_path = run_dir / "final.ckpt"
    if not ck_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {ck_path}")
    ck = load_checkpoint(ck_path)
    cfg = RunConfig(**ck.config)
    src_vocab = Vocab.load(run_dir / "vocab.src")
    tgt_vocab = Vocab.load(run_dir / "vocab.tgt")
    mcfg = model_config(cfg, len(src_vocab), len(tgt_vocab))
    bert = MicroBert(bert_config(cfg, len(src_vocab)), cfg.seed) if cfg.use_bert else None
    model = BertJamModel(mcfg, bert, seed=cfg.seed)
    load_folded(model, ck.weights)
    model.eval()
    return model, cfg, src_vocab, tgt_vocab


def cmd_decode(args) -> int:
    model, cfg, src_vocab, tgt_vocab = load_run(args.run)
    if not args.input.exists():
        raise FileNotFoundError(f"input file not found: {args.input}")
    srcs = [src_vocab.encode(line.split()) for line in args.input.read_text().splitlines()]
    if args.beam is not None and args.beam < 1:
        raise UsageError("--beam must be >= 1")
    beam = beam_config(cfg)
    beam = BeamConfig(width=args.beam or beam.width,
                      penalty=beam.penalty if args.penalty is None else args.penalty, style=beam.style)
    hyps = translate(model, srcs, beam, greedy_only=args.greedy) if srcs else []
    write_hypotheses(args.out, [tgt_vocab.decode(h.output) for h in hyps])
    print(f"wrote {len(hyps)} hypotheses to {args.out}")
    return EXIT_OK


def cmd_bleu(args) -> int:
    for p in (args.hyp, args.ref):
        if not p.exists():
            raise FileNotFoundError(f"file not found: {p}")
    hyp = [line.split() for line in args.hyp.read_text().splitlines()]
    ref = [line.split() for line in args.ref.read_text().splitlines()]
    if len(hyp) != len(ref):
        raise DataError(f"{args.hyp} has {len(hyp)} lines but {args.ref} has {len(ref)}")
    report = bleu(hyp, ref)
    print(report)
    out = args.out or args.hyp.with_name("bleu.json")
    out.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK


def _harness(fn, default_seeds):
    def run(args) -> int:
        cfg = _resolve(args)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        args.out.mkdir(parents=True, exist_ok=True)
        cfgmod.write_resolved(cfg, args.out)
        summary = fn(cfg, args.seeds or default_seeds, args.out, jobs=args.jobs)
        print(json.dumps({k: v for k, v in summary.items() if k not in ("m0_phases", "m0_phase3")}, indent=2))
        return EXIT_OK
    return run


COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "decode": cmd_decode,
    "bleu": cmd_bleu,
    "ablate": _harness(run_ablation, [1, 2, 3]),
    "sweep": _harness(run_sweep, [1]),
    "compare": _harness(compare_baseline, [1, 2, 3]),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except KeyError as exc:
        print(f"checkpoint/config mismatch: {exc.args[0]}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, FileNotFoundError, DimensionError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
