"""``tempo`` command line: gen, train, eval, bench.

Exit codes: 0 success, 2 usage or configuration problem, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from tempo.config import PROFILES, RunConfig, load_config_file, parse_override, resolve
from tempo.errors import ContractError, FormatError, LimitError, NumericsError
from tempo.evaluate import evaluate_ordering, retrieval_topk, run_scaling
from tempo.synth import gen_dataset, read_dataset, read_header, write_dataset
from tempo.train import load_checkpoint, train

log = logging.getLogger("tempo")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
RETRIEVAL_SAMPLES = 4


class UsageError(Exception):
    pass


def _run_config(args) -> RunConfig:
    file_data = load_config_file(args.config) if args.config else None
    overrides = [parse_override(s) for s in args.set or []]
    return resolve(file_data, profile=args.profile, seed=args.seed, overrides=overrides)


def _read_samples(path):
    if not Path(path).is_file():
        raise UsageError(f"dataset not found: {path}")
    return read_dataset(path)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    n_seq = cfg.model.N_seq
    shape = (n_seq, cfg.scene.P, cfg.scene.D)
    train_set = gen_dataset(cfg.scene, cfg.data.n_train, n_seq)
    test_set = gen_dataset(cfg.scene, cfg.data.n_test, n_seq, start=cfg.data.n_train)
    write_dataset(out / "train.tmpo", train_set, shape=shape)
    write_dataset(out / "test.tmpo", test_set, shape=shape)
    print(f"wrote {out / 'train.tmpo'} ({len(train_set)} samples) and {out / 'test.tmpo'} ({len(test_set)} samples)")
    return EXIT_OK


def _check_dataset(path, cfg_model):
    h = read_header(path)
    if (h.P, h.D) != (cfg_model.P, cfg_model.D):
        raise UsageError(f"dataset {path} has P={h.P}, D={h.D}; model expects P={cfg_model.P}, D={cfg_model.D}")


def cmd_train(args) -> int:
    cfg = _run_config(args)
    samples = _read_samples(args.dataset)
    _check_dataset(args.dataset, cfg.model)
    eval_samples = None
    if args.eval_dataset:
        _check_dataset(args.eval_dataset, cfg.model)
        eval_samples = _read_samples(args.eval_dataset)
    resume = load_checkpoint(args.resume, expected=cfg.model) if args.resume else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    metrics = out / "metrics.jsonl"
    if resume is None:
        metrics.write_text("")

    def report(rec):
        log.info("epoch %d lr %.3g loss %.5f exact %.3f tau %.3f",
                 rec["epoch"], rec["lr"], rec["loss"], rec["exact_match"], rec["kendall_tau"])

    result = train(samples, cfg.model, cfg.train, eval_samples=eval_samples, checkpoint_dir=out,
                   metrics_path=metrics, resume=resume, on_epoch=report)
    if result.log:
        last = result.log[-1]
        print(f"epoch {last['epoch']}: exact_match={last['exact_match']:.4f} "
              f"kendall_tau={last['kendall_tau']:.4f} steps={last['steps']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    explicit = args.config or args.profile or args.set
    expected = _run_config(args).model if explicit else None
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint, expected=expected)
    model = ckpt.model_cfg
    samples = _read_samples(args.dataset)
    _check_dataset(args.dataset, model)
    ordering = evaluate_ordering(samples, ckpt.params, model)
    pool = [(frame, i) for i, s in enumerate(samples[:RETRIEVAL_SAMPLES]) for frame in s.frames]
    retrieval = {"k": 1, "pool_size": len(pool), "classes": min(len(samples), RETRIEVAL_SAMPLES),
                 "top1_raw": None, "top1_encoder": None}
    if len(pool) >= 2:
        # raw proposal features as defined, plus the encoder-token variant
        retrieval["top1_raw"] = retrieval_topk(pool, 1, ckpt.params, model)
        retrieval["top1_encoder"] = retrieval_topk(pool, 1, ckpt.params, model, use_encoder=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "ordering.json", ordering.to_dict())
    _dump(out / "retrieval.json", retrieval)
    print(json.dumps({"ordering": ordering.to_dict(), "retrieval": retrieval}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _run_config(args)
    n_list = [int(x) for x in args.n_list.split(",")] if args.n_list else list(cfg.bench.n_list)
    repeats = args.repeats if args.repeats is not None else cfg.bench.repeats
    measure_wall = cfg.bench.measure_wall and not args.no_wall
    report = run_scaling(cfg.model, n_list, repeats=repeats, measure_wall=measure_wall, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    (out / "scaling.csv").write_text(report.to_csv())
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--profile", choices=PROFILES, help="preset defaults (default: desk)")
    common.add_argument("--seed", type=int, help="run seed (u64)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                        help="override one config field; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tempo", description="Temporal-ordering pretext training on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="write train.tmpo and test.tmpo")

    t = sub.add_parser("train", parents=[common], help="train and write checkpoints and metrics.jsonl")
    t.add_argument("--dataset", required=True)
    t.add_argument("--eval-dataset", help="held-out set for per-epoch metrics")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", parents=[common], help="ordering and retrieval reports for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)

    b = sub.add_parser("bench", parents=[common], help="FLOP and wall-clock scaling in N")
    b.add_argument("--n-list", help="comma-separated sequence lengths")
    b.add_argument("--repeats", type=int)
    b.add_argument("--no-wall", action="store_true", help="count FLOPs only")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericsError as exc:
        print(f"tempo {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ContractError, FormatError, LimitError) as exc:
        print(f"tempo {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"tempo {args.command}: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
