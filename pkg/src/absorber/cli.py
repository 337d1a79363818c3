"""Command-line entry point: ``absorber <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, gradcheck
from .absorption import absorb_context
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .config import RunConfig, RunConfigError, load_run_config
from .corpus import decode, encode, heldout_loss, load_corpus, pretrain_toy, pretraining_corpus, split_corpus
from .model import init_model
from .streaming import absorber_generate

log = logging.getLogger("absorber")


def _csv_list(kind):
    def parse(text):
        return [kind(v) for v in text.split(",") if v]
    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="absorber", description="Context absorption toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (default: config out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="<command>")

    p = sub.add_parser("train-toy", parents=[common], help="pretrain a toy model and write a checkpoint")
    p.add_argument("--corpus", help="UTF-8 text file mixed with generated recall text")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("absorb", parents=[common], help="run one absorption and print its report")
    p.add_argument("--checkpoint")
    p.add_argument("--context", help="text to absorb (X); sets n")
    p.add_argument("--continuation", help="synchronization text (Y); sets m")

    p = sub.add_parser("stream", parents=[common], help="streaming deduction over a prompt file")
    p.add_argument("--checkpoint")
    p.add_argument("--prompt-file")
    p.add_argument("--max-new-tokens", type=int)

    p = sub.add_parser("bench-latency", parents=[common], help="per-token latency sweep over N")
    p.add_argument("--checkpoint")
    p.add_argument("--modes", type=_csv_list(str))
    p.add_argument("--N", dest="N", type=_csv_list(int))
    p.add_argument("--K-gen", dest="K_gen", type=int)
    p.add_argument("--trials", type=int)

    p = sub.add_parser("ablate", parents=[common], help="ablation grid runner")
    p.add_argument("--checkpoint")
    p.add_argument("--grid", help='JSON object, e.g. {"alignment_target": ["hidden_states", "token_distribution"]}')
    p.add_argument("--seeds", type=_csv_list(int))

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every primitive op")
    p.add_argument("--cases", type=int, default=100)

    p = sub.add_parser("inspect", parents=[common], help="dump a checkpoint header")
    p.add_argument("checkpoint")
    return parser


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _weights(args, cfg: RunConfig, seed: int):
    path = getattr(args, "checkpoint", None) or cfg.checkpoint
    if path:
        return load_checkpoint(path)[0]
    log.info("no checkpoint given; using a freshly initialized model (seed %d)", seed)
    return init_model(cfg.model, seed)


def cmd_train_toy(args, cfg, seed):
    corpus_path = args.corpus or cfg.corpus
    settings = cfg.pretrain
    steps = settings.steps if args.steps is None else args.steps
    synthetic = pretraining_corpus(settings.synthetic_docs, seed, settings.copy_fraction)
    corpus = (load_corpus(corpus_path) + b"\n" if corpus_path else b"") + synthetic
    weights = pretrain_toy(cfg.model, corpus, steps, seed, settings.seq_len, settings.batch_size, settings.lr,
                           settings.weight_decay,
                           callback=lambda s, l: log.info("step %d loss %.4f", s, l) if s % 100 == 0 else None)
    _, held = split_corpus(corpus)
    out = _out_dir(args, cfg) / "model.absb"
    save_checkpoint(weights, out, {"seed": seed, "steps": steps, "corpus": corpus_path})
    print(json.dumps({"checkpoint": str(out), "steps": steps,
                      "heldout_loss": heldout_loss(weights, held, settings.seq_len)}))


def cmd_absorb(args, cfg, seed):
    weights = _weights(args, cfg, seed)
    acfg = cfg.absorption
    if args.context is not None or args.continuation is not None:
        x, y = encode(args.context or ""), encode(args.continuation or "")
        acfg = acfg.replace(n=len(x), m=len(y))
    else:
        stream = bench.recall_stream(seed, acfg.n + acfg.m)
        x, y = stream[:acfg.n], stream[acfg.n:]
    _, report = absorb_context(weights, x, y, acfg, seed=seed)
    out = _out_dir(args, cfg)
    (out / "absorption.csv").write_text(report.to_csv())
    print(json.dumps(report.summary()))


def cmd_stream(args, cfg, seed):
    weights = _weights(args, cfg, seed)
    prompt_file = args.prompt_file or cfg.stream.prompt
    if not prompt_file:
        raise RunConfigError("stream needs --prompt-file (or stream.prompt in the config)")
    prompt = encode(Path(prompt_file).read_bytes())
    max_new = cfg.stream.max_new_tokens if args.max_new_tokens is None else args.max_new_tokens
    result = absorber_generate(weights, prompt, cfg.absorption, max_new, seed=seed)
    out = _out_dir(args, cfg)
    (out / "events.jsonl").write_text(result.event_log())
    sys.stdout.write(decode(result.tokens).decode("utf-8", errors="replace") + "\n")
    for event in result.events:
        if event.kind != "generated_token":
            print(event.to_json())


def cmd_bench_latency(args, cfg, seed):
    weights = _weights(args, cfg, seed)
    b = cfg.bench
    records = bench.latency_sweep(weights, args.modes or b.modes, args.N or b.N,
                                  args.K_gen or b.K_gen, args.trials or b.trials,
                                  cfg.absorption.n, cfg.absorption.m, seed)
    text = bench.latency_csv(records)
    (_out_dir(args, cfg) / "latency.csv").write_text(text)
    sys.stdout.write(text)


def cmd_ablate(args, cfg, seed):
    weights = _weights(args, cfg, seed)
    grid = json.loads(args.grid) if args.grid else cfg.ablation.grid
    seeds = args.seeds or cfg.seeds
    cells, table = bench.run_ablation_grid(grid, weights, seeds, cfg.absorption, cfg.ablation.holdout_len)
    out = _out_dir(args, cfg)
    (out / "ablation.md").write_text(table)
    (out / "ablation.csv").write_text(bench.cells_csv(cells))
    (out / "ablation.jsonl").write_text("".join(c.to_json() + "\n" for c in cells))
    sys.stdout.write(table)


def cmd_gradcheck(args, cfg, seed):
    results, elapsed = gradcheck.run_suite(args.cases, seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.op:<24} cases={r.cases} worst_rel_err={r.worst_error:.2e}")
    print(f"elapsed {elapsed:.1f}s")
    return 0 if all(r.passed for r in results) else 1


def cmd_inspect(args, cfg, seed):
    header, payload_start = read_header(args.checkpoint)
    header["payload_start"] = payload_start
    print(json.dumps(header, indent=2))


COMMANDS = {
    "train-toy": cmd_train_toy,
    "absorb": cmd_absorb,
    "stream": cmd_stream,
    "bench-latency": cmd_bench_latency,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config)
        seed = cfg.seed if args.seed is None else args.seed
        code = COMMANDS[args.command](args, cfg, seed)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
