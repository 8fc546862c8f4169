"""packfuse command line.

    packfuse eval --config cfg.json
    packfuse weights --prompt prompt.txt --config cfg.json
    packfuse align --ref v1.json --other v2.json [--out map.json]
    packfuse bench --k 2,3,5 --step 0.05 [--out bench.csv]
    packfuse serve-toy --model m.ngram --port 8000
    packfuse train --corpus corpus.txt --out m.ngram [--n 2 --k 1]
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import PackFuseError

log = logging.getLogger("packfuse")


def cmd_eval(args) -> int:
    from .config import load_config
    from .harness import SUMMARY_FIELDS, read_corpus, run_eval, summarize, summary_path, write_csv, write_records

    cfg = load_config(args.config)
    corpus_path = args.corpus or cfg.corpus
    if corpus_path is None:
        raise PackFuseError("no corpus: set 'corpus' in the config or pass --corpus")
    output = args.output or cfg.output
    records = run_eval(cfg, read_corpus(corpus_path))
    rows = summarize(records)
    if output:
        write_records(records, output, cfg.timings)
        write_csv(rows, cfg.summary or summary_path(output), SUMMARY_FIELDS)
        log.info("wrote %d records to %s", len(records), output)
    else:
        for rec in records:
            print(json.dumps(rec.to_json(cfg.timings), sort_keys=True))
    for row in rows:
        log.info("%-12s docs=%d mean eval PPL=%.4f", row["method"], row["docs"], row["mean_eval_ppl"])
    return 0


def cmd_weights(args) -> int:
    from .config import load_config
    from .harness import FusionRunner

    cfg = load_config(args.config)
    if args.method:
        cfg = cfg.model_copy(update={"method": args.method.split(",")})
        cfg = type(cfg).model_validate(cfg.model_dump())
    text = Path(args.prompt).read_text(encoding="utf-8").rstrip("\n")
    print(json.dumps(FusionRunner(cfg).prompt_weights(text), indent=2, sort_keys=True))
    return 0


def cmd_align(args) -> int:
    from .align import build_vocab_map
    from .scorer import Vocabulary

    vmap = build_vocab_map(Vocabulary.load(args.ref), Vocabulary.load(args.other))
    if args.out:
        vmap.save(args.out)
        log.info("wrote %d pairs to %s", vmap.ref_size, args.out)
    else:
        print(json.dumps(vmap.to_json()))
    return 0


def cmd_bench(args) -> int:
    from .bench import BENCH_FIELDS, bench_complexity
    from .harness import write_csv

    ks = [int(x) for x in args.k.split(",")]
    rows = bench_complexity(ks, args.step, t=args.tokens, vocab_size=args.vocab, seed=args.seed,
                            exhaustive_limit=args.exhaustive_limit)
    write_csv(rows, args.out or sys.stdout, BENCH_FIELDS)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .scorer import load_model
    from .service import create_app

    scorer = load_model(args.model)
    if args.name:
        scorer.name = args.name
    uvicorn.run(create_app(scorer), host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_train(args) -> int:
    from .harness import read_corpus
    from .scorer import Vocabulary, byte_vocabulary, tokenizer_for, train_ngram

    vocab = Vocabulary.load(args.vocab) if args.vocab else byte_vocabulary()
    tok = tokenizer_for(vocab)
    docs = [tok.encode(line) for line in read_corpus(args.corpus)]
    name = args.name or Path(args.out).stem
    model = train_ngram(docs, vocab, n=args.n, k=args.k, name=name)
    model.save(args.out)
    log.info("trained %d-gram %s on %d documents", args.n, name, len(docs))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="packfuse", description="Perplexity-weighted fusion of language models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="run the prompt/eval-split protocol over a corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", help="overrides the config's corpus")
    p.add_argument("--output", help="overrides the config's output (NDJSON)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("weights", help="print fusion weights for one prompt")
    p.add_argument("--prompt", required=True, help="text file holding the prompt")
    p.add_argument("--config", required=True)
    p.add_argument("--method", help="comma-separated methods; overrides the config")
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("align", help="build a MinED vocabulary map")
    p.add_argument("--ref", required=True)
    p.add_argument("--other", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("bench", help="count grid-search evaluations for several K")
    p.add_argument("--k", default="2,3,5")
    p.add_argument("--step", type=float, default=0.05)
    p.add_argument("--tokens", type=int, default=32)
    p.add_argument("--vocab", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exhaustive-limit", type=int, default=20000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve-toy", help="serve a model file over the logit wire protocol")
    p.add_argument("--model", required=True)
    p.add_argument("--name")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("train", help="train an add-k n-gram model on a corpus")
    p.add_argument("--corpus", required=True, help="one document per line")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--k", type=float, default=1.0)
    p.add_argument("--vocab", help="vocabulary JSON (default: bytes)")
    p.add_argument("--name")
    p.set_defaults(func=cmd_train)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (PackFuseError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
