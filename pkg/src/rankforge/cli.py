"""``rankforge`` command-line entry point.

Every command accepts ``--config FILE`` and ``--set key=value`` overrides and
writes its artifacts plus ``manifest.json`` and ``config.resolved`` to
``--out``. Failures print one line ``error[<category>]: <message>`` on stderr
and exit 2 (usage), 3 (input), 4 (numeric) or 5 (internal contract).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import checkpoint, repstore, synth
from .config import RunConfig, load_config
from .distill import TrainResult, train_student_tr, train_student_trmd, train_teacher
from .encoder import Vocabulary, tokenize
from .errors import ConfigError, InputError, NumericError, RankforgeError, UsageError
from .gradcheck import THRESHOLD, gradcheck
from .metrics import evaluate, make_run, read_run, write_run
from .model import TEACHER_KINDS, RankingModel
from .retrieval import BM25Index, read_corpus, read_qrels, read_queries, write_corpus, write_qrels, write_queries
from .task import RankingTask

log = logging.getLogger("rankforge")

LOSS_LOG_HEADER = "epoch\thard\tcls\trep\ttotal\tval_metric\n"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command: str, args: argparse.Namespace, cfg: RunConfig):
        self.command = command
        self.cfg = cfg
        self.out = Path(args.out)
        self.argv = list(args.argv)
        self.inputs: dict[str, str] = {}
        self.artifacts: dict[str, str] = {}

    def input(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"no such file {p}")
        self.inputs[str(p)] = _sha256(p)
        return p

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def wrote(self, name: str) -> None:
        self.artifacts[name] = _sha256(self.out / name)

    def write_text(self, name: str, text: str) -> None:
        self.path(name).write_bytes(text.encode("utf-8"))
        self.wrote(name)

    def finish(self) -> None:
        self.write_text("config.resolved", self.cfg.dumps())
        manifest = {"command": self.command, "argv": self.argv, "seed": self.cfg.seed,
                    "config": self.cfg.as_dict(), "inputs": self.inputs, "artifacts": self.artifacts}
        self.path("manifest.json").write_bytes((json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


# -- shared loading ---------------------------------------------------------------------


def _data(run: Run, *, qrels: bool = True):
    cfg = run.cfg
    cfg.check_paths("corpus", "queries", *(("qrels",) if qrels else ()))
    corpus = read_corpus(run.input(cfg.corpus))
    queries = read_queries(run.input(cfg.queries))
    return corpus, queries, (read_qrels(run.input(cfg.qrels)) if qrels else None)


def _vocab(run: Run, corpus, queries) -> Vocabulary:
    cfg = run.cfg
    if cfg.vocab:
        vocab = Vocabulary.load(run.input(cfg.vocab))
    else:
        vocab = Vocabulary.build([d.text for d in corpus] + list(queries.values()), cfg.vocab_size or None)
    vocab.save(run.path("vocab.txt"))
    run.wrote("vocab.txt")
    return vocab


def _task(run: Run) -> RankingTask:
    cfg = run.cfg
    corpus, queries, qrels = _data(run)
    vocab = _vocab(run, corpus, queries)
    index = BM25Index.build(corpus, cfg.bm25_k1, cfg.bm25_b)
    return RankingTask.build(corpus, queries, qrels, test_fold=cfg.test_fold, fold_seed=cfg.fold_seed,
                             sample_seed=cfg.seed, top_k=cfg.top_k, per_query=cfg.per_query, vocab=vocab,
                             max_len=cfg.max_len, index=index)


def _load_model(run: Run, path) -> RankingModel:
    return checkpoint.load(run.input(path))


def _save_training(run: Run, result: TrainResult, name: str, extra: dict | None = None) -> None:
    checkpoint.save(result.model, run.path(name))
    run.wrote(name)
    run.write_text("loss_log.tsv", LOSS_LOG_HEADER + result.log_text())
    summary = {"best_epoch": result.best_epoch, "best_val_metric": result.best_metric, **(extra or {})}
    run.write_text("train_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"best_epoch {result.best_epoch} val_p@{run.cfg.val_k} {result.best_metric:.6f}")


# -- commands ---------------------------------------------------------------------------


def cmd_synth(run: Run, args) -> None:
    c = synth.generate(args.kind, args.n_queries, args.n_docs, run.cfg.seed)
    write_corpus(c.corpus, run.path("corpus.jsonl"))
    write_queries(c.queries, run.path("queries.tsv"))
    write_qrels(c.qrels, run.path("qrels.txt"))
    for name in ("corpus.jsonl", "queries.tsv", "qrels.txt"):
        run.wrote(name)


def cmd_ingest(run: Run, args) -> None:
    corpus, queries, qrels = _data(run)
    vocab = _vocab(run, corpus, queries)
    unjudged = [q for q in queries if q not in qrels]
    stats = {"documents": len(corpus), "queries": len(queries), "judged_queries": len(queries) - len(unjudged),
             "vocabulary": vocab.size}
    run.write_text("ingest.json", json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(" ".join(f"{k}={v}" for k, v in stats.items()))


def cmd_index(run: Run, args) -> None:
    corpus = read_corpus(_corpus_only(run))
    index = BM25Index.build(corpus, run.cfg.bm25_k1, run.cfg.bm25_b)
    index.save(run.path("index.bmix"))
    run.wrote("index.bmix")
    print(f"indexed {index.N} documents, {len(index.postings)} terms")


def _corpus_only(run: Run) -> Path:
    run.cfg.check_paths("corpus")
    return run.input(run.cfg.corpus)


def cmd_train_teacher(run: Run, args) -> None:
    task = _task(run)
    ecfg = run.cfg.encoder_config(task.vocab.size)
    result = train_teacher(args.kind, task, run.cfg.trainer_config(), ecfg,
                           combiner_activation=run.cfg.combiner_activation)
    _save_training(run, result, "teacher.ckpt", {"kind": args.kind})


def cmd_train_trmd(run: Run, args) -> None:
    cross = _load_model(run, args.cross_teacher)
    bi = _load_model(run, args.bi_teacher)
    if bi.config.bi_ranker is None:
        raise ConfigError("--bi-teacher must be a twin_bi or colbert_bi checkpoint")
    task = _task(run)
    ecfg = run.cfg.encoder_config(task.vocab.size)
    result = train_student_trmd(args.student_mode, bi.config.bi_ranker, cross, bi, task, run.cfg.trainer_config(),
                                ecfg, combiner_activation=run.cfg.combiner_activation)
    _save_training(run, result, "student.ckpt", {"teacher_checksums": result.teacher_checksums,
                                                 "student_mode": args.student_mode,
                                                 "bi_ranker": bi.config.bi_ranker})


def cmd_train_tr(run: Run, args) -> None:
    task = _task(run)
    ecfg = run.cfg.encoder_config(task.vocab.size)
    result = train_student_tr(args.student_mode, args.bi_ranker, task, run.cfg.trainer_config(), ecfg,
                              combiner_activation=run.cfg.combiner_activation)
    _save_training(run, result, "student.ckpt", {"student_mode": args.student_mode, "bi_ranker": args.bi_ranker})


def _model_vocab(run: Run, model: RankingModel) -> Vocabulary:
    run.cfg.check_paths("vocab")
    vocab = Vocabulary.load(run.input(run.cfg.vocab))
    if vocab.size != model.config.encoder.vocab_size:
        raise ConfigError(f"vocabulary has {vocab.size} entries, model expects {model.config.encoder.vocab_size}")
    return vocab


def cmd_precompute(run: Run, args) -> None:
    model = _load_model(run, args.model)
    vocab = _model_vocab(run, model)
    corpus = read_corpus(_corpus_only(run))
    store = repstore.precompute(model, corpus, vocab, args.dtype)
    store.save(run.path("store.drep"))
    run.wrote("store.drep")
    print(f"stored {len(store)} documents fingerprint {store.fingerprint:016x}")


def _candidates(run: Run, queries, corpus, index_path=None) -> dict[str, list[str]]:
    if index_path:
        index = BM25Index.load(run.input(index_path))
    else:
        index = BM25Index.build(corpus, run.cfg.bm25_k1, run.cfg.bm25_b)
    return {q: [d for d, _ in index.topk(text, run.cfg.top_k)] for q, text in queries.items()}


def cmd_rerank(run: Run, args) -> None:
    model = _load_model(run, args.model)
    vocab = _model_vocab(run, model)
    corpus, queries, _ = _data(run, qrels=False)
    candidates = _candidates(run, queries, corpus, args.index)
    out = []
    if args.store:
        store = repstore.DocRepStore.load(run.input(args.store))
        for qid in sorted(queries):
            out.extend(repstore.rerank(model, store, qid, queries[qid], candidates[qid], vocab, args.tag))
    else:
        docs = {d.doc_id: d.text for d in corpus}
        max_tokens = model.config.encoder.max_len - 2
        for qid in sorted(queries):
            cands = candidates[qid]
            scores = model.score_pairs(tokenize(queries[qid], vocab, max_tokens),
                                       [tokenize(docs[d], vocab, max_tokens) for d in cands])
            out.extend(make_run(qid, zip(cands, scores.tolist()), args.tag))
    write_run(out, run.path("run.trec"))
    run.wrote("run.trec")
    print(f"reranked {len(queries)} queries")


def cmd_eval(run: Run, args) -> None:
    value = evaluate(read_run(run.input(args.run)), read_qrels(run.input(args.qrels)), args.metric)
    print(f"{args.metric} {value:.6f}")
    if args.out_given:
        run.write_text("eval.txt", f"{args.metric}\t{value!r}\n")


def cmd_gradcheck(run: Run, args) -> None:
    cfg = run.cfg
    ecfg = cfg.encoder_config(cfg.vocab_size or 30)
    report = gradcheck(ecfg, seed=cfg.seed, max_coords=args.max_coords or None)
    for line in report.lines():
        print(line)
    run.write_text("gradcheck.txt", "\n".join(report.lines()) + "\n")
    if not report.ok:
        raise NumericError(f"max relative error {report.max_rel_error:.3e} exceeds {THRESHOLD:g}")


def cmd_bench(run: Run, args) -> None:
    bi = _load_model(run, args.bi_model)
    cross = _load_model(run, args.cross_model)
    vocab = _model_vocab(run, bi)
    corpus, queries, _ = _data(run, qrels=False)
    store = repstore.DocRepStore.load(run.input(args.store))
    candidates = _candidates(run, queries, corpus)
    report = repstore.timing_report(bi, cross, store, queries, candidates, {d.doc_id: d.text for d in corpus}, vocab)
    print(report.table())
    run.write_text("bench.txt", report.table() + "\n")


# -- argument parsing -------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", required=out_required, default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--corpus")
    p.add_argument("--queries")
    p.add_argument("--qrels")
    p.add_argument("--vocab")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rankforge", description="Two-ranker multi-teacher distillation for re-ranking.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic corpus, queries and qrels")
    _common(p)
    p.add_argument("--kind", choices=("lexical", "interaction"), required=True)
    p.add_argument("--n-queries", type=int, default=50)
    p.add_argument("--n-docs", type=int, default=500)

    p = sub.add_parser("ingest", help="validate inputs and build the vocabulary")
    _common(p)
    p = sub.add_parser("index", help="build a BM25 index")
    _common(p)

    p = sub.add_parser("train-teacher", help="fine-tune one teacher")
    _common(p)
    p.add_argument("--kind", choices=TEACHER_KINDS, required=True)

    p = sub.add_parser("train-trmd", help="train a TRMD student against frozen teachers")
    _common(p)
    p.add_argument("--cross-teacher", required=True)
    p.add_argument("--bi-teacher", required=True)
    p.add_argument("--student-mode", choices=("bi", "cross"), default="bi")

    p = sub.add_parser("train-tr", help="train the two-ranker student without distillation")
    _common(p)
    p.add_argument("--bi-ranker", choices=("twin", "colbert"), required=True)
    p.add_argument("--student-mode", choices=("bi", "cross"), default="bi")

    p = sub.add_parser("precompute", help="store document representations of a bi-encoder model")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--dtype", choices=("f8", "f4"), default="f8")

    p = sub.add_parser("rerank", help="re-rank BM25 candidates and write a TREC run")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--store")
    p.add_argument("--index")
    p.add_argument("--tag", default="rankforge")

    p = sub.add_parser("eval", help="evaluate a run file")
    _common(p, out_required=False)
    p.add_argument("--run", required=True)
    p.add_argument("--metric", required=True, help="p@k or ndcg@k")

    p = sub.add_parser("gradcheck", help="autodiff vs finite differences")
    _common(p, out_required=False)
    p.add_argument("--max-coords", type=int, default=12, help="coordinates probed per tensor (0 = all)")

    p = sub.add_parser("bench", help="scoring latency with and without stored representations")
    _common(p)
    p.add_argument("--bi-model", required=True)
    p.add_argument("--cross-model", required=True)
    p.add_argument("--store", required=True)
    return parser


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "index": cmd_index, "train-teacher": cmd_train_teacher,
    "train-trmd": cmd_train_trmd, "train-tr": cmd_train_tr, "precompute": cmd_precompute, "rerank": cmd_rerank,
    "eval": cmd_eval, "gradcheck": cmd_gradcheck, "bench": cmd_bench,
}


def _resolve(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for key in ("corpus", "queries", "qrels", "vocab", "seed"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if args.config and not Path(args.config).is_file():
        raise ConfigError(f"no such config file {args.config}")
    return load_config(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        args.argv = argv
        args.out_given = args.out is not None
        if args.out is None:
            args.out = "."
        cfg = _resolve(args)
        run = Run(args.command, args, cfg)
        COMMANDS[args.command](run, args)
        if args.out_given:
            run.finish()
        return 0
    except RankforgeError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error[input]: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - last-resort contract boundary
        print(f"error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
