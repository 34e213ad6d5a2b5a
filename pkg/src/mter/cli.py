"""Command-line pipeline: preprocess, train, recommend, explain, evaluate, permtest.

Every subcommand takes ``--seed``, ``--threads`` and ``--config``. Options
resolve in the order command-line flag, ``MTER_<NAME>`` environment
variable, ``--config`` file, built-in default. Training hyperparameters
use the :class:`~mter.training.TrainConfig` field names, e.g.
``MTER_T_ITER=5000`` or ``lambda_b = 0.5`` in a config file.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import (
    CorpusError, IndexedCorpus, load_lexicon, load_reviews, load_splits, recursive_filter,
    save_splits, split_corpus,
)
from .errors import CheckpointError, ConfigError, ShapeError, TrainingDivergence
from .evaluation import (
    DEFAULT_KS, bprmf_baseline, eval_content_prediction, eval_recommendation,
    most_popular_baseline, paired_ttest, permutation_test,
)
from .explain import DEFAULT_TEMPLATE, explain_item, recommend_topk, render_explanation
from .tensors import build_all
from .training import TrainConfig, lambda_for_phi, read_config_file, train

log = logging.getLogger("mter")

ENV_PREFIX = "MTER_"
DATA_SUBDIR = "data"
TRAIN_KEYS = tuple(k for k in TrainConfig().to_dict() if k != "seed")


class UsageError(Exception):
    """Bad combination of otherwise well-formed arguments."""


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"values must be positive integers, got {text!r}")
    return values


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS threads; 1 (default) gives fully deterministic runs")
    p.add_argument("--config", type=Path, default=None, help="key = value settings file")
    p.add_argument("--out", type=Path, default=None,
                   help="output path (directory for preprocess/train, JSON file for reports)")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_args(p: argparse.ArgumentParser, required=False):
    g = p.add_argument_group("input data")
    g.add_argument("--reviews", type=Path, help="reviews, JSON lines")
    g.add_argument("--lexicon", type=Path, help="sentiment lexicon, tab-separated")
    g.add_argument("--data", type=Path, help="directory written by 'preprocess'")
    g.add_argument("--max-rating", type=int, default=None, help="rating scale N (default 5)")
    g.add_argument("--min-feature-support", type=int, default=None)
    g.add_argument("--min-review-tuples", type=int, default=None)
    g.add_argument("--min-user-reviews", type=int, default=None)
    g.add_argument("--min-item-reviews", type=int, default=None)
    g.add_argument("--split", type=_float_list, default=None, help="train,valid,test ratios")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mter", description="Explainable recommendation by joint tensor factorization.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("preprocess", help="filter and split a review corpus")
    _common(p)
    _data_args(p)

    p = sub.add_parser("train", help="fit a model and write a checkpoint directory")
    _common(p)
    _data_args(p)
    for key in TRAIN_KEYS:
        p.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, default=None, metavar="V")
    p.add_argument("--phi", type=float, default=None,
                   help="set lambda_b from the relative ranking weight instead")

    p = sub.add_parser("recommend", help="top-K items for one user")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--k", type=int, default=None, help="list length (default 10)")

    p = sub.add_parser("explain", help="feature / phrase explanation for one user-item pair")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--item", required=True)
    p.add_argument("--features", type=int, default=None, help="features to show (default 3)")
    p.add_argument("--phrases", type=int, default=None, help="phrases per feature (default 3)")

    p = sub.add_parser("evaluate", help="NDCG report on a held-out split")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--k-list", type=_int_list, default=None, help="comma-separated K values")
    p.add_argument("--on", choices=("test", "valid"), default=None, help="held-out split (default test)")
    p.add_argument("--gain", choices=("exp", "linear"), default=None)
    p.add_argument("--baselines", action="store_true", help="also score MostPopular and BPRMF")

    p = sub.add_parser("permtest", help="opinion-phrase reuse permutation test")
    _common(p)
    _data_args(p)
    p.add_argument("--scope", choices=("user", "item"), default=None)
    p.add_argument("--n-perm", type=int, default=None, help="permutation count (default 100)")
    return parser


class Settings:
    """Layered lookup: flag, environment, config file, default."""

    def __init__(self, args, environ):
        self.args = args
        self.environ = environ
        self.file = read_config_file(args.config) if args.config is not None else {}

    def get(self, name: str, default=None, conv=str, flag=None):
        flag = flag or name
        value = getattr(self.args, flag, None)
        if value is not None:
            return value
        env = self.environ.get(ENV_PREFIX + name.upper())
        raw = env if env is not None else self.file.get(name)
        if raw is None:
            return default
        try:
            return conv(raw)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"bad value for {name}: {raw!r} ({exc})") from None

    def train_config(self) -> TrainConfig:
        values = {"seed": self.get("seed", 0, int)}
        for key in TRAIN_KEYS:
            v = self.get(key, None, str, flag="cfg_" + key)
            if v is not None:
                values[key] = v
        return TrainConfig.from_dict(values)


def _emit(payload: dict, out: Path | None, stdout):
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if out is None:
        stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")


def _load_data(args, st: Settings, seed: int):
    """Return ``(lexicon, (train, valid, test))`` from raw files or a preprocessed directory."""
    data = st.get("data", None, Path)
    if data is not None:
        if args.reviews is not None or args.lexicon is not None:
            raise UsageError("--data cannot be combined with --reviews / --lexicon")
        return load_splits(data)
    reviews_path = st.get("reviews", None, Path)
    lexicon_path = st.get("lexicon", None, Path)
    if reviews_path is None or lexicon_path is None:
        raise UsageError("need either --data or both --reviews and --lexicon")
    n_max = st.get("max_rating", 5, int, flag="max_rating")
    lexicon = load_lexicon(lexicon_path)
    records = load_reviews(reviews_path, lexicon, n_max)
    corpus = recursive_filter(
        records,
        st.get("min_feature_support", 2, int),
        st.get("min_review_tuples", 1, int),
        st.get("min_user_reviews", 2, int),
        st.get("min_item_reviews", 2, int),
        n_max,
    )
    ratios = st.get("split", (0.8, 0.1, 0.1), _float_list)
    return lexicon, split_corpus(corpus, ratios, seed)


def _check_out_dir(path: Path):
    if path.exists() and not path.is_dir():
        raise UsageError(f"output path {path} exists and is not a directory")


def cmd_preprocess(args, st: Settings, stdout):
    if args.out is None:
        raise UsageError("preprocess needs --out DIR")
    seed = st.get("seed", 0, int)
    lexicon, splits = _load_data(args, st, seed)
    _check_out_dir(args.out)
    save_splits(args.out, lexicon, splits)
    stdout.write(json.dumps(_summary(splits), sort_keys=True) + "\n")


def _summary(splits) -> dict:
    train_part = splits[0]
    return {
        "m": train_part.m, "n": train_part.n, "p": train_part.p, "q": train_part.q,
        "reviews": {name: len(part.reviews) for name, part in zip(("train", "valid", "test"), splits)},
    }


def cmd_train(args, st: Settings, stdout):
    if args.out is None:
        raise UsageError("train needs --out DIR")
    cfg = st.train_config()
    seed = cfg.seed
    lexicon, splits = _load_data(args, st, seed)
    train_part = splits[0]
    phi = st.get("phi", None, float)
    if phi is not None:
        if phi < 0:
            raise ConfigError("phi must be >= 0")
        cfg = replace(cfg, lambda_b=lambda_for_phi(phi, cfg, train_part.m, train_part.n))
    tensors = build_all(train_part)
    _check_out_dir(args.out)
    model, trace = train(tensors, cfg)
    ckpt = Checkpoint(model, train_part.users, train_part.items, train_part.features,
                      train_part.opinions, train_part.max_rating, cfg.to_dict())
    save_checkpoint(ckpt, args.out)
    save_splits(args.out / DATA_SUBDIR, lexicon, splits)
    with open(args.out / "trace.json", "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in trace], fh, sort_keys=True)
        fh.write("\n")
    summary = _summary(splits)
    summary["final_loss"] = trace[-1].to_dict() if trace else None
    stdout.write(json.dumps(summary, sort_keys=True) + "\n")


def _load_with_data(path: Path) -> tuple[Checkpoint, tuple[IndexedCorpus, ...]]:
    ckpt = load_checkpoint(path)
    _, splits = load_splits(path / DATA_SUBDIR)
    if splits[0].users != ckpt.users or splits[0].items != ckpt.items:
        raise CheckpointError(f"stored data in {path / DATA_SUBDIR} does not match the checkpoint ids")
    return ckpt, splits


def _index(corpus: IndexedCorpus, name: str, kind="users") -> int:
    try:
        return corpus.index_of(kind, name)
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None


def cmd_recommend(args, st: Settings, stdout):
    k = st.get("k", 10, int)
    if k < 1:
        raise ConfigError("--k must be >= 1")
    ckpt, (train_part, _, _) = _load_with_data(args.ckpt)
    u = _index(train_part, args.user)
    seen = train_part.items_by_user()[u]
    lines = [
        f"{rank}\t{ckpt.items[j]}\t{score:.6f}"
        for rank, (j, score) in enumerate(recommend_topk(ckpt.model, u, seen, k), 1)
    ]
    text = "\n".join(lines) + "\n"
    if args.out is None:
        stdout.write(text)
    else:
        args.out.write_text(text, encoding="utf-8")


def cmd_explain(args, st: Settings, stdout):
    top_f = st.get("features", 3, int)
    top_w = st.get("phrases", 3, int)
    if top_f < 1 or top_w < 1:
        raise ConfigError("--features and --phrases must be >= 1")
    ckpt = load_checkpoint(args.ckpt)
    names = IndexedCorpus(ckpt.users, ckpt.items, ckpt.features, ckpt.opinions, [], ckpt.max_rating)
    u = _index(names, args.user)
    j = _index(names, args.item, "items")
    parts = [
        (ckpt.features[fe.feature], [ckpt.opinions[w] for w, _ in fe.phrases])
        for fe in explain_item(ckpt.model, u, j, top_f, top_w)
    ]
    text = render_explanation(ckpt.items[j], parts, DEFAULT_TEMPLATE) + "\n"
    if args.out is None:
        stdout.write(text)
    else:
        args.out.write_text(text, encoding="utf-8")


def cmd_evaluate(args, st: Settings, stdout):
    ks = st.get("k_list", list(DEFAULT_KS), _int_list)
    on = st.get("on", "test")
    gain = st.get("gain", "exp")
    ckpt, (train_part, valid_part, test_part) = _load_with_data(args.ckpt)
    held = test_part if on == "test" else valid_part
    rec = eval_recommendation(ckpt.model, train_part, held, ks, gain)
    content = eval_content_prediction(ckpt.model, held)
    rec.feature_ndcg, rec.opinion_ndcg = content.feature_ndcg, content.opinion_ndcg
    report = {"split": on, "gain": gain, "mter": rec.to_dict()}
    if args.baselines:
        cfg = TrainConfig.from_dict({k: v for k, v in ckpt.config.items()})
        k0 = ks[0]
        baselines = {
            "most_popular": eval_recommendation(most_popular_baseline(train_part), train_part, held, ks, gain),
            "bprmf": eval_recommendation(bprmf_baseline(train_part, cfg), train_part, held, ks, gain),
        }
        for name, res in baselines.items():
            t, pval = paired_ttest(rec.per_user[k0], res.per_user[k0])
            report[name] = res.to_dict()
            report[name][f"mter_vs_{name}@{k0}"] = {"t": t, "p_value": pval}
    _emit(report, args.out, stdout)


def cmd_permtest(args, st: Settings, stdout):
    scope = st.get("scope", "user")
    n_perm = st.get("n_perm", 100, int)
    seed = st.get("seed", 0, int)
    if n_perm <= 0:
        raise ConfigError(f"n_perm must be > 0, got {n_perm}")
    _, splits = _load_data(args, st, seed)
    full = splits[0].with_reviews([r for part in splits for r in part.reviews])
    report = permutation_test(full, scope, n_perm, seed)
    _emit(report.to_dict(), args.out, stdout)


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "recommend": cmd_recommend,
    "explain": cmd_explain,
    "evaluate": cmd_evaluate,
    "permtest": cmd_permtest,
}


def run_command(argv=None, environ=None, stdout=None, stderr=None) -> int:
    """Run one subcommand; returns the process exit code."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    environ = os.environ if environ is None else environ
    parser = build_parser()
    try:
        with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
            args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=stderr)
    try:
        st = Settings(args, environ)
        threads = st.get("threads", 1, int)
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        with threadpool_limits(limits=threads):
            COMMANDS[args.command](args, st, stdout)
    except UsageError as exc:
        parser.print_usage(stderr)
        stderr.write(f"mter {args.command}: error: {exc}\n")
        return 2
    except (ConfigError, CorpusError, CheckpointError, ShapeError, TrainingDivergence,
            OSError, IndexError, ValueError) as exc:
        stderr.write(f"mter {args.command}: error: {exc}\n")
        return 1
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
