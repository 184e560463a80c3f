"""``metakgr`` command line: ingest, split, pretrain, meta-train, adapt, eval, sweep, explain.

Exit codes:
    0  success
    1  unexpected internal error
    2  usage error or missing input file
    3  checkpoint format/version/kind mismatch
    4  query names an unknown entity or relation
    5  invalid configuration or argument value
    6  malformed triple or manifest file
"""

from __future__ import annotations

import argparse
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import embed, evaluate, kg, meta, policy, synthetic
from .config import ENV_PREFIX, RunConfig, resolve
from .env import Environment, Query
from .errors import CheckpointVersionError, InvalidArgument, ParseError, UnknownName
from .optim import load_params, save_params

log = logging.getLogger("metakgr")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_VERSION, EXIT_NAME, EXIT_CONFIG, EXIT_PARSE = range(7)


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _require(cfg: RunConfig, *keys):
    missing = [k for k in keys if getattr(cfg, k) in ("", None)]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"missing required option(s): {flags}")


def _emit(cfg: RunConfig, text: str):
    """Write ``text`` to ``--out`` when given, otherwise to stdout."""
    if cfg.out:
        path = Path(cfg.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)


def _dataset(cfg) -> kg.Dataset:
    _require(cfg, "graph")
    return kg.Dataset.load(cfg.graph)


def write_manifest(split: kg.TaskSplit, relations: kg.Vocab) -> str:
    lines = [f"#K={split.K}", "relation\ttriples\tsplit"]
    rows = [(r, len(v), "normal") for r, v in split.normal.items()]
    rows += [(r, len(v), "fewshot") for r, v in split.fewshot.items()]
    for r, n, kind in sorted(rows):
        lines.append(f"{relations.name(r)}\t{n}\t{kind}")
    return "\n".join(lines) + "\n"


def read_manifest(path, relations: kg.Vocab):
    """Return ``(K, normal_ids, fewshot_ids)`` from a split manifest."""
    K, normal, fewshot = None, [], []
    with open(path, encoding="utf-8") as f:
        for number, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if line.startswith("#K="):
                K = int(line[3:])
                continue
            if number == 2 or not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("normal", "fewshot"):
                raise ParseError(f"{path}: malformed manifest row {line!r}", number)
            (normal if parts[2] == "normal" else fewshot).append(relations.id(parts[0]))
    if K is None:
        raise ParseError(f"{path}: manifest lacks its '#K=' header")
    return K, sorted(normal), sorted(fewshot)


def _reward_model(cfg):
    return embed.EmbedModel.load(cfg.reward_model) if cfg.reward_model else None


def _save_policy(cfg, params, extra=None, step=None):
    info = {"policy": {"dim": cfg.dim, "hidden": cfg.hidden, "mlp": cfg.mlp}}
    info.update(extra or {})
    save_params(cfg.out, params, kind="policy", seed=cfg.seed, step=step, extra=info)


def _lookup(vocab: kg.Vocab, name: str, what: str) -> int:
    if name not in vocab:
        raise UnknownName(f"unknown {what} {name!r}")
    return vocab.id(name)


# ------------------------------------------------------------------ commands

def cmd_synth(cfg, args):
    _require(cfg, "out")
    ck = synthetic.compositional_kg(support=args.support, seed=cfg.seed)
    ds, out = ck.dataset, Path(cfg.out)
    for part in ("train", "valid", "test"):
        kg.write_triples(out / f"{part}.txt", getattr(ds, part), ds.entities, ds.relations)


def cmd_ingest(cfg, args):
    _require(cfg, "out")
    ds = kg.load_dataset(args.train, args.valid, args.test, add_inverses=cfg.add_inverses)
    ds.save(cfg.out)
    log.info("ingested %d entities, %d relations, %d training triples",
             len(ds.entities), len(ds.relations), len(ds.train))


def cmd_split(cfg, args):
    _require(cfg, "graph", "K")
    ds = _dataset(cfg)
    try:
        K = int(cfg.K)
    except ValueError:
        raise InvalidArgument(f"K must be a positive integer, got {cfg.K!r}") from None
    split = ds.split(K)
    log.info("K=%d: %d normal, %d few-shot relations", K, len(split.normal), len(split.fewshot))
    _emit(cfg, write_manifest(split, ds.relations))


def cmd_pretrain(cfg, args):
    _require(cfg, "out")
    ds = _dataset(cfg)
    triples = ds.train
    if cfg.split:
        _, normal, _ = read_manifest(cfg.split, ds.relations)
        keep = set(normal)
        triples = [t for t in triples if t.relation in keep]
    ecfg = embed.EmbedConfig(**{**vars(cfg.embed_config()),
                                **({"kind": args.kind} if args.kind else {})})
    model = embed.pretrain(triples, len(ds.entities), len(ds.relations), ecfg)
    model.save(cfg.out, step=ecfg.epochs)


def cmd_meta_train(cfg, args):
    _require(cfg, "split", "out")
    ds = _dataset(cfg)
    _, normal, _ = read_manifest(cfg.split, ds.relations)
    if not normal:
        raise InvalidArgument("the split has no normal relations to meta-train on")
    env = Environment(ds.graph, cfg.horizon, cfg.action_cap)
    rng = np.random.default_rng(cfg.seed)
    theta = policy.init_params(ds.graph.n_entities, ds.graph.n_relations, cfg.policy_config(), rng)
    tasks = {r: ds.task(r).train for r in normal if ds.task(r).train}
    reward = _reward_model(cfg)
    validate = None
    if cfg.eval_every:
        held = [t for r in normal for t in ds.task(r).valid][:200]
        if held:
            def validate(params):
                answers = evaluate.decode(params, env, held, cfg.beam,
                                          workers=cfg.resolved_workers())
                return evaluate.compute_metrics(answers, ds.known_triples()).mrr
    log_stream = open(args.log, "w", encoding="utf-8", newline="\n") if args.log else None
    try:
        theta_star = meta.meta_train(theta, env, tasks, cfg.meta_config(), cfg.train_config(), rng,
                                     reward_model=reward, validate=validate, log_stream=log_stream)
    finally:
        if log_stream is not None:
            log_stream.close()
    _save_policy(cfg, theta_star, step=cfg.outer_steps)


def cmd_adapt(cfg, args):
    _require(cfg, "checkpoint", "out")
    ds = _dataset(cfg)
    relation = _lookup(ds.relations, args.relation, "relation")
    theta, _, _ = load_params(cfg.checkpoint, kind="policy")
    env = Environment(ds.graph, cfg.horizon, cfg.action_cap)
    triples = ds.task(relation).train
    if not triples and cfg.adapt_steps:
        raise InvalidArgument(f"relation {args.relation!r} has no training triples to adapt on")
    rng = np.random.default_rng([cfg.seed, relation])
    theta_r = meta.adapt_fewshot(theta, env, triples, cfg.adapt_lr, cfg.adapt_steps,
                                 cfg.train_config(), rng, reward_model=_reward_model(cfg))
    _save_policy(cfg, theta_r, extra={"relation": args.relation}, step=cfg.adapt_steps)


def _eval_relations(cfg, ds, which, part):
    if which == "all" or not cfg.split:
        return sorted({t.relation for t in getattr(ds, part)})
    _, normal, fewshot = read_manifest(cfg.split, ds.relations)
    return fewshot if which == "fewshot" else normal


def cmd_eval(cfg, args):
    _require(cfg, "checkpoint")
    ds = _dataset(cfg)
    theta, meta_info, _ = load_params(cfg.checkpoint, kind="policy")
    adapted = meta_info["extra"].get("relation")
    acfg = cfg.adapt_config()
    if adapted is not None:
        # an already-adapted checkpoint answers its own relation only
        relations = [_lookup(ds.relations, adapted, "relation")]
        acfg.steps = 0
    else:
        relations = _eval_relations(cfg, ds, args.relations, args.part)
    answers, report = evaluate.evaluate_fewshot(
        theta, ds, relations, cfg.train_config(), acfg, horizon=cfg.horizon,
        action_cap=cfg.action_cap, reward_model=_reward_model(cfg), split=args.part,
        filtered=cfg.filtered)
    _emit(cfg, evaluate.format_table(report, ds.relations.names))
    if args.answers:
        buf = io.StringIO()
        evaluate.dump_answers(buf, answers, ds.graph, cfg.top_k)
        Path(args.answers).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def parse_k_list(text):
    out = []
    for item in (text or "1,5,10,max").split(","):
        item = item.strip()
        if item == evaluate.KMAX:
            out.append(evaluate.KMAX)
            continue
        try:
            out.append(int(item))
        except ValueError:
            raise InvalidArgument(f"K list entries must be integers or 'max', got {item!r}") from None
    return out


def cmd_sweep(cfg, args):
    _require(cfg, "checkpoint", "split")
    ds = _dataset(cfg)
    theta, _, _ = load_params(cfg.checkpoint, kind="policy")
    _, _, fewshot = read_manifest(cfg.split, ds.relations)
    if not fewshot:
        raise InvalidArgument("the split has no few-shot relations to sweep over")
    rows = evaluate.robustness_sweep(theta, ds, fewshot, parse_k_list(cfg.K), cfg.train_config(),
                                     cfg.adapt_config(), horizon=cfg.horizon,
                                     action_cap=cfg.action_cap, reward_model=_reward_model(cfg))
    _emit(cfg, evaluate.format_sweep(rows))


def cmd_explain(cfg, args):
    _require(cfg, "checkpoint")
    ds = _dataset(cfg)
    source = _lookup(ds.entities, args.source, "entity")
    relation = _lookup(ds.relations, args.relation, "relation")
    theta, _, _ = load_params(cfg.checkpoint, kind="policy")
    env = Environment(ds.graph, cfg.horizon, cfg.action_cap)
    answer = evaluate.beam_search(theta, env, Query(source, relation), cfg.beam,
                                  score_mode=cfg.score_mode)
    lines = []
    for i, c in enumerate(answer.candidates[: cfg.top_k], 1):
        path = evaluate.render_path(source, c.path, ds.graph)
        lines.append(f"{i}\t{ds.entities.name(c.entity)}\t{c.score:.6f}\t{path}")
    _emit(cfg, "\n".join(lines) + "\n")


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "split": cmd_split, "pretrain": cmd_pretrain,
    "meta-train": cmd_meta_train, "adapt": cmd_adapt, "eval": cmd_eval, "sweep": cmd_sweep,
    "explain": cmd_explain,
}


# ------------------------------------------------------------------ parsing

SHARED_FLAGS = ("config", "seed", "workers", "graph", "split", "reward_model", "checkpoint",
                "out", "K", "beam", "horizon")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="decoding threads (default: all cores)")
    common.add_argument("--graph", help="dataset checkpoint written by ingest")
    common.add_argument("--split", help="split manifest written by split")
    common.add_argument("--reward-model", dest="reward_model", help="pretrained reward checkpoint")
    common.add_argument("--checkpoint", help="policy checkpoint to read")
    common.add_argument("--out", help="output path (stdout for tables when omitted)")
    common.add_argument("--K", dest="K", help="few-shot threshold, or comma list for sweep")
    common.add_argument("--beam", type=int, help="beam width")
    common.add_argument("--horizon", type=int, help="walk length T")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("--log-level", default="INFO")

    parser = argparse.ArgumentParser(
        prog="metakgr", description="Meta-learned multi-hop reasoning over knowledge graphs.",
        epilog=f"Config keys may also be set through {ENV_PREFIX}<KEY> environment variables.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic compositional KG")
    p.add_argument("--support", type=int, default=5, help="training triples per few-shot relation")
    p = sub.add_parser("ingest", parents=[common], help="triple files -> dataset checkpoint")
    p.add_argument("--train", required=True)
    p.add_argument("--valid")
    p.add_argument("--test")
    sub.add_parser("split", parents=[common], help="normal/few-shot manifest for threshold K")
    p = sub.add_parser("pretrain", parents=[common], help="fit the embedding reward model")
    p.add_argument("--kind", choices=embed.KINDS)
    p = sub.add_parser("meta-train", parents=[common], help="learn the meta-initialisation")
    p.add_argument("--log", help="per-step meta-training log (TSV)")
    p = sub.add_parser("adapt", parents=[common], help="fine-tune on one relation")
    p.add_argument("--relation", required=True)
    p = sub.add_parser("eval", parents=[common], help="link prediction metrics")
    p.add_argument("--relations", choices=("fewshot", "normal", "all"), default="fewshot")
    p.add_argument("--part", choices=("test", "valid"), default="test")
    p.add_argument("--answers", help="write one JSON record per query here")
    sub.add_parser("sweep", parents=[common], help="metrics per truncation threshold K")
    p = sub.add_parser("explain", parents=[common], help="top answers with reasoning paths")
    p.add_argument("--source", required=True)
    p.add_argument("--relation", required=True)
    return parser


def _flag_values(args) -> dict:
    flags = {k: getattr(args, k) for k in SHARED_FLAGS if k != "config"}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidArgument(f"--set expects KEY=VALUE, got {item!r}")
        flags[key.strip()] = value
    return flags


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args.config, _flag_values(args))
        for line in cfg.render().splitlines():
            log.info("config %s", line)
        COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        log.error("missing file: %s", exc.filename or exc)
        return EXIT_USAGE
    except CheckpointVersionError as exc:
        log.error("%s", exc)
        return EXIT_VERSION
    except UnknownName as exc:
        log.error("%s", exc)
        return EXIT_NAME
    except ParseError as exc:
        log.error("%s", exc)
        return EXIT_PARSE
    except InvalidArgument as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
