"""Command-line pipeline over the library.

Each subcommand is one stage: it reads files, writes files, and records
a run manifest with content digests of everything it touched, so any
artifact on disk can be traced back to the exact inputs that produced
it.  Stages communicate only through files — there is no hidden state —
which means any stage can be re-run in isolation or its output swapped
for an externally produced equivalent (e.g. real embeddings in place of
the hash encoder).

Exit codes: 0 success, 2 configuration/usage, 3 data, 4 backend,
5 numerical.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .data import (dataset_manifest, load_concept_map, load_interactions,
                   parse_split_manifest, preprocess, split, split_manifest,
                   truncate, write_concept_map, write_interactions)
from .errors import (BackendError, ConfigError, CrossKTError, DataError,
                     NumericalError)
from .graph import (RelationBackendSpec, build_graph, load_graph,
                    quadratic_candidate_pairs, save_graph)
from .negatives import (NegativeSampleConfig, SampleStats,
                        build_difficulty_table, hybrid_sample)
from .report import (ablation_bars_figure, eval_metrics_figure,
                     training_curves_figure, write_ablation_table,
                     write_history_table)
from .rng import stream
from .semantics import (DEFAULT_DIM, FixtureSummaryBackend, HashEncoder,
                        HttpSummaryBackend, SummaryCache,
                        build_feature_matrix, load_node_texts,
                        load_precomputed_embeddings, random_feature_matrix,
                        save_embeddings, summarize, write_node_texts)
from .synth import generate, load_synth_config
from .trainer import (DEFAULT_VARIANTS, evaluate, load_checkpoint,
                      load_train_config, run_ablation_suite, save_checkpoint,
                      save_train_config, train, write_eval_report)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# run manifests


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def _digest_map(paths) -> dict:
    out: dict[str, str] = {}
    for p in paths:
        if p is None:
            continue
        name = Path(p).name
        if name in out:
            raise ConfigError(f"two manifest artifacts share the name "
                              f"{name!r}; rename one input")
        out[name] = _digest(p)
    return out


def _write_manifest(path, subcommand: str, *, seed, deterministic: bool,
                    config, inputs, outputs, info=None) -> None:
    """One manifest per successful run; digests are content hashes, so
    a stage's recorded input digest equals the producing stage's
    recorded output digest for the same file."""
    blob = {
        "tool": f"crosskt {__version__}",
        "subcommand": subcommand,
        "seed": seed,
        "deterministic": bool(deterministic),
        "config": config,
        "inputs": _digest_map(inputs),
        "outputs": _digest_map(outputs),
        "info": dict(info or {}),
    }
    Path(path).write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
    log.info("manifest written to %s", path)


def _prepare_file(path) -> Path:
    p = Path(path)
    if p.parent != Path(""):
        p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _prepare_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# shared loaders


def _load_dataset_dir(path, courses=None):
    """A dataset directory holds interactions.csv and concept_map.csv as
    written by `ingest` (or `synth`).  Filtering already happened at
    ingest time, so reloading applies no further thresholds."""
    d = Path(path)
    if not d.is_dir():
        raise DataError(f"dataset directory not found: {d}")
    interactions = d / "interactions.csv"
    concept_map = d / "concept_map.csv"
    records = load_interactions(interactions, courses)
    cmap = load_concept_map(concept_map)
    dataset = preprocess(records, 1, 1, 1, concept_map=cmap)
    return dataset, interactions, concept_map


def _parse_courses(text):
    if text is None:
        return None
    parts = tuple(p.strip() for p in text.split(",") if p.strip())
    if len(parts) != 2:
        raise ConfigError(f"--courses expects two comma-separated ids, "
                          f"got {text!r}")
    return parts


def _restrict(dataset, learner_ids, label: str):
    missing = sorted(set(learner_ids) - set(dataset.learners))
    if missing:
        raise DataError(f"split '{label}' names {len(missing)} learner(s) "
                        f"absent from the dataset, e.g. {missing[0]!r}")
    if not learner_ids:
        raise DataError(f"split '{label}' is empty")
    return dataclasses.replace(
        dataset,
        learners={lid: dataset.learners[lid] for lid in sorted(learner_ids)})


def _load_features(path, dataset):
    return load_precomputed_embeddings(path, node_ids=dataset.node_ids())


def _finite_or_none(value: float):
    return value if math.isfinite(value) else None


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    courses = _parse_courses(args.courses)
    records = load_interactions(args.interactions, courses)
    cmap = load_concept_map(args.concept_map)
    dataset = preprocess(records, args.min_answers, args.min_per_course,
                         args.min_cross, concept_map=cmap)
    out = _prepare_dir(args.out_dir)
    write_interactions(out / "interactions.csv", dataset.all_records())
    write_concept_map(out / "concept_map.csv",
                      {q: dataset.concept_map[q] for q in dataset.questions})
    (out / "dataset_manifest.txt").write_text(dataset_manifest(dataset),
                                              encoding="utf-8")
    log.info("kept %d learners, %d questions, %d concepts, %d interactions",
             len(dataset.learners), dataset.num_questions,
             dataset.num_concepts, dataset.interaction_count())
    _write_manifest(
        out / "manifest.json", "ingest",
        seed=args.seed, deterministic=args.deterministic,
        config={"courses": list(dataset.courses),
                "min_answers_per_question": args.min_answers,
                "min_per_course": args.min_per_course,
                "min_cross_course": args.min_cross},
        inputs=[args.interactions, args.concept_map],
        outputs=[out / "interactions.csv", out / "concept_map.csv",
                 out / "dataset_manifest.txt"],
        info={"learners": len(dataset.learners),
              "questions": dataset.num_questions,
              "concepts": dataset.num_concepts,
              "interactions": dataset.interaction_count()})
    return 0


def cmd_build_graph(args) -> int:
    dataset, interactions, concept_map = _load_dataset_dir(args.dataset)
    spec = RelationBackendSpec(
        kind=args.backend, endpoint=args.endpoint,
        fixture_path=args.fixture, threshold=args.threshold,
        votes_per_query=args.votes, cache_dir=args.cache_dir,
        timeout=args.timeout, retries=args.retries)
    pairs = quadratic_candidate_pairs(dataset) if args.all_pairs else None
    graph, provenance = build_graph(dataset, spec, pairs,
                                    parallelism=args.parallelism)
    out = _prepare_file(args.out)
    save_graph(out, graph, provenance)
    log.info("graph: %d qc edges, %d cc edges (%s backend, %d calls)",
             len(graph.qc_edges), len(graph.cc_edges), spec.kind,
             provenance["backend_calls"])
    _write_manifest(
        Path(str(out) + ".manifest.json"), "build-graph",
        seed=args.seed, deterministic=args.deterministic,
        config=dataclasses.asdict(spec),
        inputs=[interactions, concept_map, args.fixture],
        outputs=[out],
        info=provenance)
    return 0


def _summary_backend(args):
    if args.backend == "fixture":
        if not args.fixture:
            raise ConfigError("--backend fixture requires --fixture")
        return FixtureSummaryBackend(args.fixture)
    if not args.endpoint:
        raise ConfigError("--backend llm_http requires --endpoint")
    return HttpSummaryBackend(args.endpoint, timeout=args.timeout,
                              retries=args.retries)


def cmd_summarize(args) -> int:
    texts = load_node_texts(args.node_texts)
    backend = _summary_backend(args)
    cache = SummaryCache(args.cache_dir) if args.cache_dir else None
    summarized = [
        dataclasses.replace(nt, summary_text=summarize(backend, nt, nt.kind,
                                                       cache))
        for nt in texts.values()
    ]
    out = _prepare_file(args.out)
    # the summary becomes the text column, so downstream stages just
    # read whichever file carries the text they should encode
    write_node_texts(out, summarized, use_summary=True)
    log.info("summarized %d nodes (%d backend calls)", len(summarized),
             backend.calls)
    _write_manifest(
        Path(str(out) + ".manifest.json"), "summarize",
        seed=args.seed, deterministic=args.deterministic,
        config={"backend": args.backend, "cache_dir": args.cache_dir},
        inputs=[args.node_texts, args.fixture],
        outputs=[out],
        info={"nodes": len(summarized), "backend_calls": backend.calls})
    return 0


def cmd_embed(args) -> int:
    texts = load_node_texts(args.node_texts)
    encoder = HashEncoder(dim=args.dim, seed=args.encoder_seed)
    features = build_feature_matrix(texts, list(texts), encoder,
                                    use_summary=False)
    out = _prepare_file(args.out)
    save_embeddings(out, features)
    log.info("encoded %d nodes at D=%d", len(features.node_ids),
             features.dim)
    _write_manifest(
        Path(str(out) + ".manifest.json"), "embed",
        seed=args.seed, deterministic=args.deterministic,
        config={"dim": args.dim, "encoder_seed": args.encoder_seed,
                "encoder": encoder.kind},
        inputs=[args.node_texts],
        outputs=[out],
        info={"nodes": len(features.node_ids), "dim": features.dim})
    return 0


def cmd_train(args) -> int:
    config = load_train_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    dataset, interactions, concept_map = _load_dataset_dir(args.dataset)
    graph, _ = load_graph(args.graph)
    features = (_load_features(args.embeddings, dataset)
                if args.embeddings else None)
    parts = split(dataset, args.train_frac, args.val_frac, config.seed)
    train_ds, val_ds, test_ds = parts
    log.info("split: %d train / %d val / %d test learners",
             len(train_ds.learners), len(val_ds.learners),
             len(test_ds.learners))

    lines: list[str] = []

    def emit(msg: str) -> None:
        lines.append(msg)
        log.info("%s", msg)

    result = train(config, train_ds, val_ds, graph, features, log_fn=emit)

    out = _prepare_dir(args.out_dir)
    save_train_config(out / "config.txt", config)
    (out / "split_manifest.txt").write_text(
        split_manifest(config.seed, args.train_frac, args.val_frac, parts),
        encoding="utf-8")
    write_interactions(out / "train_interactions.csv",
                       train_ds.all_records())
    write_interactions(out / "val_interactions.csv", val_ds.all_records())
    write_interactions(out / "test_interactions.csv", test_ds.all_records())
    save_checkpoint(out / "checkpoint.ckpt", result.params, config,
                    extra={"best_epoch": result.best_epoch,
                           "best_metric": _finite_or_none(result.best_metric),
                           "stopped": result.stopped})
    report = evaluate(result.params, val_ds, graph, result.features, config)
    write_eval_report(out / "eval_val.txt", report)
    write_history_table(out / "history.tsv", result.history)
    training_curves_figure(out / "training_curves.png", result.history)
    (out / "training_log.txt").write_text("\n".join(lines) + "\n",
                                          encoding="utf-8")
    _write_manifest(
        out / "manifest.json", "train",
        seed=config.seed, deterministic=args.deterministic,
        config=dataclasses.asdict(config),
        inputs=[args.config, interactions, concept_map, args.graph,
                args.embeddings],
        outputs=[out / "config.txt", out / "split_manifest.txt",
                 out / "train_interactions.csv",
                 out / "val_interactions.csv",
                 out / "test_interactions.csv", out / "checkpoint.ckpt",
                 out / "eval_val.txt", out / "history.tsv",
                 out / "training_curves.png", out / "training_log.txt"],
        info={"best_epoch": result.best_epoch,
              "best_metric": _finite_or_none(result.best_metric),
              "stopped": result.stopped,
              "epochs_trained": len(result.history),
              "train_frac": args.train_frac, "val_frac": args.val_frac})
    return 0


def cmd_evaluate(args) -> int:
    params, config, extra = load_checkpoint(args.checkpoint)
    dataset, interactions, concept_map = _load_dataset_dir(args.dataset)
    graph, _ = load_graph(args.graph)

    if args.split != "all":
        if not args.split_manifest:
            raise ConfigError(f"--split {args.split} requires "
                              "--split-manifest")
        manifest_path = Path(args.split_manifest)
        if not manifest_path.exists():
            raise DataError(f"split manifest not found: {manifest_path}")
        splits = parse_split_manifest(
            manifest_path.read_text(encoding="utf-8"))
        if args.split not in splits:
            raise DataError(f"split manifest lacks a '{args.split}' entry")
        dataset = _restrict(dataset, splits[args.split], args.split)

    if config.no_se:
        # mirror training: the encoded features were seeded noise
        node_ids = [f"q:{q}" for q in graph.questions] + \
                   [f"c:{c}" for c in graph.concepts]
        features = random_feature_matrix(node_ids, config.dim, config.seed)
    elif args.embeddings:
        features = _load_features(args.embeddings, dataset)
    else:
        raise ConfigError("--embeddings is required unless the checkpoint "
                          "was trained with no_se")

    report = evaluate(params, dataset, graph, features, config)
    out = _prepare_file(args.out)
    write_eval_report(out, report)
    figure = out.with_suffix(".png")
    eval_metrics_figure(figure, report)
    sys.stdout.write(report.canonical_text())
    _write_manifest(
        Path(str(out) + ".manifest.json"), "evaluate",
        seed=config.seed, deterministic=args.deterministic,
        config=dataclasses.asdict(config),
        inputs=[args.checkpoint, interactions, concept_map, args.graph,
                args.embeddings, args.split_manifest],
        outputs=[out, figure],
        info={"split": args.split, "mean_auc": report.mean_auc,
              "checkpoint_extra": extra})
    return 0


def cmd_ablate(args) -> int:
    config = load_train_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    dataset, interactions, concept_map = _load_dataset_dir(args.dataset)
    graph, _ = load_graph(args.graph)
    originals = load_node_texts(args.node_texts)
    summaries = load_node_texts(args.summaries)
    merged = {}
    for nid, nt in originals.items():
        if nid not in summaries:
            raise DataError(f"summaries file lacks node '{nid}'")
        merged[nid] = dataclasses.replace(
            nt, summary_text=summaries[nid].original_text)

    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    if not variants:
        raise ConfigError("--variants must name at least one variant")
    train_ds, val_ds, test_ds = split(dataset, args.train_frac,
                                      args.val_frac, config.seed)

    lines: list[str] = []

    def emit(msg: str) -> None:
        lines.append(msg)
        log.info("%s", msg)

    results = run_ablation_suite(
        config, train_ds, val_ds, test_ds, graph, merged,
        variants=variants, encoder=HashEncoder(dim=config.dim),
        log_fn=emit)

    out = _prepare_dir(args.out_dir)
    write_ablation_table(out / "ablation.tsv", results)
    ablation_bars_figure(out / "ablation_bars.png", results)
    (out / "ablate_log.txt").write_text("\n".join(lines) + "\n",
                                        encoding="utf-8")
    _write_manifest(
        out / "manifest.json", "ablate",
        seed=config.seed, deterministic=args.deterministic,
        config=dataclasses.asdict(config),
        inputs=[args.config, interactions, concept_map, args.graph,
                args.node_texts, args.summaries],
        outputs=[out / "ablation.tsv", out / "ablation_bars.png",
                 out / "ablate_log.txt"],
        info={"variants": list(variants),
              "test_mean_auc": {v: results[v].report.mean_auc
                                for v in variants}})
    return 0


def cmd_sample_negatives(args) -> int:
    seed = args.seed if args.seed is not None else 0
    dataset, interactions, concept_map = _load_dataset_dir(args.dataset)
    table = build_difficulty_table(dataset)
    sample_config = NegativeSampleConfig(args.flip_threshold,
                                         args.replace_threshold)
    stats = SampleStats()
    out_records = []
    for ordinal, lid in enumerate(sorted(dataset.learners)):
        triple = dataset.learners[lid]
        if args.max_seq_len is not None:
            triple = truncate(triple, args.max_seq_len)
        rng = stream(seed, "negatives", 0, ordinal)
        out_records.extend(hybrid_sample(triple.merged, dataset, table,
                                         sample_config, rng, stats))
    out = _prepare_file(args.out)
    write_interactions(out, out_records)
    log.info("sampled %d slots: %d flips, %d replacements "
             "(%d shared-concept, %d same-course), %d fallback flips, "
             "%d unchanged",
             len(out_records), stats.flips, stats.replacements,
             stats.replaced_shared_concept, stats.replaced_same_course,
             stats.fallback_flips, stats.unchanged)
    _write_manifest(
        Path(str(out) + ".manifest.json"), "sample-negatives",
        seed=seed, deterministic=args.deterministic,
        config={"flip_threshold": args.flip_threshold,
                "replace_threshold": args.replace_threshold,
                "max_seq_len": args.max_seq_len},
        inputs=[interactions, concept_map],
        outputs=[out],
        info={"slots": len(out_records), "flips": stats.flips,
              "replaced_shared_concept": stats.replaced_shared_concept,
              "replaced_same_course": stats.replaced_same_course,
              "fallback_flips": stats.fallback_flips,
              "unchanged": stats.unchanged})
    return 0


def cmd_synth(args) -> int:
    config = load_synth_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    result = generate(config)
    dataset = result.dataset
    out = _prepare_dir(args.out_dir)
    write_interactions(out / "interactions.csv", dataset.all_records())
    write_concept_map(out / "concept_map.csv",
                      {q: dataset.concept_map[q] for q in dataset.questions})
    texts = list(result.node_texts.values())
    write_node_texts(out / "node_texts.tsv", texts, use_summary=False)
    write_node_texts(out / "summaries.tsv", texts, use_summary=True)
    (out / "summary_fixture.json").write_text(
        json.dumps(result.summary_fixture, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    (out / "relation_fixture.json").write_text(
        json.dumps(result.relation_fixture, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    save_graph(out / "graph.txt", result.graph,
               {"backend": "synthetic-ground-truth"})
    (out / "dataset_manifest.txt").write_text(dataset_manifest(dataset),
                                              encoding="utf-8")
    bound = result.oracle_auc_bound
    log.info("generated %d learners, %d interactions; oracle AUC bound %s",
             len(dataset.learners), dataset.interaction_count(),
             "undefined" if bound is None else format(bound, ".4f"))
    cfg_dict = dataclasses.asdict(config)
    cfg_dict["course_names"] = list(config.course_names)
    _write_manifest(
        out / "manifest.json", "synth",
        seed=config.seed, deterministic=args.deterministic,
        config=cfg_dict,
        inputs=[args.config],
        outputs=[out / "interactions.csv", out / "concept_map.csv",
                 out / "node_texts.tsv", out / "summaries.tsv",
                 out / "summary_fixture.json", out / "relation_fixture.json",
                 out / "graph.txt", out / "dataset_manifest.txt"],
        info={"oracle_auc_bound": bound,
              "learners": len(dataset.learners),
              "questions": dataset.num_questions,
              "concepts": dataset.num_concepts,
              "interactions": dataset.interaction_count(),
              "true_cc_edges": len(result.graph.cc_edges)})
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_run_flags(parser: argparse.ArgumentParser,
                   suppress_defaults: bool) -> None:
    """The global flags are accepted both before and after the
    subcommand.  Subparsers parse into a fresh namespace whose values
    overwrite the top-level ones, so their copies must default to
    SUPPRESS or they would erase flags given before the subcommand."""
    sup = argparse.SUPPRESS

    def dflt(value):
        return sup if suppress_defaults else value

    parser.add_argument("--seed", type=int, default=dflt(None),
                        help="override the config seed for this run")
    parser.add_argument("--deterministic", action="store_true",
                        default=dflt(False),
                        help="pin numeric libraries to one thread so "
                             "reruns are bitwise identical")
    parser.add_argument("--cache-dir", default=dflt(None),
                        help="directory for backend reply caches")
    parser.add_argument("--verbose", action="store_true",
                        default=dflt(False), help="debug-level logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crosskt",
        description="Cross-course knowledge tracing pipeline: each "
                    "subcommand is one file-in/file-out stage.")
    _add_run_flags(parser, suppress_defaults=False)
    parser.add_argument("--version", action="version",
                        version=f"crosskt {__version__}")
    sub = parser.add_subparsers(dest="subcommand", metavar="<subcommand>",
                                required=True)

    def add_parser(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        _add_run_flags(p, suppress_defaults=True)
        return p

    p = add_parser("ingest", "filter raw logs into a dataset directory")
    p.add_argument("--interactions", required=True,
                   help="raw interaction-log CSV")
    p.add_argument("--concept-map", required=True,
                   help="question_id,concept_id pairs")
    p.add_argument("--courses", default=None,
                   help="expected course ids as 'X,Y' (default: infer)")
    p.add_argument("--min-answers", type=int, default=10,
                   help="drop questions answered fewer times (default 10)")
    p.add_argument("--min-per-course", type=int, default=3,
                   help="per-course record floor per learner (default 3)")
    p.add_argument("--min-cross", type=int, default=10,
                   help="total record floor per learner (default 10)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_ingest)

    p = add_parser("build-graph",
                   "predict concept relations and write the graph")
    p.add_argument("--dataset", required=True,
                   help="dataset directory from ingest/synth")
    p.add_argument("--backend", required=True,
                   choices=("fixture", "heuristic", "llm_http"))
    p.add_argument("--fixture", default=None,
                   help="vote fixture JSON (fixture backend)")
    p.add_argument("--endpoint", default=None,
                   help="HTTP endpoint (llm_http backend)")
    p.add_argument("--votes", type=int, default=5,
                   help="odd number of votes per relation query (default 5)")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="heuristic backend acceptance threshold")
    p.add_argument("--all-pairs", action="store_true",
                   help="query every concept pair, not just cross-course "
                        "ones")
    p.add_argument("--parallelism", type=int, default=4)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_build_graph)

    p = add_parser("summarize",
                   "rewrite node texts through the summary backend")
    p.add_argument("--node-texts", required=True,
                   help="node_id<TAB>kind<TAB>text file")
    p.add_argument("--backend", required=True,
                   choices=("fixture", "llm_http"))
    p.add_argument("--fixture", default=None,
                   help="reply fixture JSON (fixture backend)")
    p.add_argument("--endpoint", default=None)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_summarize)

    p = add_parser("embed", "encode node texts into feature vectors")
    p.add_argument("--node-texts", required=True,
                   help="text file whose text column should be encoded")
    p.add_argument("--dim", type=int, default=DEFAULT_DIM)
    p.add_argument("--encoder-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_embed)

    p = add_parser("train", "fit the model and write all run artifacts")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--embeddings", default=None,
                   help="embedding file (optional only with no_se = true)")
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_train)

    p = add_parser("evaluate", "score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test", "all"))
    p.add_argument("--split-manifest", default=None,
                   help="split manifest from the training run")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_evaluate)

    p = add_parser("ablate", "train ablation variants and compare test AUC")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--node-texts", required=True,
                   help="original node texts")
    p.add_argument("--summaries", required=True,
                   help="summarized node texts (text column = summary)")
    p.add_argument("--variants", default=",".join(DEFAULT_VARIANTS),
                   help="comma-separated variant names; flags may be "
                        "combined with '+', e.g. no_kp+no_cl")
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_ablate)

    p = add_parser("sample-negatives",
                   "emit hybrid negative sequences for inspection")
    p.add_argument("--dataset", required=True)
    p.add_argument("--flip-threshold", type=float, default=0.3)
    p.add_argument("--replace-threshold", type=float, default=0.6)
    p.add_argument("--max-seq-len", type=int, default=None,
                   help="truncate histories before sampling")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_sample_negatives)

    p = add_parser("synth", "generate a synthetic two-course corpus")
    p.add_argument("--config", required=True,
                   help="key = value synth config file")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_synth)

    return parser


def _category(exc: CrossKTError) -> str:
    for cls, label in ((ConfigError, "config"), (DataError, "data"),
                       (BackendError, "backend"),
                       (NumericalError, "numerical")):
        if isinstance(exc, cls):
            return label
    return "error"


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.deterministic:
        with threadpool_limits(limits=1):
            return args.handler(args)
    return args.handler(args)


def main(argv=None) -> int:
    try:
        return dispatch(argv)
    except CrossKTError as exc:
        print(f"error[{_category(exc)}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
