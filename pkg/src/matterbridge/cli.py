"""Command-line surface tying dataset, training, retrieval, and metrics.

Nine subcommands: gen-data, pretrain, finetune, infer, eval, embed,
retrieve, similarity, project.  Every subcommand accepts --config and
--seed; an unset --seed falls back to the MATTERBRIDGE_SEED environment
variable and then to the config's seed.  Commands whose outputs are
deterministic by construction (infer, eval, embed, retrieve,
similarity, project) accept the flag for interface uniformity.

Exit codes: 0 success, 1 a reported pipeline error, 2 usage errors.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import Config, config_hash, load_config
from .crystal import build_graph, parse_structure
from .datasetgen import (
    build_instruction_corpus,
    generate_synthetic_records,
    load_instruction_samples,
    load_property_records,
    split_dataset,
    write_instruction_samples,
    write_property_records,
)
from .encoder import encode_atoms
from .errors import MatterBridgeError, ValidationError
from .evaluate import (
    CLASSIFICATION_TASKS,
    DEFAULT_RAG_K,
    NUMERIC_TASKS,
    evaluate_checkpoint,
    generate_answer,
    parse_answer_value,
    project_2d_pca,
    write_eval_report,
)
from .rag import EmbeddingRecord, EmbeddingStore, embed_material
from .rag import rag_aggregate, retrieve_topk
from .rematch import RematchConfig, similarity_matrix
from .soap import SoapConfig
from .templates import TASKS, attribute_text, format_value, numeric_target
from .templates import render_prompt
from .tensor import Tensor
from .trainer import build_models, finetune, load_checkpoint, pretrain
from .trainer import restore_models

SEED_ENV = "MATTERBRIDGE_SEED"


def resolve_seed(arg_seed, cfg):
    """--seed wins, then MATTERBRIDGE_SEED, then the config seed."""
    if arg_seed is not None:
        return int(arg_seed)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(
                f"{SEED_ENV}={env!r} is not an integer") from None
    return cfg.seed


def _load_cfg(args):
    return load_config(args.config) if args.config else Config()


def _structure_from_file(path, fmt):
    if fmt is None:
        fmt = "cif-subset" if path.endswith(".cif") else "structure-json"
    with open(path, "r", encoding="utf-8") as fh:
        return parse_structure(fh.read(), fmt)


def _atoms_for(structure, models):
    graph = build_graph(structure, cutoff=models.encoder.cutoff)
    return Tensor(encode_atoms(graph, models.encoder), requires_grad=False)


def _record_labels(record):
    labels = {t: attribute_text(record, t) for t in CLASSIFICATION_TASKS}
    for t in NUMERIC_TASKS:
        labels[t] = numeric_target(record, t)
    return labels


def _out(line):
    print(line)


# -- subcommand bodies -------------------------------------------------------


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    seed = resolve_seed(args.seed, cfg)
    os.makedirs(args.out, exist_ok=True)
    records = generate_synthetic_records(seed, args.n)
    write_property_records(os.path.join(args.out, "records.jsonl"), records)
    _out(f"{len(records)} records -> records.jsonl")
    if len(records) >= 10:
        train, test = split_dataset(records, seed)
        write_property_records(
            os.path.join(args.out, "records_train.jsonl"), train)
        write_property_records(
            os.path.join(args.out, "records_test.jsonl"), test)
        _out(f"split {len(records)} -> {len(train)} train / {len(test)} test")
    else:
        train, test = records, []
        _out("fewer than 10 records: split skipped, train = all")
    train_samples = build_instruction_corpus(train, seed)
    write_instruction_samples(
        os.path.join(args.out, "samples_train.jsonl"), train_samples)
    _out(f"{len(train_samples)} train samples -> samples_train.jsonl")
    if test:
        test_samples = build_instruction_corpus(test, seed)
        write_instruction_samples(
            os.path.join(args.out, "samples_test.jsonl"), test_samples)
        _out(f"{len(test_samples)} test samples -> samples_test.jsonl")
    return 0


def cmd_pretrain(args):
    cfg = _load_cfg(args)
    seed = resolve_seed(args.seed, cfg)
    records = load_property_records(args.records)
    models = build_models(cfg, seed)
    os.makedirs(args.out, exist_ok=True)
    path = pretrain(records, models, cfg, seed=seed, log_path=args.log,
                    ckpt_dir=args.out)
    _out(f"pretraining done: {path}")
    return 0


def cmd_finetune(args):
    cfg = _load_cfg(args)
    seed = resolve_seed(args.seed, cfg)
    records = load_property_records(args.records)
    samples = load_instruction_samples(args.samples)
    os.makedirs(args.out, exist_ok=True)
    path = finetune(samples, records, args.ckpt, cfg, seed=seed,
                    log_path=args.log, ckpt_dir=args.out,
                    allow_config_mismatch=args.allow_config_mismatch)
    _out(f"finetuning done: {path}")
    return 0


def cmd_infer(args):
    cfg = _load_cfg(args)
    resolve_seed(args.seed, cfg)
    if args.task not in TASKS:
        raise ValidationError(
            f"unknown task {args.task!r}; choose from {', '.join(TASKS)}")
    models = restore_models(load_checkpoint(args.ckpt))
    structure = _structure_from_file(args.structure, args.fmt)
    prompt = render_prompt(args.task, args.template_index)
    answer = generate_answer(models, _atoms_for(structure, models), prompt,
                             max_new=args.max_new)
    if not args.rag:
        _out(answer)
        return 0
    if not args.store or not args.records:
        raise ValidationError("--rag needs --store and --records")
    store = EmbeddingStore.load(args.store)
    pool = {r.material_id: r for r in load_property_records(args.records)}
    vec = embed_material(structure, models)
    hits = retrieve_topk(store, vec, args.k, exclude_id=args.id)
    ids = [h.material_id for h in hits]
    _out(f"self: {answer}")
    _out(f"retrieved: {','.join(ids)}")
    try:
        self_pred = parse_answer_value(answer, args.task)
    except MatterBridgeError:
        _out(f"final: {answer}")
        return 0
    neighbor_preds = []
    for nid in ids:
        rec = pool.get(nid)
        if rec is None:
            raise ValidationError(
                f"store references material {nid!r} missing from --records")
        ntext = generate_answer(models, _atoms_for(rec.structure, models),
                                prompt, max_new=args.max_new)
        try:
            neighbor_preds.append(parse_answer_value(ntext, args.task))
        except MatterBridgeError:
            continue
    if neighbor_preds:
        kind = "numeric" if args.task in NUMERIC_TASKS else "classification"
        final = rag_aggregate(self_pred, neighbor_preds, kind)
    else:
        final = self_pred
    if args.task in NUMERIC_TASKS:
        kind_name = "energy" if args.task == "bandgap" else "energy_per_atom"
        _out(f"final: {format_value(final, kind_name)}")
    else:
        _out(f"final: {final}")
    return 0


def cmd_eval(args):
    cfg = _load_cfg(args)
    resolve_seed(args.seed, cfg)
    records = load_property_records(args.records)
    samples = load_instruction_samples(args.samples)
    store = None
    if args.rag:
        if not args.store:
            raise ValidationError("--rag needs --store")
        store = EmbeddingStore.load(args.store)
    report = evaluate_checkpoint(args.ckpt, records, samples,
                                 rag_store=store, k=args.k,
                                 max_new=args.max_new)
    write_eval_report(args.out, report)
    for task, entry in report.tasks.items():
        _out(f"{task}: {entry['metric']}={entry['value']} "
             f"count={entry['count']} parse_errors={entry['parse_errors']}")
    _out(f"report written to {args.out}")
    return 0


def cmd_embed(args):
    cfg = _load_cfg(args)
    resolve_seed(args.seed, cfg)
    models = restore_models(load_checkpoint(args.ckpt))
    records = load_property_records(args.records)
    if not records:
        raise ValidationError("no records to embed")
    store = None
    for rec in records:
        vec = embed_material(rec.structure, models)
        if store is None:
            store = EmbeddingStore(vec.size)
        store.add(EmbeddingRecord(rec.material_id, vec, _record_labels(rec)))
    store.save(args.out)
    _out(f"wrote {len(store)} embeddings of stride {store.stride} "
         f"to {args.out}")
    return 0


def cmd_retrieve(args):
    cfg = _load_cfg(args)
    resolve_seed(args.seed, cfg)
    store = EmbeddingStore.load(args.store)
    ids = [r.material_id for r in store.records]
    if args.query_id not in ids:
        raise ValidationError(
            f"query id {args.query_id!r} not in store")
    mat = store.matrix()
    query = mat[ids.index(args.query_id)]
    exclude = None if args.include_self else args.query_id
    hits = retrieve_topk(store, query, args.k, exclude_id=exclude)
    for hit in hits:
        dist = float(np.linalg.norm(hit.vector - query))
        _out(f"{hit.material_id} {dist!r}")
    return 0


def cmd_similarity(args):
    cfg = _load_cfg(args)
    resolve_seed(args.seed, cfg)
    records = load_property_records(args.records)
    if args.ids:
        wanted = args.ids.split(",")
        by_id = {r.material_id: r for r in records}
        missing = [w for w in wanted if w not in by_id]
        if missing:
            raise ValidationError(f"unknown material ids: {missing}")
        records = [by_id[w] for w in wanted]
    if len(records) < 2:
        raise ValidationError("need at least 2 materials to compare")
    soap_cfg = SoapConfig(r_cut=args.r_cut, n_max=args.n_max,
                          l_max=args.l_max, sigma=args.sigma)
    rem_cfg = RematchConfig(alpha=args.alpha)
    sim = similarity_matrix([r.structure for r in records],
                            soap_cfg=soap_cfg, rematch_cfg=rem_cfg)
    lines = ["id_a,id_b,similarity"]
    for i, ra in enumerate(records):
        for j in range(i, len(records)):
            lines.append(f"{ra.material_id},{records[j].material_id},"
                         f"{float(sim[i, j])!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        _out(f"{len(lines) - 1} pairs -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_project(args):
    cfg = _load_cfg(args)
    resolve_seed(args.seed, cfg)
    store = EmbeddingStore.load(args.store)
    coords, frac = project_2d_pca(store.matrix())
    lines = ["material_id,x,y"]
    for rec, (x, y) in zip(store.records, coords):
        lines.append(f"{rec.material_id},{float(x)!r},{float(y)!r}")
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    _out(f"projected {len(store)} embeddings -> {args.out}")
    _out(f"variance fractions: {float(frac[0])!r} {float(frac[1])!r}")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="matterbridge",
        description="crystal-structure instruction tuning at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="JSON config path (defaults built in)")
        p.add_argument("--seed", type=int, default=None,
                       help=f"seed; falls back to ${SEED_ENV}, then config")
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=32)

    p = add("pretrain", cmd_pretrain, "stage-one alignment training")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)

    p = add("finetune", cmd_finetune, "stage-two instruction tuning")
    p.add_argument("--records", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--allow-config-mismatch", action="store_true")

    p = add("infer", cmd_infer, "answer one task for one structure")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--structure", required=True)
    p.add_argument("--fmt", choices=["structure-json", "cif-subset"],
                   default=None)
    p.add_argument("--task", required=True)
    p.add_argument("--template-index", type=int, default=0)
    p.add_argument("--max-new", type=int, default=None)
    p.add_argument("--rag", action="store_true")
    p.add_argument("--store", default=None)
    p.add_argument("--records", default=None)
    p.add_argument("--id", default=None,
                   help="store id of the query material, excluded from "
                        "retrieval")
    p.add_argument("--k", type=int, default=DEFAULT_RAG_K)

    p = add("eval", cmd_eval, "score a checkpoint and write a report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-new", type=int, default=None)
    p.add_argument("--rag", action="store_true")
    p.add_argument("--store", default=None)
    p.add_argument("--k", type=int, default=DEFAULT_RAG_K)

    p = add("embed", cmd_embed, "export material embeddings to a store")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)

    p = add("retrieve", cmd_retrieve, "nearest neighbors of a stored material")
    p.add_argument("--store", required=True)
    p.add_argument("--query-id", required=True)
    p.add_argument("--k", type=int, default=DEFAULT_RAG_K)
    p.add_argument("--include-self", action="store_true")

    p = add("similarity", cmd_similarity, "pairwise structural similarity CSV")
    p.add_argument("--records", required=True)
    p.add_argument("--ids", default=None,
                   help="comma-separated material ids (default: all)")
    p.add_argument("--out", default=None)
    p.add_argument("--r-cut", type=float, default=6.0)
    p.add_argument("--n-max", type=int, default=8)
    p.add_argument("--l-max", type=int, default=6)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=1.0)

    p = add("project", cmd_project, "2D PCA coordinates for a store")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)

    return parser


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (MatterBridgeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
