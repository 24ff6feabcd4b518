"""Answer parsing, task metrics, PCA projection, and report assembly.

Evaluation decodes an answer for every instruction sample with greedy
generation, parses the decoded sentence back into a label or number,
and scores the result against the record the sample was rendered from.
Six classification tasks are scored by exact-match accuracy and three
numeric tasks by RMSE; parse failures count as incorrect and are
surfaced in the report.

With retrieval augmentation the model also decodes an answer for each
retrieved neighbor (same prompt, neighbor's structure) and the final
prediction aggregates the self answer with the neighbor answers by
majority vote or mean.  A store holding only copies of the query
material therefore reproduces the plain prediction exactly.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np

from .bridge import bridge_forward, project_to_lm
from .errors import ContractError, ValidationError
from .ioutil import canonical_json
from .lm import generate_greedy
from .rag import embed_material, rag_aggregate, retrieve_topk
from .templates import BINARY_FORMS, MAGNETIC_ORDERS, NUMERIC_TASKS
from .templates import attribute_text, numeric_target
from .trainer import _encode_record, load_checkpoint, restore_models

CLASSIFICATION_TASKS = (
    "is_metal",
    "direct_bandgap",
    "stability",
    "exp_observed",
    "is_magnetic",
    "magnetic_order",
)
EVAL_TASKS = CLASSIFICATION_TASKS + NUMERIC_TASKS

DEFAULT_MAX_NEW = 96
DEFAULT_RAG_K = 2

_NUMBER = r"[+-]?\d+(?:\.\d+)?"


def task_unit(task):
    if task == "bandgap":
        return "eV"
    if task in ("formation_energy", "energy_above_hull"):
        return "eV/atom"
    raise ContractError(f"task {task!r} has no unit")


def label_set(task):
    """The closed set of answer labels a classification task can take."""
    if task == "magnetic_order":
        return tuple(MAGNETIC_ORDERS)
    if task in BINARY_FORMS:
        return tuple(BINARY_FORMS[task])
    raise ContractError(f"{task!r} is not a classification task")


def parse_answer_value(text, task):
    """Recover the label or numeric value embedded in an answer sentence.

    Numeric tasks take the first decimal literal that directly precedes
    the task's unit suffix.  Classification tasks match against the
    task's closed label set, longest label first, so that "non-metal"
    is never read as "metal".  A sentence with no match raises
    ValidationError; callers score that as an incorrect prediction.
    """
    if not isinstance(text, str) or not text:
        raise ValidationError("answer text must be a nonempty string")
    if task in NUMERIC_TASKS:
        unit = task_unit(task)
        m = re.search(rf"({_NUMBER})\s*{re.escape(unit)}", text)
        if m is None:
            raise ValidationError(
                f"no {unit} value found in answer {text!r}")
        return float(m.group(1))
    labels = label_set(task)
    for lab in sorted(labels, key=len, reverse=True):
        if lab in text:
            return lab
    raise ValidationError(f"no {task} label found in answer {text!r}")


def eval_classification(preds, labels):
    """Exact-match fraction; a None prediction counts as incorrect."""
    if len(preds) != len(labels):
        raise ValidationError(
            f"length mismatch: {len(preds)} predictions vs "
            f"{len(labels)} labels")
    if len(preds) == 0:
        raise ValidationError("need at least one prediction")
    hits = sum(1 for p, t in zip(preds, labels) if p is not None and p == t)
    return hits / len(preds)


def eval_rmse(preds, labels):
    """Root mean squared error over paired finite values."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValidationError(
            f"need matching 1-D value lists, got {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValidationError("need at least one prediction")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
        raise ValidationError("values must be finite")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def project_2d_pca(vectors):
    """Mean-centered projection onto the top-2 principal directions.

    Returns (coords, variance_fractions).  Sign convention: each
    direction is flipped so its largest-magnitude loading is positive,
    making the projection deterministic.  Collinear data is fine (the
    second axis is then numerically zero); identical points are not.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"need a 2-D array of vectors, got {x.shape}")
    n, d = x.shape
    if n < 3:
        raise ValidationError(f"need at least 3 vectors, got {n}")
    if d < 2:
        raise ValidationError(f"need at least 2 dimensions, got {d}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("vectors must be finite")
    centered = x - x.mean(axis=0)
    total = float(np.sum(centered * centered))
    if total == 0.0:
        raise ValidationError("all vectors identical: no principal directions")
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2].copy()
    for i in range(2):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0.0:
            comps[i] = -comps[i]
    coords = centered @ comps.T
    frac = (svals[:2] ** 2) / float(np.sum(svals ** 2))
    return coords, frac


# -- greedy answer generation ------------------------------------------------


def generate_answer(models, atoms, prompt, max_new=None):
    """Greedy-decode an answer sentence for a prompt and encoded atoms."""
    if not prompt:
        raise ValidationError("prompt must be nonempty")
    out = bridge_forward(atoms, None, "inference", models.bridge)
    prefix = project_to_lm(out["query_out"], models.bridge)
    vocab = models.vocab
    ids = [vocab.bos_id] + vocab.tokenize(prompt) + [vocab.sep_id]
    room = models.lm.max_len - prefix.shape[0] - len(ids)
    if room < 1:
        raise ValidationError(
            f"prompt of {len(ids)} symbols leaves no room to generate "
            f"within max_len {models.lm.max_len}")
    if max_new is None:
        max_new = min(DEFAULT_MAX_NEW, room)
    return generate_greedy(prefix, ids, max_new, models.lm)


class _AnswerCache:
    """Per-(material, prompt) decode cache shared across an eval run."""

    def __init__(self, models, records, max_new=None):
        self.models = models
        self.by_id = {r.material_id: r for r in records}
        self.max_new = max_new
        self._atoms = {}
        self._texts = {}
        self._vectors = {}

    def record(self, material_id):
        rec = self.by_id.get(material_id)
        if rec is None:
            raise ValidationError(
                f"sample references unknown material {material_id!r}")
        return rec

    def atoms(self, material_id):
        if material_id not in self._atoms:
            rec = self.record(material_id)
            self._atoms[material_id] = _encode_record(rec, self.models)
        return self._atoms[material_id]

    def answer(self, material_id, prompt):
        key = (material_id, prompt)
        if key not in self._texts:
            self._texts[key] = generate_answer(
                self.models, self.atoms(material_id), prompt, self.max_new)
        return self._texts[key]

    def vector(self, material_id):
        if material_id not in self._vectors:
            rec = self.record(material_id)
            self._vectors[material_id] = embed_material(
                rec.structure, self.models)
        return self._vectors[material_id]


def _parse_or_none(text, task):
    try:
        return parse_answer_value(text, task)
    except ValidationError:
        return None


def predict_sample(cache, sample, rag_store=None, k=DEFAULT_RAG_K):
    """Final (possibly aggregated) prediction for one instruction sample.

    Returns (prediction, parse_failed).  With a store, the top-k
    neighbors of the sample's material are decoded with the same prompt
    and aggregated with the self prediction; neighbors whose answers do
    not parse are dropped, and a failed self parse is final.
    """
    task = sample.task
    text = cache.answer(sample.material_id, sample.prompt)
    pred = _parse_or_none(text, task)
    if pred is None:
        return None, True
    if rag_store is None:
        return pred, False
    vec = cache.vector(sample.material_id)
    hits = retrieve_topk(rag_store, vec, k, exclude_id=sample.material_id)
    neighbor_preds = []
    for nid in (h.material_id for h in hits):
        ntext = cache.answer(nid, sample.prompt)
        npred = _parse_or_none(ntext, task)
        if npred is not None:
            neighbor_preds.append(npred)
    if not neighbor_preds:
        return pred, False
    kind = "numeric" if task in NUMERIC_TASKS else "classification"
    return rag_aggregate(pred, neighbor_preds, kind), False


# -- report assembly ---------------------------------------------------------


@dataclass
class EvalReport:
    """Per-task metrics plus the provenance needed to reproduce them."""

    config_hash: str
    rag: bool
    n_samples: int
    tasks: dict

    def to_dict(self):
        return {
            "config_hash": self.config_hash,
            "rag": self.rag,
            "n_samples": self.n_samples,
            "tasks": self.tasks,
        }


def report_from_dict(obj):
    missing = {"config_hash", "rag", "n_samples", "tasks"} - set(obj)
    if missing:
        raise ValidationError(f"report missing keys: {sorted(missing)}")
    return EvalReport(
        config_hash=obj["config_hash"],
        rag=bool(obj["rag"]),
        n_samples=int(obj["n_samples"]),
        tasks=dict(obj["tasks"]),
    )


def write_eval_report(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(report.to_dict()))
        fh.write("\n")


def read_eval_report(path):
    import json

    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValidationError(
                f"report {path} is not valid JSON: {e.msg}") from None
    return report_from_dict(obj)


def evaluate_checkpoint(ckpt, records, samples, rag_store=None,
                        k=DEFAULT_RAG_K, max_new=None):
    """Score a checkpoint over instruction samples and build an EvalReport.

    Only the nine scoreable tasks are evaluated; samples of the three
    description tasks (free-text answers with no closed label set) are
    ignored.  Decoding is deterministic, so the report is a pure
    function of the checkpoint, the corpus, and the store.
    """
    if isinstance(ckpt, (str, os.PathLike)):
        ckpt = load_checkpoint(ckpt)
    models = restore_models(ckpt)
    eval_samples = [s for s in samples if s.task in EVAL_TASKS]
    if not eval_samples:
        raise ValidationError("no scoreable samples in the corpus")
    cache = _AnswerCache(models, records, max_new=max_new)
    preds = {t: [] for t in EVAL_TASKS}
    refs = {t: [] for t in EVAL_TASKS}
    failures = {t: 0 for t in EVAL_TASKS}
    for sample in eval_samples:
        rec = cache.record(sample.material_id)
        task = sample.task
        pred, failed = predict_sample(cache, sample, rag_store, k)
        if failed:
            failures[task] += 1
        preds[task].append(pred)
        if task in NUMERIC_TASKS:
            refs[task].append(numeric_target(rec, task))
        else:
            refs[task].append(attribute_text(rec, task))
    tasks = {}
    for task in EVAL_TASKS:
        if not preds[task]:
            continue
        if task in NUMERIC_TASKS:
            pairs = [(p, t) for p, t in zip(preds[task], refs[task])
                     if p is not None]
            value = (eval_rmse([p for p, _ in pairs], [t for _, t in pairs])
                     if pairs else None)
            metric = "rmse"
        else:
            value = eval_classification(preds[task], refs[task])
            metric = "accuracy"
        tasks[task] = {
            "metric": metric,
            "value": value,
            "count": len(preds[task]),
            "parse_errors": failures[task],
        }
    return EvalReport(
        config_hash=ckpt.manifest["config_hash"],
        rag=rag_store is not None,
        n_samples=len(eval_samples),
        tasks=tasks,
    )
