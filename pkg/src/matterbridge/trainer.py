"""Two-stage training loop: bridge pretraining and instruction finetuning.

Stage one trains the bridge on frozen atom features with the combined
alignment objective (contrastive + conditional token prediction +
pair-match classification).  Stage two trains the bridge plus the
projection into the frozen language model on answer-token cross entropy.

Determinism contract: every random draw (epoch shuffles, hard-negative
sampling, caption template picks) comes from a stateless stream derived
from (run seed, stream name), so repeated runs produce bit-identical
loss traces and checkpoints.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from .bridge import (BridgeParams, bridge_forward, init_bridge, match_score,
                     project_to_lm, text_logits)
from .config import config_hash
from .crystal import build_graph
from .encoder import EncoderParams, encode_atoms, init_encoder
from .errors import CheckpointError, ContractError, ValidationError
from .ioutil import canonical_json
from .lm import LmParams, Vocab, default_vocab, init_lm, lm_forward
from .objectives import (association_loss, contrastive_loss, finetune_loss,
                         hard_negative_sample, lm_token_loss, sim_matrix)
from .tensor import Tensor, concat

CHECKPOINT_FORMAT = "bridge-checkpoint-v1"
STAGES = ("pretrain", "finetune")


def stream_seed(seed, name):
    """Derive a child seed for a named random stream of a run."""
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])


def stream_rng(seed, name):
    return np.random.default_rng(stream_seed(seed, name))


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class Models:
    encoder: EncoderParams
    bridge: BridgeParams
    lm: LmParams
    vocab: Vocab


def build_models(cfg, seed=None):
    """Initialize all three components from a single run seed.

    Component seeds are derived, not shared, so changing one dimension
    never reflows the random draws of the other components.
    """
    if seed is None:
        seed = cfg.seed
    vocab = default_vocab()
    enc_seed = int(stream_rng(seed, "init-encoder").integers(2**31))
    br_seed = int(stream_rng(seed, "init-bridge").integers(2**31))
    lm_seed = int(stream_rng(seed, "init-lm").integers(2**31))
    encoder = init_encoder(enc_seed, d_enc=cfg.d_enc, L_enc=cfg.L_enc,
                           cutoff=cfg.cutoff)
    bridge = init_bridge(br_seed, vocab_size=len(vocab.symbols), d_b=cfg.d_b,
                         n_q=cfg.n_q, L_b=cfg.L_b, n_heads=cfg.n_heads,
                         d_enc=cfg.d_enc, d_lm=cfg.d_lm, max_text=cfg.max_text)
    lm = init_lm(lm_seed, vocab=vocab, d_lm=cfg.d_lm, L_lm=cfg.L_lm,
                 n_heads=cfg.lm_heads, max_len=cfg.max_len,
                 trainable=cfg.lm_trainable)
    return Models(encoder=encoder, bridge=bridge, lm=lm, vocab=vocab)


def all_tensors(models):
    """Every parameter array in the bundle under a dotted, prefixed name."""
    out = {}
    for key, arr in models.encoder.state_dict().items():
        out["encoder." + key] = arr
    for key, t in models.bridge.params.items():
        out["bridge." + key] = t
    for key, t in models.lm.params.items():
        out["lm." + key] = t
    return out


def trainable_tensors(models):
    out = {}
    for key, t in models.bridge.params.items():
        out["bridge." + key] = t
    if models.lm.trainable:
        for key, t in models.lm.params.items():
            out["lm." + key] = t
    return out


# ---------------------------------------------------------------------------
# optimizer


def lr_schedule(step, total_steps, warmup_steps, stage, cfg):
    """Learning rate at an optimizer step.

    Linear warmup from the shared start rate to the stage peak over
    warmup_steps, then cosine decay to the stage floor at total_steps.
    Endpoints are exact: step 0 gives the start rate, step warmup_steps
    the peak, step total_steps the floor.
    """
    if stage == "pretrain":
        peak, floor = cfg.pretrain_peak_lr, cfg.pretrain_floor_lr
    elif stage == "finetune":
        peak, floor = cfg.finetune_peak_lr, cfg.finetune_floor_lr
    else:
        raise ContractError(f"unknown stage {stage!r}")
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        frac = step / warmup_steps
        return cfg.warmup_start_lr + (peak - cfg.warmup_start_lr) * frac
    if total_steps == warmup_steps:
        return peak
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return floor + (peak - floor) * 0.5 * (1.0 + np.cos(np.pi * progress))


def warmup_steps_for(total_steps, cfg):
    return int(np.ceil(cfg.warmup_frac * total_steps))


def steps_per_epoch(n_items, batch_size, accum):
    return int(np.ceil(n_items / (batch_size * accum)))


def init_optim_state(params):
    return {
        name: {"m": np.zeros_like(t.data), "v": np.zeros_like(t.data)}
        for name, t in params.items()
    }


def adamw_step(params, state, step, lr, cfg):
    """One decoupled-weight-decay Adam update, in place.

    step is 1-based for bias correction.  A parameter with no gradient
    this window contributes a zero gradient: its moments decay and it
    still receives weight decay.
    """
    if step < 1:
        raise ValidationError("optimizer step index is 1-based")
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name in sorted(params):
        t = params[name]
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        st = state[name]
        st["m"] = b1 * st["m"] + (1.0 - b1) * g
        st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
        m_hat = st["m"] / c1
        v_hat = st["v"] / c2
        t.data = (t.data
                  - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
                  - lr * cfg.weight_decay * t.data)


def zero_grads(params):
    for t in params.values():
        t.grad = None


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, models, cfg, stage, step):
    """Write a self-contained checkpoint.

    Layout: an 8-byte little-endian uint64 manifest length, the
    canonical-JSON manifest, then each tensor as little-endian float64
    bytes at the offsets the manifest records.
    """
    if stage not in STAGES:
        raise ContractError(f"unknown stage {stage!r}")
    tensors = all_tensors(models)
    records = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        t = tensors[name]
        data = t.data if isinstance(t, Tensor) else t
        blob = np.ascontiguousarray(data, dtype="<f8").tobytes()
        records.append({
            "name": name,
            "shape": list(data.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "stage": stage,
        "step": int(step),
        "config_hash": config_hash(cfg),
        "config": cfg.to_dict(),
        "vocab": list(models.vocab.symbols),
        "tensors": records,
    }
    payload = canonical_json(manifest).encode()
    with open(path, "wb") as fh:
        fh.write(np.array(len(payload), dtype="<u8").tobytes())
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)
    return path


@dataclass
class Checkpoint:
    manifest: dict
    arrays: dict

    @property
    def stage(self):
        return self.manifest["stage"]

    @property
    def step(self):
        return self.manifest["step"]


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise CheckpointError(f"{path}: file shorter than the length header")
    (n_manifest,) = np.frombuffer(raw[:8], dtype="<u8")
    n_manifest = int(n_manifest)
    if len(raw) < 8 + n_manifest:
        raise CheckpointError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(raw[8:8 + n_manifest].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: manifest is not valid JSON: {e}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unrecognized format tag "
                              f"{manifest.get('format')!r}")
    body = raw[8 + n_manifest:]
    arrays = {}
    for rec in manifest["tensors"]:
        if rec["name"] in arrays:
            raise CheckpointError(f"{path}: duplicate tensor {rec['name']!r}")
        lo, hi = rec["offset"], rec["offset"] + rec["nbytes"]
        if hi > len(body):
            raise CheckpointError(
                f"{path}: blob for tensor {rec['name']!r} is truncated "
                f"(needs bytes [{lo}, {hi}), file has {len(body)})")
        arr = np.frombuffer(body[lo:hi], dtype="<f8").reshape(rec["shape"])
        arrays[rec["name"]] = arr.copy()
    return Checkpoint(manifest=manifest, arrays=arrays)


def restore_models(ckpt, cfg=None):
    """Rebuild a model bundle and overwrite every array from a checkpoint."""
    if cfg is None:
        from .config import config_from_dict

        cfg = config_from_dict(ckpt.manifest["config"])
    models = build_models(cfg)
    if list(models.vocab.symbols) != list(ckpt.manifest["vocab"]):
        raise CheckpointError("checkpoint vocabulary does not match")
    tensors = all_tensors(models)
    missing = sorted(set(tensors) - set(ckpt.arrays))
    extra = sorted(set(ckpt.arrays) - set(tensors))
    if missing or extra:
        raise CheckpointError(
            f"tensor names do not match (missing {missing}, extra {extra})")
    for name, t in tensors.items():
        arr = ckpt.arrays[name]
        target = t.data if isinstance(t, Tensor) else t
        if arr.shape != target.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {arr.shape}, expected {target.shape}")
        target[...] = arr
    return models


def check_resume_config(ckpt, cfg, allow_config_mismatch=False):
    stored = ckpt.manifest["config_hash"]
    current = config_hash(cfg)
    if stored == current:
        return
    if not allow_config_mismatch:
        raise ContractError(
            f"checkpoint config hash {stored} does not match current config "
            f"{current}; pass allow_config_mismatch=True to resume anyway")
    warnings.warn(
        f"resuming across a config change ({stored} -> {current})",
        stacklevel=2)


# ---------------------------------------------------------------------------
# shared batch plumbing


class _LossLog:
    """CSV loss log, one row per optimizer step."""

    FIELDS = ("step", "stage", "lr", "loss", "contrastive", "prediction",
              "association")

    def __init__(self, path):
        self.path = path
        self.rows = []
        self._fh = None
        self._writer = None
        if path is not None:
            self._fh = open(path, "w", newline="", encoding="utf-8")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(self.FIELDS)

    def add(self, step, stage, lr, loss, parts=(float("nan"),) * 3):
        row = (step, stage, repr(float(lr)), repr(float(loss)),
               repr(float(parts[0])), repr(float(parts[1])),
               repr(float(parts[2])))
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow(row)
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()


def caption_for(record, seed):
    """Pretraining caption: a composition answer sentence for the material.

    The template index is a deterministic per-material draw from the run
    seed, so the caption never changes between epochs or runs.
    """
    from .templates import get_templates, render_answer

    group = get_templates("formula")
    rng = stream_rng(seed, "caption-" + record.material_id)
    idx = int(rng.integers(len(group.answers)))
    return render_answer(record, "formula", idx)


def _encode_record(record, models):
    graph = build_graph(record.structure, cutoff=models.encoder.cutoff)
    return Tensor(encode_atoms(graph, models.encoder), requires_grad=False)


def _bridge_text_ids(vocab, caption):
    return [vocab.bos_id] + vocab.tokenize(caption)


def _epoch_order(n, seed, stage, epoch):
    rng = stream_rng(seed, f"{stage}-epoch-{epoch}")
    return rng.permutation(n)


def _nan_abort(loss_value, stage, step):
    if not np.isfinite(loss_value):
        raise ContractError(
            f"non-finite loss at {stage} step {step}: {loss_value!r}")


# ---------------------------------------------------------------------------
# stage one


def _pretrain_micro_loss(batch, models, cfg, neg_seed):
    """Combined alignment loss for one micro-batch of (atoms, ids) pairs.

    Returns the loss tensor plus its three detached components.
    """
    vocab = models.vocab
    n = len(batch)
    query_feats = []
    text_feats = []
    pred_losses = []
    for atoms, ids in batch:
        out = bridge_forward(atoms, ids, "correlation", models.bridge)
        query_feats.append(out["query_out"])
        text_feats.append(out["text_out"][0:1])
        pred = bridge_forward(atoms, ids, "prediction", models.bridge)
        logits = text_logits(pred["text_out"], models.bridge)
        targets = np.array(ids[1:] + [vocab.eos_id], dtype=np.int64)
        pred_losses.append(lm_token_loss(logits, targets))
    loss_pred = pred_losses[0]
    for extra in pred_losses[1:]:
        loss_pred = loss_pred + extra

    texts = concat(text_feats, axis=0)
    loss_con = contrastive_loss(query_feats, texts, tau=cfg.tau,
                                symmetric=cfg.symmetric_contrastive)

    loss_assoc = None
    if n >= 2:
        sims = sim_matrix(query_feats, texts)
        if not np.all(np.isfinite(sims.data)):
            # poison the total instead of crashing mid-window so the
            # step-boundary check can report the step index
            loss_assoc = Tensor(np.full((), np.nan), requires_grad=False)
    if loss_assoc is None and n >= 2:
        text_negs, graph_negs = hard_negative_sample(sims.data, neg_seed)
        scores = []
        labels = []
        for i in range(n):
            out = bridge_forward(batch[i][0], batch[i][1], "association",
                                 models.bridge)
            scores.append(match_score(out["query_out"], models.bridge))
            labels.append(1.0)
        for i in range(n):
            out = bridge_forward(batch[i][0], batch[text_negs[i]][1],
                                 "association", models.bridge)
            scores.append(match_score(out["query_out"], models.bridge))
            labels.append(0.0)
        for i in range(n):
            out = bridge_forward(batch[graph_negs[i]][0], batch[i][1],
                                 "association", models.bridge)
            scores.append(match_score(out["query_out"], models.bridge))
            labels.append(0.0)
        scores = [s.reshape((1,)) for s in scores]
        loss_assoc = association_loss(concat(scores), np.array(labels))
    elif loss_assoc is None:
        loss_assoc = Tensor(np.zeros(()), requires_grad=False)

    total = loss_con + loss_pred + loss_assoc
    parts = (float(loss_con.data), float(loss_pred.data),
             float(loss_assoc.data))
    return total, parts


def pretrain(records, models, cfg, seed=None, log_path=None, ckpt_dir=None):
    """Stage-one training of the bridge against frozen atom features.

    records: property records with structures.  Returns the final
    checkpoint path when ckpt_dir is given, else the trained bundle.
    """
    if seed is None:
        seed = cfg.seed
    if not records:
        raise ValidationError("pretraining corpus is empty")
    vocab = models.vocab
    pairs = []
    for rec in records:
        atoms = _encode_record(rec, models)
        ids = _bridge_text_ids(vocab, caption_for(rec, seed))
        if len(ids) > models.bridge.max_text:
            raise ValidationError(
                f"caption for {rec.material_id} exceeds max_text")
        pairs.append((atoms, ids))

    params = trainable_tensors(models)
    state = init_optim_state(params)
    window = cfg.batch_size * cfg.pretrain_accum
    per_epoch = steps_per_epoch(len(pairs), cfg.batch_size, cfg.pretrain_accum)
    total_steps = cfg.pretrain_epochs * per_epoch
    warmup = warmup_steps_for(total_steps, cfg)
    log = _LossLog(log_path)
    step = 0
    try:
        for epoch in range(cfg.pretrain_epochs):
            order = _epoch_order(len(pairs), seed, "pretrain", epoch)
            for lo in range(0, len(pairs), window):
                idx = order[lo:lo + window]
                step += 1
                lr = lr_schedule(step - 1, total_steps, warmup, "pretrain", cfg)
                zero_grads(params)
                window_loss = 0.0
                window_parts = np.zeros(3)
                for k in range(0, len(idx), cfg.batch_size):
                    micro = [pairs[i] for i in idx[k:k + cfg.batch_size]]
                    neg_seed = int(stream_rng(
                        seed, f"hardneg-{step}-{k}").integers(2**31))
                    loss, parts = _pretrain_micro_loss(micro, models, cfg,
                                                       neg_seed)
                    loss.backward()
                    window_loss += float(loss.data)
                    window_parts += parts
                _nan_abort(window_loss, "pretrain", step)
                adamw_step(params, state, step, lr, cfg)
                log.add(step, "pretrain", lr, window_loss, window_parts)
                if ckpt_dir is not None and step % cfg.checkpoint_interval == 0:
                    save_checkpoint(
                        os.path.join(ckpt_dir, f"pretrain-step{step}.ckpt"),
                        models, cfg, "pretrain", step)
            if ckpt_dir is not None:
                save_checkpoint(
                    os.path.join(ckpt_dir, f"pretrain-epoch{epoch + 1}.ckpt"),
                    models, cfg, "pretrain", step)
    finally:
        log.close()
    if ckpt_dir is not None:
        final = os.path.join(ckpt_dir, "pretrain-final.ckpt")
        save_checkpoint(final, models, cfg, "pretrain", step)
        return final
    return models


# ---------------------------------------------------------------------------
# stage two


def finetune_sequences(sample, vocab):
    """Token-level views of one instruction sample.

    Returns (input_ids, targets, answer_mask): inputs are
    [bos] prompt [sep] answer, targets the same sequence shifted left
    with [eos] appended, and the mask selects the answer tokens plus the
    closing [eos] so the loss ignores the prompt.
    """
    prompt_ids = vocab.tokenize(sample.prompt)
    answer_ids = vocab.tokenize(sample.answer)
    seq = ([vocab.bos_id] + prompt_ids + [vocab.sep_id]
           + answer_ids + [vocab.eos_id])
    inputs = seq[:-1]
    targets = np.array(seq[1:], dtype=np.int64)
    mask = np.zeros(len(inputs), dtype=bool)
    mask[len(prompt_ids) + 1:] = True
    return inputs, targets, mask


def _finetune_sample_terms(entry, models):
    atoms, inputs, targets, mask = entry
    out = bridge_forward(atoms, None, "inference", models.bridge)
    prefix = project_to_lm(out["query_out"], models.bridge)
    logits = lm_forward(prefix, inputs, models.lm)
    return logits, targets, mask


def finetune(samples, records, ckpt, cfg, seed=None, log_path=None,
             ckpt_dir=None, allow_config_mismatch=False):
    """Stage-two training on instruction samples from a stage-one checkpoint.

    records supply the structures the samples reference by material id.
    ckpt may be a Checkpoint or a path and must come from the
    pretraining stage.
    """
    if isinstance(ckpt, (str, os.PathLike)):
        ckpt = load_checkpoint(ckpt)
    if ckpt.stage != "pretrain":
        raise ContractError(
            f"finetuning must start from a pretrain checkpoint, "
            f"got stage {ckpt.stage!r}")
    check_resume_config(ckpt, cfg, allow_config_mismatch)
    models = restore_models(ckpt, cfg)
    if seed is None:
        seed = cfg.seed
    if not samples:
        raise ValidationError("finetuning corpus is empty")
    by_id = {r.material_id: r for r in records}
    vocab = models.vocab
    entries = []
    atom_cache = {}
    for s in samples:
        key = s.material_id
        if key not in by_id:
            raise ValidationError(f"sample references unknown material {key}")
        if key not in atom_cache:
            atom_cache[key] = _encode_record(by_id[key], models)
        inputs, targets, mask = finetune_sequences(s, vocab)
        if models.bridge.n_q + len(inputs) > models.lm.max_len:
            raise ValidationError(
                f"sample for {s.material_id} exceeds the LM context")
        entries.append((atom_cache[key], inputs, targets, mask))

    params = trainable_tensors(models)
    state = init_optim_state(params)
    window = cfg.batch_size * cfg.finetune_accum
    per_epoch = steps_per_epoch(len(entries), cfg.batch_size,
                                cfg.finetune_accum)
    total_steps = cfg.finetune_epochs * per_epoch
    warmup = warmup_steps_for(total_steps, cfg)
    log = _LossLog(log_path)
    step = 0
    try:
        for epoch in range(cfg.finetune_epochs):
            order = _epoch_order(len(entries), seed, "finetune", epoch)
            for lo in range(0, len(entries), window):
                idx = order[lo:lo + window]
                step += 1
                lr = lr_schedule(step - 1, total_steps, warmup, "finetune",
                                 cfg)
                zero_grads(params)
                micro_losses = []
                n_micro = int(np.ceil(len(idx) / cfg.batch_size))
                for k in range(0, len(idx), cfg.batch_size):
                    terms = [_finetune_sample_terms(entries[i], models)
                             for i in idx[k:k + cfg.batch_size]]
                    loss = finetune_loss(terms) * (1.0 / n_micro)
                    loss.backward()
                    micro_losses.append(float(loss.data))
                window_loss = float(np.sum(micro_losses))
                _nan_abort(window_loss, "finetune", step)
                adamw_step(params, state, step, lr, cfg)
                log.add(step, "finetune", lr, window_loss)
                if ckpt_dir is not None and step % cfg.checkpoint_interval == 0:
                    save_checkpoint(
                        os.path.join(ckpt_dir, f"finetune-step{step}.ckpt"),
                        models, cfg, "finetune", step)
            if ckpt_dir is not None:
                save_checkpoint(
                    os.path.join(ckpt_dir, f"finetune-epoch{epoch + 1}.ckpt"),
                    models, cfg, "finetune", step)
    finally:
        log.close()
    if ckpt_dir is not None:
        final = os.path.join(ckpt_dir, "finetune-final.ckpt")
        save_checkpoint(final, models, cfg, "finetune", step)
        return final
    return models


def read_loss_log(path):
    """Load a CSV loss log as a list of dicts with numeric fields."""
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out.append({
                "step": int(row["step"]),
                "stage": row["stage"],
                "lr": float(row["lr"]),
                "loss": float(row["loss"]),
                "contrastive": float(row["contrastive"]),
                "prediction": float(row["prediction"]),
                "association": float(row["association"]),
            })
    return out
