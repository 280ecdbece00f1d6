"""Training orchestration: the pre-train phase, the two-stage fine-tune,
evaluation, and the end-to-end gradient check.

Determinism contract: every stochastic draw (init, shuffling, dropout,
corpus synthesis) comes from a Philox stream keyed by (seed, role, step),
so two runs with the same config and seed write bit-identical loss logs
and checkpoints on one platform.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from pathlib import Path

import numpy as np

from . import alignment, checkpoint as ckpt_io, ops, translation
from .autograd import Tape, backward, training_mode
from .config import RunConfig, TrainConfig, config_from_dict
from .data import SyntheticCorpusConfig, generate_corpus, load_corpus, make_batches
from .encoders import EncoderConfig
from .exceptions import ContractError, DataError, NonFiniteError
from .gradcheck import gradcheck
from .metrics import evaluate_corpus
from .model import PretrainModel, TranslationModel, dropout_rng
from .optim import AdamW, clip_grad_norm, one_cycle_cosine_lr
from .pseudo_gloss import build_prototypes, build_vocab, labels_for
from .tensor_io import read_tensor
from .translation import PAD, TokenVocab


class JsonlLogger:
    def __init__(self, path):
        self.fh = open(path, "w", encoding="utf-8")

    def log(self, **fields):
        self.fh.write(json.dumps(fields, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


class Artifacts:
    """Everything derived from the corpus before training: the pseudo-gloss
    vocabulary and prototype bank, the token vocabulary, per-sample labels
    and encoded sentences."""

    def __init__(self, corpus, cfg):
        train_sents = [s.sentence for s in corpus.train]
        self.gloss_vocab = build_vocab(train_sents, corpus.lexicon)
        self.prototypes = build_prototypes(self.gloss_vocab, corpus.embeddings)
        if self.prototypes.shape[0] != cfg.encoder.proto_dim:
            raise ContractError(
                f"embedding dim {self.prototypes.shape[0]} != encoder.proto_dim {cfg.encoder.proto_dim}"
            )
        self.token_vocab = TokenVocab.from_sentences(train_sents)
        self.labels = {}
        self.ids = {}
        for split in ("train", "dev", "test"):
            samples = corpus.split(split)
            self.labels[split] = np.stack(
                [labels_for(s.sentence, corpus.lexicon, self.gloss_vocab) for s in samples]
            ) if samples else np.zeros((0, self.gloss_vocab.size), dtype=np.float32)
            self.ids[split] = [self.token_vocab.encode(s.sentence) for s in samples]

    def extra(self):
        return {"tokens": self.token_vocab.tokens, "gloss_vocab": list(self.gloss_vocab.lemmas)}


def pad_id_batch(ids_list):
    l = max(len(ids) for ids in ids_list)
    arr = np.full((len(ids_list), l), PAD, dtype=np.int64)
    for i, ids in enumerate(ids_list):
        arr[i, : len(ids)] = ids
    return arr, arr != PAD


def pooled_text_cache(model, ids_list, batch=64):
    """Frozen text features never change; compute them once per split."""
    if not ids_list:
        return np.zeros((0, model.cfg.encoder.d_model), dtype=np.float32)
    out = []
    for start in range(0, len(ids_list), batch):
        ids, mask = pad_id_batch(ids_list[start : start + batch])
        out.append(model.pooled_text(ids, mask).data)
    return np.concatenate(out, axis=0)


def _schedule(total_steps, warmup_epochs, steps_per_epoch, peak_lr):
    warmup = min(warmup_epochs * steps_per_epoch, max(total_steps - 1, 0))

    def lr_at(step):
        return one_cycle_cosine_lr(min(step, total_steps), total_steps, warmup, peak_lr) \
            if warmup < total_steps else peak_lr

    return lr_at


def _check_finite(loss, phase, epoch, step):
    v = float(loss.item())
    if not math.isfinite(v):
        raise NonFiniteError(f"{phase} diverged: non-finite loss at epoch {epoch} step {step}")
    return v


def pretrain(cfg, corpus, out_dir, lam=None, tag="pretrain"):
    """Optimize L_align + lambda * L_psp; keep the checkpoint with the
    lowest validation loss.  Returns the checkpoint path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr = cfg.train
    lam = tr.lambda_psp if lam is None else float(lam)
    art = Artifacts(corpus, cfg)
    model = PretrainModel(cfg, art.prototypes, art.token_vocab.size, tr.seed)
    text_pool = {s: pooled_text_cache(model, art.ids[s]) for s in ("train", "dev")}

    spe = math.ceil(len(corpus.train) / tr.batch_size)
    total = tr.pretrain_epochs * spe
    lr_at = _schedule(total, tr.warmup_epochs, spe, tr.lr)
    opt = AdamW(model.store, weight_decay=tr.weight_decay)
    log = JsonlLogger(out / f"{tag}_log.jsonl")
    ckpt_path = out / f"{tag}_best.ckpt"
    best = math.inf
    step = 0
    try:
        for epoch in range(tr.pretrain_epochs):
            sums = np.zeros(3)
            seen = 0
            lr_t = 0.0
            for b in make_batches(corpus.train, tr.batch_size, tr.seed, shuffle=True, epoch=epoch):
                labels = art.labels["train"][b.indices]
                tp = text_pool["train"][b.indices]
                with training_mode(True):
                    tape = Tape()
                    with tape:
                        loss, la, lp = model.pretrain_loss(
                            b.frames, b.frame_mask, labels, lam,
                            text_pooled=tp, rng=dropout_rng(tr.seed, step))
                    _check_finite(loss, "pretrain", epoch, step)
                    grads = backward(tape, loss, model.store)
                lr_t = lr_at(step + 1)
                trainable = {n: grads[n] for n in model.store.trainable_names()}
                clipped, _ = clip_grad_norm(trainable, tr.clip_norm)
                opt.step(clipped, lr_t)
                model.clamp_temperatures()
                n = b.frames.shape[0]
                sums += n * np.array([loss.item(), la.item(), lp.item()])
                seen += n
                step += 1
            log.log(epoch=epoch, split="train", loss=sums[0] / seen,
                    l_align=sums[1] / seen, l_psp=sums[2] / seen, lr=lr_t, lam=lam)

            val = _pretrain_val(model, corpus.dev, art.labels["dev"], text_pool["dev"], lam, tr)
            log.log(epoch=epoch, split="val", loss=val[0], l_align=val[1], l_psp=val[2])
            if val[0] < best:
                best = val[0]
                ckpt_io.save_from_store(ckpt_path, model.store, cfg, "pretrain",
                                        epoch, best, optimizer=opt, extra=art.extra())
    finally:
        log.close()
    return ckpt_path


def _pretrain_val(model, samples, labels, text_pool, lam, tr):
    sums = np.zeros(3)
    seen = 0
    for b in make_batches(samples, tr.batch_size):
        loss, la, lp = model.pretrain_loss(
            b.frames, b.frame_mask, labels[b.indices], lam, text_pooled=text_pool[b.indices])
        n = b.frames.shape[0]
        sums += n * np.array([loss.item(), la.item(), lp.item()])
        seen += n
    return sums / seen


def _dev_bleu(model, samples, art, tr, batch=32):
    hyps = []
    for b in make_batches(samples, batch):
        for ids in model.greedy(b.frames, b.frame_mask, tr.eval_max_len):
            hyps.append(art.token_vocab.decode(ids))
    refs = [s.sentence for s in samples]
    return evaluate_corpus(hyps, refs).bleu4


def finetune(cfg, corpus, out_dir, init_ckpt=None, tag="finetune"):
    """Two-stage SLT fine-tuning; keeps the checkpoint with the best dev
    BLEU-4.  init_ckpt=None is the random-init ablation path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr = cfg.train
    art = Artifacts(corpus, cfg)
    model = TranslationModel(cfg, art.token_vocab.size, tr.seed)
    if init_ckpt is not None:
        loaded = ckpt_io.load_checkpoint(init_ckpt, expected_config_dict=cfg.to_dict())
        model.init_from_arrays(ckpt_io.param_arrays(loaded))

    log = JsonlLogger(out / f"{tag}_log.jsonl")
    ckpt_path = out / f"{tag}_best.ckpt"
    best = -math.inf
    spe = math.ceil(len(corpus.train) / tr.batch_size)
    step = 0
    # one lr cycle across both stages: stage 2 unfreezes the encoder on the
    # annealed tail instead of hitting pretrained weights with peak lr
    lr_at = _schedule((tr.stage1_epochs + tr.stage2_epochs) * spe,
                      tr.warmup_epochs, spe, tr.lr)
    try:
        for stage, epochs in (("stage1", tr.stage1_epochs), ("stage2", tr.stage2_epochs)):
            if epochs == 0:
                continue
            if stage == "stage1":
                model.store.set_trainable(False)
                model.store.set_trainable(True, prefix="mapper")
                model.store.set_trainable(True, prefix="dec.")
            else:
                model.store.set_trainable(True)
            log.log(event="stage_start", stage=stage, epochs=epochs,
                    trainable=len(model.store.trainable_names()))
            opt = AdamW(model.store, weight_decay=tr.weight_decay)
            for epoch in range(epochs):
                total = 0.0
                seen = 0
                lr_t = 0.0
                for b in make_batches(corpus.train, tr.batch_size, tr.seed, shuffle=True,
                                      epoch=step):
                    ids, _ = pad_id_batch([art.ids["train"][i] for i in b.indices])
                    with training_mode(True):
                        tape = Tape()
                        with tape:
                            loss = model.loss(b.frames, b.frame_mask, ids,
                                              rng=dropout_rng(tr.seed, 7000000 + step))
                        _check_finite(loss, f"finetune/{stage}", epoch, step)
                        grads = backward(tape, loss, model.store)
                    lr_t = lr_at(step + 1)
                    trainable = {n: grads[n] for n in model.store.trainable_names()}
                    clipped, _ = clip_grad_norm(trainable, tr.clip_norm)
                    opt.step(clipped, lr_t)
                    total += loss.item() * b.frames.shape[0]
                    seen += b.frames.shape[0]
                    step += 1
                log.log(stage=stage, epoch=epoch, split="train", loss=total / seen, lr=lr_t)
                if (epoch + 1) % tr.eval_every == 0 or epoch == epochs - 1:
                    bleu4 = _dev_bleu(model, corpus.dev, art, tr)
                    log.log(stage=stage, epoch=epoch, split="val", bleu4=bleu4)
                    if bleu4 > best:
                        best = bleu4
                        ckpt_io.save_from_store(ckpt_path, model.store, cfg, "finetune",
                                                epoch, best, optimizer=opt, extra=art.extra())
    finally:
        log.close()
    if not ckpt_path.exists():
        raise ContractError("finetune finished without a single evaluation; increase epochs")
    return ckpt_path


# ---------------------------------------------------------------------------
# checkpoint-driven entry points


def _rebuild_translation(loaded):
    header = loaded["header"]
    cfg = config_from_dict(header["config"])
    tokens = header["extra"].get("tokens")
    if not tokens:
        raise DataError("checkpoint lacks the token vocabulary")
    if tuple(tokens[:4]) != translation.SPECIALS:
        raise DataError("checkpoint token vocabulary has unexpected reserved ids")
    vocab = TokenVocab(tokens[4:])
    model = TranslationModel(cfg, vocab.size, cfg.train.seed)
    model.init_from_arrays(ckpt_io.param_arrays(loaded))
    return model, vocab, cfg


def evaluate_checkpoint(ckpt_path, data_dir, split, out_path):
    loaded = ckpt_io.load_checkpoint(ckpt_path)
    if loaded["header"]["kind"] != "finetune":
        raise DataError(f"evaluate needs a finetune checkpoint, got {loaded['header']['kind']!r}")
    model, vocab, cfg = _rebuild_translation(loaded)
    corpus = load_corpus(data_dir)
    samples = corpus.split(split)
    hyps = []
    for b in make_batches(samples, 32):
        for ids in model.greedy(b.frames, b.frame_mask, cfg.train.eval_max_len):
            hyps.append(vocab.decode(ids))
    report = evaluate_corpus(hyps, [s.sentence for s in samples])
    out_path = Path(out_path)
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(str(out_path) + ".hyps.txt", "w", encoding="utf-8") as fh:
        for h in hyps:
            fh.write(" ".join(h) + "\n")
    return report


def translate_features(ckpt_path, features_path, max_len=None):
    loaded = ckpt_io.load_checkpoint(ckpt_path)
    model, vocab, cfg = _rebuild_translation(loaded)
    frames = read_tensor(features_path).astype(np.float32)
    if frames.ndim != 2:
        raise DataError(f"feature file must hold a [T,D] tensor, got shape {frames.shape}")
    mask = np.ones((1, frames.shape[0]), dtype=bool)
    ids = model.greedy(frames[None], mask, max_len or cfg.train.eval_max_len)[0]
    return " ".join(vocab.decode(ids))


# ---------------------------------------------------------------------------
# end-to-end gradient verification


def tiny_config(seed=0):
    enc = EncoderConfig(frame_dim=5, d_model=8, temporal_layers=2, heads=2, ffn=16,
                        window=7, downsample_after_layer=1, llm_layers=1, decoder_layers=1,
                        lora_rank=2, lora_alpha=4.0, lora_dropout=0.1, proto_dim=6)
    corpus = SyntheticCorpusConfig(
        gloss_count=4, frames_per_gloss=(2, 3), glosses_per_sample=(1, 2),
        frame_dim=5, embed_dim=6, noise_sigma=0.05, pad_prob=0.0,
        train_size=3, dev_size=1, test_size=1, seed=seed)
    return RunConfig(encoder=enc, train=TrainConfig(batch_size=3, seed=seed),
                     corpus=corpus).validate()


def run_gradcheck(seed=0, max_coords=12, tolerance=1e-4):
    """Finite-difference check of every loss end-to-end at tiny dims, 64-bit.

    Returns (report dict loss->max rel err, ok flag).
    """
    cfg = tiny_config(seed)
    corpus = generate_corpus(cfg.corpus)
    art = Artifacts(corpus, cfg)

    batch = next(make_batches(corpus.train, cfg.train.batch_size))
    frames = batch.frames.astype(np.float64)
    fmask = batch.frame_mask
    labels = art.labels["train"][batch.indices]
    ids64, _ = pad_id_batch([art.ids["train"][i] for i in batch.indices])

    pmodel = PretrainModel(cfg, art.prototypes, art.token_vocab.size, seed)
    pmodel.store.cast(np.float64)
    text_pool = pooled_text_cache(pmodel, [art.ids["train"][i] for i in batch.indices])

    def loss_psp():
        z, zmask = pmodel.encode_video(frames, fmask)
        s = alignment.similarity_scores(pmodel.proj(z), pmodel.prototypes)
        e_hat = alignment.localize(s, pmodel.tau_t, pmodel.tau_u, time_mask=zmask)
        return alignment.psp_loss(e_hat, labels)

    def loss_align():
        z, zmask = pmodel.encode_video(frames, fmask)
        m = ops.mean_pool(pmodel.llm(z, mask=zmask), mask=zmask)
        return alignment.align_loss(m, ops.Tensor(text_pool), pmodel.tau_c)

    def loss_pretrain(lam):
        def f():
            loss, _, _ = pmodel.pretrain_loss(frames, fmask, labels, lam, text_pooled=text_pool)
            return loss
        return f

    tmodel = TranslationModel(cfg, art.token_vocab.size, seed)
    tmodel.store.cast(np.float64)

    def loss_slt():
        return tmodel.loss(frames, fmask, ids64)

    pparams = {n: pmodel.store[n] for n in pmodel.store.trainable_names()}
    tparams = {n: tmodel.store[n] for n in tmodel.store.trainable_names()}
    checks = [
        ("L_psp", loss_psp, pparams),
        ("L_align", loss_align, pparams),
        ("L_pretrain[lam=0]", loss_pretrain(0.0), pparams),
        ("L_pretrain[lam=0.5]", loss_pretrain(0.5), pparams),
        ("L_pretrain[lam=1]", loss_pretrain(1.0), pparams),
        ("L_SLT", loss_slt, tparams),
    ]
    report = {}
    ok = True
    for name, f, params in checks:
        rep = gradcheck(f, params, tolerance=tolerance, max_coords=max_coords, seed=seed)
        report[name] = rep.worst
        ok = ok and rep.ok
    return report, ok
