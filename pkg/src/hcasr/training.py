"""Batching, the hybrid training objective and the optimizer loop."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import CorpusManifest, Vocabulary, normalize_text, tokenize
from .errors import ConfigError, DataError
from .frontend import AugmentPolicy, FrontendOptions, extract_streams, read_wav
from .model import HybridModel
from .objectives import attention_loss_batch, ctc_loss_batch, hybrid_loss

log = logging.getLogger(__name__)


@dataclass
class Utterance:
    utt: str
    fbank: np.ndarray
    spec: np.ndarray
    target: list[int]
    text: str


def pad_batch(arrays, dtype=torch.float64):
    lengths = torch.tensor([a.shape[0] for a in arrays])
    out = torch.zeros(len(arrays), int(lengths.max()), arrays[0].shape[1], dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = torch.as_tensor(a, dtype=dtype)
    return out, lengths


def num_workers() -> int:
    raw = os.environ.get("ASR_NUM_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ASR_NUM_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("ASR_NUM_WORKERS must be >= 1")
    return n


def ordered_map(fn, items, workers: int | None = None):
    """``map`` over a thread pool; results keep input order."""
    workers = workers or num_workers()
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def load_utterances(manifest: CorpusManifest, vocab: Vocabulary, opts: FrontendOptions,
                    policy: AugmentPolicy | None = None, epoch: int = 0,
                    workers: int | None = None) -> list[Utterance]:
    """Features and token ids for every record.

    Augmentation draws from a generator seeded by ``(policy seed, epoch, index)``
    so the result does not depend on the worker count.
    """

    def one(item):
        i, rec = item
        rng = np.random.default_rng([policy.rng_seed, epoch, i]) if policy else None
        fbank, spec = extract_streams(read_wav(rec.audio_path), opts, policy, rng)
        text = normalize_text(rec.transcript)
        return Utterance(rec.utt_id, fbank.frames, spec.frames, tokenize(text, vocab), text)

    return ordered_map(one, list(enumerate(manifest)), workers)


def utterance_loss(model: HybridModel, fbank, spec, lengths, targets, ctc_weight=0.3,
                   count_eos=True, label_smoothing=0.0, utts=None):
    """Mean hybrid loss over the batch's alignable utterances.

    Returns ``(loss, ctc_mean, att_mean, skipped)``; ``loss`` is ``None`` when
    every utterance was unalignable.
    """
    h_enc, enc_len = model.encode(fbank, spec, lengths)
    log_probs = model.ctc_log_probs(h_enc)
    ctc_losses, keep, skipped = ctc_loss_batch(log_probs, enc_len, targets, utts)
    for diag in skipped:
        log.warning("skipping unalignable utterance %s (%d frames, needs %d)",
                    diag.utt, diag.frames, diag.required)
    if not keep:
        return None, float("nan"), float("nan"), skipped
    idx = torch.tensor(keep)
    kept_targets = [targets[i] for i in keep]
    U = max(len(t) for t in kept_targets)
    dec_targets = torch.zeros(len(keep), U, dtype=torch.long)
    for b, t in enumerate(kept_targets):
        dec_targets[b, : len(t)] = torch.tensor([x - 1 for x in t], dtype=torch.long)
    logits = model.decoder.teacher_forced(h_enc[idx], enc_len[idx], dec_targets)
    att_losses = attention_loss_batch(logits, [[x - 1 for x in t] for t in kept_targets],
                                      count_eos, label_smoothing)
    ctc = torch.stack(ctc_losses).mean()
    att = torch.stack(att_losses).mean()
    return hybrid_loss(ctc, att, ctc_weight), ctc.item(), att.item(), skipped


@dataclass
class TrainSettings:
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_steps: int = 1000
    clip_norm: float = 5.0
    seed: int = 0
    ctc_weight: float = 0.3
    checkpoint_every: int = 500
    log_every: int = 10
    count_eos: bool = True
    label_smoothing: float = 0.0


class NonFiniteLoss(DataError):
    def __init__(self, message, utts=()):
        super().__init__(message)
        self.utts = list(utts)


def train(model: HybridModel, utterances: list[Utterance], settings: TrainSettings,
          out_dir, save_checkpoint, metrics_path=None, reaugment=None):
    """Adam on the hybrid loss; returns the list of logged metric rows.

    ``save_checkpoint(path)`` writes the model; ``reaugment(epoch)`` may return
    fresh utterances at each epoch boundary.
    """
    out_dir = Path(out_dir)
    torch.manual_seed(settings.seed)
    rng = np.random.default_rng(settings.seed)
    opt = torch.optim.Adam(model.parameters(), lr=settings.learning_rate)
    metrics_path = Path(metrics_path or out_dir / "metrics.jsonl")
    rows = []
    save_checkpoint(out_dir / "checkpoint_init.hcam")
    step, epoch = 0, 0
    dtype = next(model.parameters()).dtype
    with metrics_path.open("w", encoding="utf-8") as metrics:
        while step < settings.max_steps:
            order = rng.permutation(len(utterances))
            for start in range(0, len(order), settings.batch_size):
                if step >= settings.max_steps:
                    break
                batch = [utterances[i] for i in order[start : start + settings.batch_size]]
                fbank, lengths = pad_batch([u.fbank for u in batch], dtype)
                spec, _ = pad_batch([u.spec for u in batch], dtype)
                model.train()
                loss, ctc, att, _ = utterance_loss(
                    model, fbank, spec, lengths, [u.target for u in batch],
                    settings.ctc_weight, settings.count_eos, settings.label_smoothing,
                    utts=[u.utt for u in batch],
                )
                if loss is None:
                    continue
                if not torch.isfinite(loss):
                    ids = [u.utt for u in batch]
                    raise NonFiniteLoss(f"non-finite loss at step {step} in batch {ids}", ids)
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), settings.clip_norm)
                opt.step()
                step += 1
                if step % settings.log_every == 0 or step == settings.max_steps:
                    row = {"step": step, "epoch": epoch, "loss_ctc": ctc, "loss_att": att,
                           "loss_hybrid": loss.item(), "beta": model.fusion.beta().item()}
                    rows.append(row)
                    metrics.write(json.dumps(row) + "\n")
                    metrics.flush()
                    log.info("step %d  hybrid %.4f  ctc %.4f  att %.4f  beta %.4f",
                             step, row["loss_hybrid"], ctc, att, row["beta"])
                if settings.checkpoint_every and step % settings.checkpoint_every == 0:
                    save_checkpoint(out_dir / f"checkpoint_{step:06d}.hcam")
            epoch += 1
            if reaugment is not None and step < settings.max_steps:
                utterances = reaugment(epoch)
    if not math.isfinite(rows[-1]["loss_hybrid"] if rows else 0.0):
        raise NonFiniteLoss("training ended with a non-finite loss")
    return rows
