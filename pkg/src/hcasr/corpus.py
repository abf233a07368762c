"""Manifests, character vocabulary, synthetic corpus and CER/WER scoring."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DataError
from .frontend import SAMPLE_RATE, AudioBuffer, write_wav

log = logging.getLogger(__name__)

# Turkish dotted/dotless i; str.lower() alone maps "I" to "i" and "İ" to "i̇".
_TURKISH_CASEFOLD = str.maketrans({"I": "ı", "İ": "i"})
_WS = re.compile(r"\s+")


def normalize_text(text: str, turkish: bool = True) -> str:
    if turkish:
        text = text.translate(_TURKISH_CASEFOLD)
    return _WS.sub(" ", text.lower()).strip()


# -- vocabulary -----------------------------------------------------------------


class Vocabulary:
    """Characters get ids ``1..V``; blank is 0 and eos is ``V + 1``."""

    blank = 0

    def __init__(self, chars):
        chars = list(chars)
        if len(set(chars)) != len(chars):
            raise ValueError("vocabulary characters must be unique")
        if any(len(c) != 1 for c in chars):
            raise ValueError("vocabulary entries must be single characters")
        self.chars = chars
        self._ids = {c: i + 1 for i, c in enumerate(chars)}

    @classmethod
    def from_texts(cls, texts):
        return cls(sorted(set("".join(texts))))

    def __len__(self):
        return len(self.chars)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.chars == other.chars

    @property
    def eos(self) -> int:
        return len(self.chars) + 1

    def to_string(self) -> str:
        return "".join(self.chars)

    def id_of(self, ch: str) -> int:
        return self._ids[ch]


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    bad = [(i, c) for i, c in enumerate(text) if c not in vocab._ids]
    if bad:
        detail = ", ".join(f"{c!r}@{i}" for i, c in bad)
        raise DataError(f"out-of-vocabulary characters: {detail}")
    return [vocab._ids[c] for c in text]


def detokenize(ids, vocab: Vocabulary) -> str:
    out = []
    for i in ids:
        i = int(i)
        if not 1 <= i <= len(vocab):
            raise DataError(f"token id {i} outside [1, {len(vocab)}]")
        out.append(vocab.chars[i - 1])
    return "".join(out)


# -- manifests ------------------------------------------------------------------


@dataclass
class Record:
    audio_path: Path
    transcript: str
    duration_s: float
    utt_id: str = ""


@dataclass
class CorpusManifest:
    records: list[Record] = field(default_factory=list)
    split_tag: str = "train"

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


class ManifestError(DataError):
    def __init__(self, problems):
        self.problems = problems
        super().__init__("; ".join(f"line {n}: {msg}" for n, msg in problems))


def load_manifest(path, split_tag: str = "train", check_audio: bool = True, fail_fast: bool = False):
    """Read a JSON-lines manifest of ``{"audio", "text", "duration_s"}`` rows.

    Audio paths are resolved against the manifest's directory. All row
    problems are collected and raised together unless ``fail_fast``.
    """
    path = Path(path)
    base = path.parent
    records, problems, seen = [], [], set()

    def problem(n, msg):
        problems.append((n, msg))
        if fail_fast:
            raise ManifestError(problems)

    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            problem(n, f"invalid JSON ({exc.msg})")
            continue
        missing = [k for k in ("audio", "text", "duration_s") if k not in row]
        if missing:
            problem(n, f"missing field(s) {', '.join(missing)}")
            continue
        text = str(row["text"])
        try:
            duration = float(row["duration_s"])
        except (TypeError, ValueError):
            problem(n, f"duration_s not a number: {row['duration_s']!r}")
            continue
        audio = (base / row["audio"]).resolve()
        if not text.strip():
            problem(n, "empty transcript")
        elif duration <= 0:
            problem(n, f"non-positive duration {duration}")
        elif audio in seen:
            problem(n, f"duplicate audio path {row['audio']}")
        elif check_audio and not audio.exists():
            problem(n, f"missing audio file {row['audio']}")
        else:
            seen.add(audio)
            utt = row.get("utt", Path(row["audio"]).stem)
            records.append(Record(audio, text, duration, utt))
    if problems:
        raise ManifestError(problems)
    if not records:
        log.warning("manifest %s is empty", path)
    return CorpusManifest(records, split_tag)


def write_manifest(path, manifest: CorpusManifest):
    path = Path(path)
    lines = []
    for r in manifest:
        rel = Path(r.audio_path).resolve().relative_to(path.parent.resolve())
        row = {"audio": rel.as_posix(), "text": r.transcript, "duration_s": r.duration_s}
        lines.append(json.dumps(row, ensure_ascii=False))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# -- synthetic corpus ------------------------------------------------------------

TOKEN_SECONDS = 0.12
_RAMP_SECONDS = 0.01


def token_frequency(k: int) -> float:
    return 300.0 + 150.0 * k


def render_tokens(ids, rng: np.random.Generator, snr_db: float = 20.0) -> np.ndarray:
    """Two-harmonic tone per token with short edge ramps, plus white noise."""
    n = int(round(TOKEN_SECONDS * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    ramp_n = int(round(_RAMP_SECONDS * SAMPLE_RATE))
    env = np.ones(n)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp_n) / ramp_n)
    env[:ramp_n] = ramp
    env[-ramp_n:] = ramp[::-1]
    pieces = []
    for k in ids:
        f = token_frequency(int(k))
        pieces.append(env * (0.4 * np.sin(2 * np.pi * f * t) + 0.2 * np.sin(4 * np.pi * f * t)))
    clean = np.concatenate(pieces)
    noise = rng.standard_normal(clean.shape[0])
    p_clean = np.mean(clean**2)
    gain = np.sqrt(p_clean / (np.mean(noise**2) * 10.0 ** (snr_db / 10.0)))
    return clean + gain * noise


def synth_corpus(n_utts: int, alphabet_size: int, seed: int, out_dir, min_len=3, max_len=10):
    """Random letter strings rendered as tone sequences; fully determined by ``seed``."""
    if not 1 <= alphabet_size <= 12:
        raise DataError(f"alphabet_size must be in [1, 12], got {alphabet_size}")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    alphabet = [chr(ord("a") + i) for i in range(alphabet_size)]
    rng = np.random.default_rng(seed)
    records = []
    for u in range(n_utts):
        length = int(rng.integers(min_len, max_len + 1))
        ids = rng.integers(1, alphabet_size + 1, size=length)
        text = "".join(alphabet[i - 1] for i in ids)
        samples = render_tokens(ids, rng)
        peak = np.max(np.abs(samples))
        if peak > 0.99:
            samples = samples * (0.99 / peak)
        wav = wav_dir / f"utt{u:04d}.wav"
        write_wav(wav, AudioBuffer(samples))
        records.append(Record(wav, text, round(length * TOKEN_SECONDS, 6), wav.stem))
    manifest = CorpusManifest(records, "train")
    write_manifest(out_dir / "manifest.jsonl", manifest)
    return manifest


# -- scoring -------------------------------------------------------------------


@dataclass
class EditCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        if self.ref_length == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return self.errors / self.ref_length

    def __iadd__(self, other):
        self.substitutions += other.substitutions
        self.deletions += other.deletions
        self.insertions += other.insertions
        self.ref_length += other.ref_length
        return self


def align_counts(ref, hyp) -> EditCounts:
    """Unit-cost Levenshtein counts between two symbol sequences."""
    table = {}
    r = np.array([table.setdefault(x, len(table)) for x in ref], dtype=np.int64)
    h = np.array([table.setdefault(x, len(table)) for x in hyp], dtype=np.int64)
    s, d, i = kernels.edit_ops(r, h)
    return EditCounts(s, d, i, len(ref))


@dataclass
class EvalReport:
    chars: EditCounts
    words: EditCounts
    per_utterance: list[dict]

    @property
    def cer(self) -> float:
        return self.chars.rate

    @property
    def wer(self) -> float:
        return self.words.rate

    def to_dict(self) -> dict:
        def counts(c):
            return {"S": c.substitutions, "D": c.deletions, "I": c.insertions, "N": c.ref_length}

        return {
            "cer": self.cer,
            "wer": self.wer,
            "chars": counts(self.chars),
            "words": counts(self.words),
            "utterances": self.per_utterance,
        }

    def table(self) -> str:
        lines = [f"{'utt':>8}  {'cer%':>7}  {'wer%':>7}  ref | hyp"]
        for row in self.per_utterance:
            lines.append(
                f"{row['utt']:>8}  {100 * row['cer']:7.2f}  {100 * row['wer']:7.2f}  "
                f"{row['ref']} | {row['hyp']}"
            )
        lines.append(f"CER {100 * self.cer:.2f}%  WER {100 * self.wer:.2f}%")
        return "\n".join(lines)


def score(hyps, refs, utt_ids=None) -> EvalReport:
    """Corpus-pooled CER (characters) and WER (whitespace tokens)."""
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    utt_ids = utt_ids or [str(i) for i in range(len(refs))]
    chars, words, rows = EditCounts(), EditCounts(), []
    for utt, hyp, ref in zip(utt_ids, hyps, refs):
        c = align_counts(list(ref), list(hyp))
        w = align_counts(ref.split(), hyp.split())
        chars += c
        words += w
        rows.append({"utt": utt, "ref": ref, "hyp": hyp, "cer": c.rate, "wer": w.rate})
    return EvalReport(chars, words, rows)
