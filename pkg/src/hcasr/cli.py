"""``asr`` command line: synth, featurize, train, decode, score, verify.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 verification failure. ``ASR_NUM_WORKERS`` sets the worker pool used for
feature extraction and decoding (output order never depends on it).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .corpus import Vocabulary, detokenize, load_manifest, normalize_text, score, synth_corpus
from .errors import AsrError, ConfigError, DataError
from .frontend import extract_streams, read_wav, write_ftmx
from .lm import CharNgramLm, train_char_lm
from .model import build_model
from .search import greedy_ctc_decode, joint_beam_search
from .training import NonFiniteLoss, TrainSettings, load_utterances, ordered_map, train

log = logging.getLogger("hcasr")

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(path) -> RunConfig:
    return config_mod.load(path) if path else RunConfig()


def _set_determinism(cfg: RunConfig):
    torch.manual_seed(cfg["optim.seed"])
    if cfg["optim.deterministic"]:
        torch.use_deterministic_algorithms(True)


def _write_jsonl(rows, out):
    text = "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# -- commands ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    manifest = synth_corpus(args.n_utts, args.alphabet_size, args.seed, args.out)
    print(f"wrote {len(manifest)} utterances to {Path(args.out) / 'manifest.jsonl'}")
    return 0


def cmd_featurize(args) -> int:
    cfg = _load_config(args.config)
    manifest = load_manifest(args.manifest)
    opts = cfg.frontend_options()
    policy = cfg.augment_policy() if args.augment else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(item):
        i, rec = item
        rng = np.random.default_rng([policy.rng_seed, 0, i]) if policy else None
        fbank, spec = extract_streams(read_wav(rec.audio_path), opts, policy, rng)
        write_ftmx(out / f"{rec.utt_id}.fbank.ftmx", fbank)
        write_ftmx(out / f"{rec.utt_id}.spec.ftmx", spec)
        return rec.utt_id, fbank.frames.shape

    for utt, shape in ordered_map(one, list(enumerate(manifest))):
        log.info("%s: %d frames", utt, shape[0])
    print(f"wrote features for {len(manifest)} utterances to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    overrides = {}
    if args.train_manifest:
        overrides["paths.train_manifest"] = args.train_manifest
    if args.out_dir:
        overrides["paths.out_dir"] = args.out_dir
    if args.max_steps is not None:
        overrides["optim.max_steps"] = args.max_steps
    if args.seed is not None:
        overrides["optim.seed"] = args.seed
    cfg.update(overrides)
    if not cfg["paths.train_manifest"]:
        raise ConfigError("no training manifest (set paths.train_manifest or --train-manifest)")
    cfg.check_paths("paths.train_manifest", "paths.dev_manifest")

    manifest = load_manifest(cfg["paths.train_manifest"])
    if not cfg["model.alphabet"]:
        cfg.update({"model.alphabet": Vocabulary.from_texts(
            normalize_text(r.transcript) for r in manifest).to_string()})
    vocab = Vocabulary(list(cfg["model.alphabet"]))
    out_dir = Path(cfg["paths.out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.toml")

    _set_determinism(cfg)
    dtype = DTYPES[cfg["optim.precision"]]
    model = build_model(cfg.model_config(), seed=cfg["optim.seed"], dtype=dtype)
    opts, policy = cfg.frontend_options(), cfg.augment_policy()
    utts = load_utterances(manifest, vocab, opts, policy, epoch=0)
    train_char_lm([u.target for u in utts], vocab, order=3).save(out_dir / "lm.txt")

    reaugment = None
    if policy is not None:
        def reaugment(epoch):
            return load_utterances(manifest, vocab, opts, policy, epoch=epoch)

    settings = TrainSettings(
        learning_rate=cfg["optim.learning_rate"], batch_size=cfg["optim.batch_size"],
        max_steps=cfg["optim.max_steps"], clip_norm=cfg["optim.clip_norm"], seed=cfg["optim.seed"],
        ctc_weight=cfg["loss.ctc_weight"], checkpoint_every=cfg["optim.checkpoint_every"],
        log_every=cfg["optim.log_every"], count_eos=cfg["loss.count_eos"],
        label_smoothing=cfg["loss.label_smoothing"],
    )
    digest = cfg.digest()
    try:
        rows = train(model, utts, settings, out_dir,
                     lambda path: save_checkpoint(path, model, digest), reaugment=reaugment)
    except NonFiniteLoss as exc:
        dump = out_dir / "nonfinite.json"
        dump.write_text(json.dumps({"error": str(exc), "utterances": exc.utts}) + "\n")
        raise
    save_checkpoint(out_dir / "checkpoint_final.hcam", model, digest)
    last = rows[-1] if rows else None
    summary = f"trained {settings.max_steps} steps; checkpoint {out_dir / 'checkpoint_final.hcam'}"
    if last:
        summary += f"; loss {last['loss_hybrid']:.4f} beta {last['beta']:.4f}"
    print(summary)
    return 0


def _load_lm(path, vocab: Vocabulary) -> CharNgramLm:
    lm = CharNgramLm.load(path)
    if lm.vocab != vocab:
        raise DataError(f"{path}: LM alphabet {lm.vocab.to_string()!r} does not match the model's "
                        f"{vocab.to_string()!r}")
    return lm


def decode_records(cfg: RunConfig, checkpoint, manifest_path, widths=None, lm_path=None,
                   ctc_weight=None, lm_weight=None, greedy=False, force=False):
    """Decode every utterance of a manifest; one record per (block, utterance)."""
    if not cfg["model.alphabet"]:
        raise ConfigError("config has no model.alphabet; decode with the config written by train")
    vocab = Vocabulary(list(cfg["model.alphabet"]))
    overrides = {}
    if ctc_weight is not None:
        overrides["decode.ctc_weight"] = ctc_weight
    if lm_weight is not None:
        overrides["decode.lm_weight"] = lm_weight
    cfg.update(overrides)

    _set_determinism(cfg)
    dtype = DTYPES[cfg["optim.precision"]]
    model = build_model(cfg.model_config(), seed=0, dtype=dtype)
    load_checkpoint(checkpoint, model, cfg.digest(), force=force)
    model.eval()
    lm = _load_lm(lm_path, vocab) if lm_path else None
    manifest = load_manifest(manifest_path, split_tag="test")
    opts = cfg.frontend_options()

    @torch.no_grad()
    def encode(rec):
        fbank, spec = extract_streams(read_wav(rec.audio_path), opts)
        f = torch.as_tensor(fbank.frames, dtype=dtype)[None]
        s = torch.as_tensor(spec.frames, dtype=dtype)[None]
        h, _ = model.encode(f, s, torch.tensor([f.shape[1]]))
        return rec.utt_id, normalize_text(rec.transcript), h[0]

    encoded = ordered_map(encode, list(manifest))
    if greedy:
        return [{"utt": utt, "block": "greedy", "hyp": detokenize(
            greedy_ctc_decode(model.ctc_log_probs(h)), vocab), "ref": ref}
                for utt, ref, h in encoded]

    if widths is None:
        widths = cfg["decode.sweep_widths"] or [cfg["decode.beam_width"]]
    rows = []
    for width in widths:
        beam = cfg.beam_config(with_lm=lm is not None, width=int(width))
        block = f"width{width}" + ("-lm" if lm is not None else "")

        def one(item, beam=beam, block=block):
            utt, ref, h = item
            result = joint_beam_search(h, model, lm, beam)
            best = result.best
            return {
                "utt": utt, "block": block, "width": beam.width, "ctc_weight": beam.ctc_weight,
                "lm_weight": beam.lm_weight, "hyp": detokenize(best.tokens, vocab), "ref": ref,
                "score_joint": best.score_joint, "score_ctc": best.score_ctc,
                "score_att": best.score_att, "score_lm": best.score_lm, "status": result.status,
            }

        rows.extend(ordered_map(one, encoded))
    return rows


def cmd_decode(args) -> int:
    checkpoint = args.checkpoint
    config_path = args.config
    if config_path is None and checkpoint and (Path(checkpoint).parent / "config.toml").exists():
        config_path = Path(checkpoint).parent / "config.toml"
    cfg = _load_config(config_path)
    checkpoint = checkpoint or cfg["paths.checkpoint"]
    manifest = args.manifest or cfg["paths.test_manifest"]
    if not checkpoint or not manifest:
        raise ConfigError("decode needs a checkpoint and a manifest")
    for p in (checkpoint, manifest, args.lm):
        if p and not Path(p).exists():
            raise DataError(f"no such file: {p}")
    widths = [args.beam_width] if args.beam_width is not None else None
    rows = decode_records(cfg, checkpoint, manifest, widths, args.lm or cfg["paths.lm"] or None,
                          args.ctc_weight, args.lm_weight, args.greedy, args.force)
    _write_jsonl(rows, args.out)
    return 0


def _read_texts(path, prefer):
    rows = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{n}: invalid JSON ({exc.msg})") from None
        field = next((f for f in prefer if f in row), None)
        if field is None:
            raise DataError(f"{path}:{n}: none of the fields {', '.join(prefer)}")
        utt = row.get("utt") or Path(row.get("audio", f"line{n}")).stem
        block = row.get("block", "")
        rows[(block, utt)] = normalize_text(str(row[field]))
    return rows


def cmd_score(args) -> int:
    hyps = _read_texts(args.hyps, ("hyp", "text", "ref"))
    refs = None
    if args.refs:
        refs = {utt: text for (_, utt), text in _read_texts(args.refs, ("text", "ref", "hyp")).items()}
    else:
        refs = {utt: text for (_, utt), text in _read_texts(args.hyps, ("ref",)).items()}
    blocks: dict[str, list] = {}
    for (block, utt), hyp in hyps.items():
        blocks.setdefault(block, []).append((utt, hyp))
    report = {}
    for block, items in blocks.items():
        missing = [utt for utt, _ in items if utt not in refs]
        if missing:
            raise DataError(f"no reference for {', '.join(missing[:5])}")
        rep = score([h for _, h in items], [refs[u] for u, _ in items], [u for u, _ in items])
        report[block or "all"] = rep.to_dict()
        label = f"[{block}] " if block else ""
        print(f"{label}CER {100 * rep.cer:.2f}%  WER {100 * rep.wer:.2f}%")
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    return 0


def cmd_verify(args) -> int:
    from . import verification as V

    suites = {
        "ctc_oracle": lambda: V.ctc_oracle_suite(n_cases=40 if args.quick else 200, seed=args.seed),
        "decode_oracle": lambda: V.decode_oracle_suite(n_cases=5 if args.quick else 20, seed=args.seed),
        "gradients": lambda: V.gradient_suite(seed=args.seed, corrupt=args.corrupt_gradient,
                                              max_coords=20 if args.quick else 200),
    }
    names = args.suite or list(suites)
    results = [suites[n]() for n in names]
    report = {"passed": all(r.passed for r in results), "suites": [r.to_dict() for r in results]}
    text = json.dumps(report, indent=1, default=float)
    print(text)
    if args.json:
        Path(args.json).write_text(text + "\n", encoding="utf-8")
    return 0 if report["passed"] else 3


# -- wiring ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="asr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic tone corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-utts", type=int, default=50)
    p.add_argument("--alphabet-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="dump fbank and spectrogram FTMX files")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--augment", action="store_true", help="apply the config's augmentation")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train the hybrid model")
    p.add_argument("--config")
    p.add_argument("--train-manifest")
    p.add_argument("--out-dir")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="joint CTC/attention beam search over a manifest")
    p.add_argument("--config", help="defaults to config.toml next to the checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--out", help="JSON-lines output (default stdout)")
    p.add_argument("--beam-width", type=int)
    p.add_argument("--ctc-weight", type=float)
    p.add_argument("--lm-weight", type=float)
    p.add_argument("--lm", help="character n-gram LM file; enables shallow fusion")
    p.add_argument("--greedy", action="store_true", help="greedy CTC decoding instead")
    p.add_argument("--force", action="store_true", help="ignore a config digest mismatch")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="CER and WER of hypotheses against references")
    p.add_argument("hyps")
    p.add_argument("refs", nargs="?", help="manifest or JSON lines; default: the hyps' ref fields")
    p.add_argument("--json")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("verify", help="run the oracle and gradient suites")
    p.add_argument("--suite", action="append", choices=["ctc_oracle", "decode_oracle", "gradients"])
    p.add_argument("--quick", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json")
    p.add_argument("--corrupt-gradient", type=float, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AsrError as exc:
        print(f"asr {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"asr {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
