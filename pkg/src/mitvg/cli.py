"""Command-line front end.

Subcommands cover the whole artifact life cycle: ``synth`` writes a
synthetic benchmark, ``train`` fits a model, ``eval`` ranks candidate
answers, ``generate`` decodes one answer greedily, and ``gradcheck``
verifies analytic gradients against finite differences.

Exit codes: 0 success, 2 usage/config/data error, 3 numerical failure.
Outputs carry no timestamps, so rerunning a command with identical
arguments reproduces its files byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .data import (DialogueExample, attach_features, build_vocab, corpus_token_sequences,
                   generate_synthetic, load_dataset, load_features, write_dataset,
                   write_features)
from .errors import ContractError, DataError, FormatError, NumericalError
from .evaluation import evaluate
from .model import MitvgModel, ModelConfig
from .tensor import grad_check
from .train import train

VERSION_STRING = f"mitvg-{__version__}"


@dataclass
class RunManifest:
    """Reproducibility sidecar written next to every command's outputs."""

    command: str
    config: dict
    seed: int
    inputs: list[str]
    outputs: list[str]
    version: str = VERSION_STRING

    def write(self, path: Path) -> None:
        payload = dataclasses.asdict(self)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")


def _coerce(name: str, raw: str, template) -> object:
    if isinstance(template, bool):
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ContractError(f"config key {name}: expected a boolean, got {raw!r}")
    try:
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
    except ValueError:
        raise ContractError(f"config key {name}: cannot parse {raw!r}")
    return raw.strip()


def parse_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    defaults = ModelConfig()
    values: dict = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ContractError(f"cannot read config {path}: {exc}")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ContractError(f"config line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if not hasattr(defaults, key):
            raise ContractError(f"unknown config key: {key}")
        values[key] = _coerce(key, raw, getattr(defaults, key))
    return values


def _load_config(args) -> ModelConfig:
    values = parse_config_file(args.config) if args.config else {}
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "no_vg", False):
        values["use_vg"] = False
    return ModelConfig.from_dict(values)


def _load_corpus(data_dir) -> list[DialogueExample]:
    data_dir = Path(data_dir)
    examples = load_dataset(data_dir / "dialogues.jsonl")
    features = load_features(data_dir / "features.bin")
    attach_features(examples, features)
    return examples


# -- subcommands ------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.dialogues < 1:
        raise ContractError("--dialogues must be >= 1")
    if args.rounds < 1:
        raise ContractError("--rounds must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    examples, features = generate_synthetic(args.dialogues, args.rounds, args.seed,
                                            feature_dim=args.feature_dim)
    write_dataset(examples, out / "dialogues.jsonl")
    write_features(features, out / "features.bin")
    vocab = build_vocab(corpus_token_sequences(examples), min_count=1)
    vocab.save(out / "vocab.json")
    manifest = RunManifest(
        command="synth",
        config={"dialogues": args.dialogues, "rounds": args.rounds,
                "feature_dim": args.feature_dim},
        seed=args.seed,
        inputs=[],
        outputs=[str(out / name) for name in
                 ("dialogues.jsonl", "features.bin", "vocab.json")],
    )
    manifest.write(out / "manifest.json")
    print(f"wrote {len(examples)} dialogues to {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    examples = _load_corpus(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.init_ckpt:
        model = MitvgModel.load(args.init_ckpt)
        if args.config and model.config.d_model != config.d_model:
            raise ContractError(
                f"checkpoint d_model {model.config.d_model} != config d_model {config.d_model}"
            )
        # shapes come from the checkpoint; run-level knobs come from this invocation
        model.config = dataclasses.replace(
            model.config, seed=config.seed, use_vg=config.use_vg,
            warmup_steps=config.warmup_steps, grad_accum=config.grad_accum,
            length_normalized_scores=config.length_normalized_scores,
        )
        config = model.config
    else:
        vocab = build_vocab(corpus_token_sequences(examples),
                            min_count=config.vocab_min_count)
        model = MitvgModel(config, vocab)

    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as fh:
        result = train(
            model, examples, args.steps, seed=config.seed,
            on_step=lambda r: fh.write(
                json.dumps({"step": r.step, "loss": r.loss, "lr": r.lr}) + "\n"),
        )
    model.save(out / "model.ckpt")
    from .report import save_loss_curve
    save_loss_curve(result.records, out / "loss.png")
    manifest = RunManifest(
        command="train",
        config=dataclasses.asdict(model.config) | {"steps": args.steps},
        seed=config.seed,
        inputs=[str(Path(args.data) / "dialogues.jsonl"),
                str(Path(args.data) / "features.bin")],
        outputs=[str(out / name) for name in ("model.ckpt", "metrics.jsonl", "loss.png")],
    )
    manifest.write(out / "manifest.json")
    print(f"trained {args.steps} steps, final loss {result.final_loss:.4f}")
    return 0


def cmd_eval(args) -> int:
    model = MitvgModel.load(args.ckpt)
    if args.config:
        wanted = ModelConfig.from_dict(parse_config_file(args.config))
        if wanted.d_model != model.config.d_model:
            raise ContractError(
                f"checkpoint d_model {model.config.d_model} != config d_model {wanted.d_model}"
            )
    examples = _load_corpus(args.data)
    use_vg = False if args.no_vg else None
    report = evaluate(model, examples, use_vg=use_vg)
    print(json.dumps(report.summary, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(
            json.dumps(report.summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        with open(out / "details.jsonl", "w", encoding="utf-8") as fh:
            for d in report.details:
                fh.write(json.dumps(dataclasses.asdict(d)) + "\n")
        from .report import save_rank_histogram
        save_rank_histogram(report.details, out / "ranks.png")
        manifest = RunManifest(
            command="eval",
            config=dataclasses.asdict(model.config),
            seed=model.config.seed,
            inputs=[str(args.ckpt), str(Path(args.data) / "dialogues.jsonl")],
            outputs=[str(out / name) for name in ("report.json", "details.jsonl", "ranks.png")],
        )
        manifest.write(out / "manifest.json")
    return 0


def cmd_generate(args) -> int:
    model = MitvgModel.load(args.ckpt)
    examples = _load_corpus(args.data)
    matches = [ex for ex in examples if ex.image_id == args.example]
    if not matches:
        raise DataError(f"no dialogue with image_id {args.example}")
    example = matches[0]
    use_vg = False if args.no_vg else None
    c_t, v_g = model.encode_dialogue(example, args.round, use_vg=use_vg)
    print(model.generate_text(c_t, v_g))
    return 0


def cmd_gradcheck(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    tiny = dataclasses.asdict(ModelConfig.tiny())
    tiny.update(values)
    config = ModelConfig.from_dict(tiny)
    if config.precision != "float64":
        raise ContractError("gradient verification requires precision = float64")

    examples, features = generate_synthetic(1, 2, seed=config.seed,
                                            feature_dim=config.feature_dim)
    attach_features(examples, features)
    vocab = build_vocab(corpus_token_sequences(examples), min_count=config.vocab_min_count)
    model = MitvgModel(config, vocab)
    params = model.parameters()
    err = grad_check(lambda: model.forward_loss(examples[0], 2), params)
    print(f"max relative gradient error: {err:.3e}")
    if err >= args.threshold:
        raise NumericalError(f"gradient error {err:.3e} >= {args.threshold:.1e}")
    return 0


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mitvg",
                                     description="Visually grounded dialogue toolkit")
    parser.add_argument("--version", action="version", version=VERSION_STRING)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--dialogues", type=int, required=True)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature-dim", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-vg", action="store_true",
                   help="ablation arm: ignore grounding indices")
    p.add_argument("--init-ckpt", help="start from an existing checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank candidate answers and report metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", help="optional config to cross-check against the checkpoint")
    p.add_argument("--out", help="directory for report files")
    p.add_argument("--no-vg", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="greedily decode one answer")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--example", type=int, required=True, help="image id")
    p.add_argument("--round", type=int, required=True)
    p.add_argument("--no-vg", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--config")
    p.add_argument("--threshold", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, DataError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
