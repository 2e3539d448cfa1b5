"""Config-driven orchestration of the pipeline stages.

Subcommands mirror the pipeline: fit, generate, filter, distill, analyze,
and transfer (the full loop). Flags override config-file fields, which
override defaults. Exit codes: 0 success, 1 runtime failure, 2 config error.
All outputs land under the output directory with fixed names: models/,
dataset.jsonl, discards.jsonl, report.json.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, distill, synthgen
from .config import RunConfig, load_config, overlay_flags
from .corpus import (
    Dataset,
    Example,
    Manifest,
    TokenSequence,
    Vocabulary,
    build_vocabulary,
    load_dataset,
    save_dataset,
    tokenize,
)
from .errors import ConfigError, DeltaDistillError
from .lm import TabularModel, apply_fine_tune, fit_tabular, load_model, save_model
from .remote import CompletionClient, RemoteEndpoint, ResponseCache
from .scoring import GenConfig, ScoredPair, corpus_perplexity


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        config = _effective_config(args)
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with _output_lock(out_dir):
            return args.handler(config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DeltaDistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deltadistill")
    parser.set_defaults(command=None)
    sub = parser.add_subparsers(dest="command")

    def add(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="path to a JSON config file")
        p.add_argument("--seed", type=int, default=None, help="rng seed override")
        p.add_argument("--rule", default=None, help="filter rule name")
        p.add_argument("--tau", type=float, default=None, help="filter threshold override")
        p.add_argument("--target-size", type=int, default=None, dest="target_size")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.set_defaults(handler=handler)
        return p

    add("fit", _cmd_fit, "fit the base model and apply the fine-tune delta")
    add("generate", _cmd_generate, "run iterative generation and filtering without distilling")
    p_filter = add("filter", _cmd_filter, "re-apply a filter rule to an already-scored dataset")
    p_filter.add_argument("--dataset", default=None, help="scored dataset path (default: <out>/dataset.jsonl)")
    p_distill = add("distill", _cmd_distill, "train a target model from a dataset file")
    p_distill.add_argument("--dataset", default=None, help="dataset path (default: <out>/dataset.jsonl)")
    p_analyze = add("analyze", _cmd_analyze, "emit margin decompositions, histograms, and diversity")
    p_analyze.add_argument("--dataset", default=None, help="dataset path (default: <out>/dataset.jsonl)")
    add("transfer", _cmd_transfer, "full pipeline: generate, filter, and distill")
    return parser


def _effective_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    return overlay_flags(
        config,
        rng_seed=args.seed,
        rule=args.rule,
        tau=args.tau,
        target_size=args.target_size,
        workers=args.workers,
        out_dir=args.out,
    )


@contextmanager
def _output_lock(out_dir: Path):
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"another run holds the output directory lock: {lock}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _require_file(config: RunConfig, field_name: str) -> Path:
    value = getattr(config, field_name)
    if not value:
        raise ConfigError(f"{field_name}: path is not set")
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"{field_name}: path {value!r} does not exist")
    return path


def _read_lines(path: Path) -> list[str]:
    return [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _fit_models(config: RunConfig):
    base_path = _require_file(config, "base_corpus")
    ft_path = _require_file(config, "ft_corpus")
    vocab_text = _read_lines(base_path) + _read_lines(ft_path)
    if config.seed_data and Path(config.seed_data).exists():
        for ex in load_dataset(config.seed_data):
            vocab_text.append(ex.prompt)
            vocab_text.append(ex.response)
    vocab = build_vocabulary(vocab_text, config.max_vocab)

    base_seqs = [tokenize(line, vocab) for line in _read_lines(base_path)]
    ft_seqs = [tokenize(line, vocab) for line in _read_lines(ft_path)]
    base = fit_tabular(base_seqs, config.order, config.alpha, vocab, model_id="base")
    finetuned = apply_fine_tune(base, ft_seqs, config.lam, model_id="finetuned")
    return vocab, base, finetuned


def _model_paths(out_dir: Path) -> dict[str, Path]:
    models = out_dir / "models"
    return {
        "vocab": models / "vocab.json",
        "base": models / "base.model",
        "finetuned": models / "finetuned.model",
        "target": models / "target.model",
    }


def _cmd_fit(config: RunConfig, args: argparse.Namespace) -> int:
    out_dir = Path(config.out_dir)
    vocab, base, finetuned = _fit_models(config)
    paths = _model_paths(out_dir)
    paths["vocab"].parent.mkdir(parents=True, exist_ok=True)
    chash = config.config_hash()
    with open(paths["vocab"], "w", encoding="utf-8") as fh:
        json.dump({"config_hash": chash, **vocab.to_json()}, fh, sort_keys=True)
    save_model(base, paths["base"], config_hash=chash)
    save_model(finetuned, paths["finetuned"], config_hash=chash)
    print(f"wrote {paths['base']} and {paths['finetuned']} (|V|={len(vocab)})")
    return 0


def _load_or_fit_models(config: RunConfig):
    paths = _model_paths(Path(config.out_dir))
    if paths["vocab"].exists() and paths["base"].exists() and paths["finetuned"].exists():
        with open(paths["vocab"], encoding="utf-8") as fh:
            vocab_obj = json.load(fh)
        if vocab_obj.get("config_hash") != config.config_hash():
            print("warning: model files were built under a different config hash", file=sys.stderr)
        vocab = Vocabulary.from_json(vocab_obj)
        return vocab, load_model(paths["base"], vocab), load_model(paths["finetuned"], vocab)
    return _fit_models(config)


def _load_seeds(config: RunConfig) -> list[Example]:
    seed_path = _require_file(config, "seed_data")
    seeds = []
    for ex in load_dataset(seed_path):
        seeds.append(replace(ex, provenance="seed", iteration=0))
    if not seeds:
        raise ConfigError("seed_data: file contains no examples")
    return seeds


def _build_strategy(config: RunConfig, vocab: Vocabulary) -> synthgen.GenerationStrategy:
    if config.strategy == "prefix_resample":
        return synthgen.GenerationStrategy(
            kind="prefix_resample",
            vocab=vocab,
            batch_size=config.batch_size,
            demonstrations=config.demonstrations,
            prompt_order=config.prompt_order,
            prompt_alpha=config.prompt_alpha,
            prompt_temperature=config.prompt_temperature,
            prompt_max_len=config.prompt_max_len,
        )
    if config.strategy == "instruction_template":
        if not config.endpoint_url:
            raise ConfigError("endpoint_url: required for the instruction_template strategy")
        endpoint = RemoteEndpoint(
            base_url=config.endpoint_url,
            model=config.endpoint_model,
            api_key_env=config.api_key_env,
            timeout=config.endpoint_timeout,
            max_retries=config.endpoint_retries,
        )
        cache_dir = config.cache_dir or str(Path(config.out_dir) / "cache")
        client = CompletionClient(endpoint, cache=ResponseCache(cache_dir))
        return synthgen.GenerationStrategy(
            kind="instruction_template",
            vocab=vocab,
            batch_size=config.batch_size,
            demonstrations=config.demonstrations,
            client=client,
            endpoint_temperature=config.temperature,
            demos_include_responses=config.demos_include_responses,
        )
    raise ConfigError(f"strategy: unknown strategy {config.strategy!r}")


def _persist_models(config: RunConfig, vocab: Vocabulary, base, finetuned) -> None:
    paths = _model_paths(Path(config.out_dir))
    paths["vocab"].parent.mkdir(parents=True, exist_ok=True)
    chash = config.config_hash()
    if not paths["vocab"].exists():
        with open(paths["vocab"], "w", encoding="utf-8") as fh:
            json.dump({"config_hash": chash, **vocab.to_json()}, fh, sort_keys=True)
    if not paths["base"].exists():
        save_model(base, paths["base"], config_hash=chash)
    if not paths["finetuned"].exists():
        save_model(finetuned, paths["finetuned"], config_hash=chash)


def _run_generation(config: RunConfig):
    vocab, base, finetuned = _load_or_fit_models(config)
    _persist_models(config, vocab, base, finetuned)
    seeds = _load_seeds(config)
    pool = synthgen.GenerationPool.from_seeds(seeds, np.random.default_rng(config.rng_seed))
    strategy = _build_strategy(config, vocab)
    gen_config = GenConfig(max_len=config.max_len, temperature=config.temperature)
    synth = synthgen.build_dataset(
        pool,
        strategy,
        finetuned,
        base,
        config.filter_rule(),
        target_size=config.target_size,
        max_iterations=config.max_iterations,
        gen_config=gen_config,
        workers=config.workers,
        config_hash=config.config_hash(),
    )
    return vocab, base, finetuned, synth


def _write_synth_outputs(config: RunConfig, synth: synthgen.SyntheticDataset) -> None:
    out_dir = Path(config.out_dir)
    save_dataset(synth.dataset, out_dir / "dataset.jsonl")
    discards = Dataset(examples=synth.discarded, manifest=Manifest(config_hash=config.config_hash()))
    save_dataset(discards, out_dir / "discards.jsonl")


def read_probes(path: str | Path, vocab: Vocabulary, append_eos: bool = True) -> list[tuple[TokenSequence, TokenSequence]]:
    """(prompt, response) probe pairs from a JSONL file of prompt/response records."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            if record.get("type") == "manifest":
                continue
            response = tokenize(record["response"], vocab)
            if append_eos:
                response = TokenSequence(response.ids + (vocab.eos_id,), vocab)
            pairs.append((tokenize(record["prompt"], vocab), response))
    return pairs


def _probe_report(config: RunConfig, vocab: Vocabulary, target) -> dict:
    report: dict = {}
    prior = TabularModel(vocab, config.target_order, config.target_alpha, {}, model_id="target-prior")
    for name, path in (("in_domain", config.in_domain_probes), ("out_domain", config.out_domain_probes)):
        if not path:
            continue
        probes = read_probes(path, vocab)
        report[name] = {
            "pre": corpus_perplexity(prior, probes),
            "post": corpus_perplexity(target, probes),
        }
    return report


def _margin_stats(synth: synthgen.SyntheticDataset) -> dict:
    kept = [ex.margin for ex in synth.kept]
    everything = kept + [ex.margin for ex in synth.discarded]
    def stats(values):
        if not values:
            return {"count": 0}
        return {
            "count": len(values),
            "mean": float(np.mean(values)),
            "min": float(min(values)),
            "max": float(max(values)),
        }
    return {"kept": stats(kept), "all": stats(everything)}


def _cmd_generate(config: RunConfig, args: argparse.Namespace) -> int:
    _vocab, _base, _finetuned, synth = _run_generation(config)
    _write_synth_outputs(config, synth)
    report = {
        "config_hash": config.config_hash(),
        "rule": config.filter_rule().rule_id,
        "keep_rate": synth.keep_rate,
        "kept": len(synth.kept),
        "budget_exhausted": synth.budget_exhausted,
        "iterations": [s.to_record() for s in synth.stats],
        "margins": _margin_stats(synth),
    }
    _write_report(config, report)
    return 1 if synth.budget_exhausted else 0


def _cmd_transfer(config: RunConfig, args: argparse.Namespace) -> int:
    vocab, _base, _finetuned, synth = _run_generation(config)
    _write_synth_outputs(config, synth)

    out_dir = Path(config.out_dir)
    paths = _model_paths(out_dir)
    paths["target"].parent.mkdir(parents=True, exist_ok=True)
    target_report: dict = {"kind": config.target_kind}
    if config.target_kind == "gradient":
        target, trajectory = distill.distill_gradient(
            synth.dataset,
            vocab,
            order=config.target_order,
            config=distill.TrainConfig(
                epochs=config.epochs,
                learning_rate=config.learning_rate,
                rng_seed=config.rng_seed,
                report_every=config.report_every,
            ),
        )
        _write_loss_log(out_dir, trajectory, config.report_every, config.epochs)
        target_report["final_loss"] = trajectory[-1]
    elif config.target_kind == "tabular":
        target = distill.distill_tabular(synth.dataset, vocab, order=config.target_order, alpha=config.target_alpha)
    else:
        raise ConfigError(f"target_kind: unknown kind {config.target_kind!r}")
    save_model(target, paths["target"], config_hash=config.config_hash())

    report = {
        "config_hash": config.config_hash(),
        "rule": config.filter_rule().rule_id,
        "keep_rate": synth.keep_rate,
        "kept": len(synth.kept),
        "budget_exhausted": synth.budget_exhausted,
        "iterations": [s.to_record() for s in synth.stats],
        "margins": _margin_stats(synth),
        "target": target_report,
        "probes": _probe_report(config, vocab, target),
    }
    _write_report(config, report)
    print(json.dumps({"kept": len(synth.kept), "keep_rate": synth.keep_rate}, sort_keys=True))
    return 1 if synth.budget_exhausted else 0


def _cmd_filter(config: RunConfig, args: argparse.Namespace) -> int:
    dataset_path = args.dataset or str(Path(config.out_dir) / "dataset.jsonl")
    ds = load_dataset(dataset_path)
    _warn_hash_mismatch(config, ds)
    rule = config.filter_rule()
    out_examples = []
    changed = 0
    for ex in ds:
        if ex.ppl_f is None or ex.ppl_b is None:
            out_examples.append(ex)
            continue
        kept = rule.keeps(ex.ppl_f, ex.ppl_b)
        if kept != ex.kept:
            changed += 1
        out_examples.append(replace(ex, kept=kept, rule=rule.rule_id))
    filtered = Dataset(examples=out_examples, manifest=Manifest(config_hash=config.config_hash()))
    out_path = Path(config.out_dir) / "filtered.jsonl"
    save_dataset(filtered, out_path)
    kept_count = sum(1 for ex in out_examples if ex.kept)
    print(f"wrote {out_path}: {kept_count} kept under {rule.rule_id} ({changed} verdicts changed)")
    return 0


def _cmd_distill(config: RunConfig, args: argparse.Namespace) -> int:
    dataset_path = args.dataset or str(Path(config.out_dir) / "dataset.jsonl")
    ds = load_dataset(dataset_path)
    _warn_hash_mismatch(config, ds)
    out_dir = Path(config.out_dir)
    vocab, _base, _finetuned = _load_or_fit_models(config)
    paths = _model_paths(out_dir)
    paths["target"].parent.mkdir(parents=True, exist_ok=True)
    if config.target_kind == "gradient":
        target, trajectory = distill.distill_gradient(
            ds,
            vocab,
            order=config.target_order,
            config=distill.TrainConfig(
                epochs=config.epochs,
                learning_rate=config.learning_rate,
                rng_seed=config.rng_seed,
                report_every=config.report_every,
            ),
        )
        _write_loss_log(out_dir, trajectory, config.report_every, config.epochs)
        print(f"final loss: {trajectory[-1]:.6f}")
    else:
        target = distill.distill_tabular(ds, vocab, order=config.target_order, alpha=config.target_alpha)
    save_model(target, paths["target"], config_hash=config.config_hash())
    print(f"wrote {paths['target']}")
    return 0


def _cmd_analyze(config: RunConfig, args: argparse.Namespace) -> int:
    dataset_path = args.dataset or str(Path(config.out_dir) / "dataset.jsonl")
    ds = load_dataset(dataset_path)
    _warn_hash_mismatch(config, ds)
    vocab, base, finetuned = _load_or_fit_models(config)
    out_dir = Path(config.out_dir) / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest_line = json.dumps({"type": "manifest", "config_hash": config.config_hash()}, sort_keys=True)
    with open(out_dir / "decompositions.jsonl", "w", encoding="utf-8") as fh:
        fh.write(manifest_line + "\n")
        for domain, path in (("in_domain", config.in_domain_probes), ("out_domain", config.out_domain_probes)):
            if not path:
                continue
            for prompt_seq, _response in read_probes(path, vocab, append_eos=False):
                decomp = analysis.decompose_margin(
                    finetuned, base, prompt_seq, config.enum_length, config.enumeration_budget
                )
                record = {"domain": domain, "prompt": prompt_seq.text(), **decomp.to_record()}
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    scored = [
        ScoredPair(prompt=ex.prompt, response_f=ex.response, response_b="", ppl_f=ex.ppl_f, ppl_b=ex.ppl_b)
        for ex in ds
        if ex.ppl_f is not None and ex.ppl_b is not None
    ]
    edges = (1.0, 1.25, 1.5, 2.0, 3.0, 5.0, 10.0)
    with open(out_dir / "histograms.jsonl", "w", encoding="utf-8") as fh:
        fh.write(manifest_line + "\n")
        for which in ("f", "b"):
            hist = analysis.perplexity_histogram(scored, which, edges)
            fh.write(json.dumps({"which": which, **hist.to_record()}, sort_keys=True) + "\n")

    prompts = [ex.prompt for ex in ds if ex.provenance == "generated"] or [ex.prompt for ex in ds]
    with open(out_dir / "diversity.jsonl", "w", encoding="utf-8") as fh:
        fh.write(manifest_line + "\n")
        for n in (1, 2, 3):
            fh.write(json.dumps({"n": n, "distinct_n": analysis.distinct_n(prompts, n)}, sort_keys=True) + "\n")

    print(f"wrote analysis artifacts under {out_dir}")
    return 0


def _write_loss_log(out_dir: Path, trajectory: list[float], report_every: int, epochs: int) -> None:
    epochs_logged = [0] + [e for e in range(1, epochs + 1) if e % report_every == 0 or e == epochs]
    with open(out_dir / "loss.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in zip(epochs_logged, trajectory):
            fh.write(f"{epoch},{loss!r}\n")


def _warn_hash_mismatch(config: RunConfig, ds: Dataset) -> None:
    if ds.manifest.config_hash and ds.manifest.config_hash != config.config_hash():
        print("warning: dataset was produced under a different config hash", file=sys.stderr)


def _write_report(config: RunConfig, report: dict) -> None:
    with open(Path(config.out_dir) / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")


if __name__ == "__main__":
    sys.exit(main())
