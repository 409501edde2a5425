"""``mcds`` command line: gen-data, train-concepts, label, train-policy, eval, sweep, analyze, pipeline.

Every command stages its outputs in a temporary directory beside the final
one and renames it into place only after it finishes, so a failed run
leaves nothing behind. Errors print a single JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path


from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .container import dump_json, file_sha256
from .dataset import read_dataset, write_dataset
from .env import all_task_ids, generate_demonstrations
from .errors import FingerprintMismatch, FormatError, NumericError, ValidationError
from .labels import read_labels, write_labels
from .policy import (SPLITS, SWEEP_FIELDS, PolicyAgent, evaluate_policy, policy_fingerprint, policy_from_bundle,
                     success_stderr, sweep_policy, train_policy, write_rows_csv)
from .trainer import concept_fingerprint, model_from_bundle, train

log = logging.getLogger("mcds")

EXIT_CODES = {FingerprintMismatch: 3, ValidationError: 2, FormatError: 4, NumericError: 5, FileNotFoundError: 4}


# ---------------------------------------------------------------- plumbing


@contextmanager
def staged(final: Path):
    """Yield a scratch directory that replaces ``final`` on success."""
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{final.name}-", dir=final.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if final.exists():
        shutil.rmtree(final)
    tmp.rename(final)


def write_run_files(d: Path, cfg: RunConfig, command: str, inputs: dict[str, Path], extra: dict | None = None) -> None:
    (d / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    prov = {"command": command, "version": __version__,
            "inputs": {k: {"path": str(p), "sha256": file_sha256(p)} for k, p in inputs.items()}}
    prov.update(extra or {})
    (d / "provenance.json").write_text(json.dumps(prov, indent=1, sort_keys=True))


def require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found at {path}")
    return path


def load_concepts(cfg: RunConfig, dataset):
    path = require(cfg.path("concepts"), "concept checkpoint")
    bundle = load_checkpoint(path)
    bundle.check_fingerprint(concept_fingerprint(dataset.modalities, cfg.model(), cfg.train), "concept checkpoint")
    return path, bundle


def load_labels_checked(cfg: RunConfig, dataset_path: Path, dataset):
    path = require(cfg.path("labels"), "concept labels")
    labels, prov = read_labels(path)
    if prov.get("dataset_sha256") != file_sha256(dataset_path):
        raise FingerprintMismatch(f"labels at {path} were computed for a different dataset file")
    expected = concept_fingerprint(dataset.modalities, cfg.model(), cfg.train)
    if prov.get("concept_fingerprint") != expected:
        raise FingerprintMismatch(f"labels at {path} came from a concept checkpoint trained under different settings")
    return path, labels


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig) -> Path:
    final = cfg.out() / "data"
    with staged(final) as d:
        ds = generate_demonstrations(cfg.env.spec(), cfg.env.n_demos, cfg.seed)
        write_dataset(ds, d / "dataset.mcds")
        write_run_files(d, cfg, "gen-data", {}, {"discarded": getattr(ds, "discarded", 0)})
    return final / "dataset.mcds"


def cmd_train_concepts(cfg: RunConfig) -> Path:
    ds_path = require(cfg.path("dataset"), "dataset")
    ds = read_dataset(ds_path)
    final = cfg.out() / "concepts"
    with staged(final) as d:
        res = train(ds, cfg.model(), cfg.train, out_dir=d)
        write_run_files(d, cfg, "train-concepts", {"dataset": ds_path}, {"fingerprint": res.bundle.fingerprint})
    return final / "checkpoint.mcck"


def cmd_label(cfg: RunConfig) -> Path:
    from .encoder import label_dataset

    ds_path = require(cfg.path("dataset"), "dataset")
    ds = read_dataset(ds_path)
    ck_path, bundle = load_concepts(cfg, ds)
    final = cfg.out() / "labels"
    with staged(final) as d:
        labels = label_dataset(ds, model_from_bundle(bundle).encoder)
        write_labels(labels, d / "labels.mccl", {"dataset_sha256": file_sha256(ds_path),
                                                 "concept_fingerprint": bundle.fingerprint})
        write_run_files(d, cfg, "label", {"dataset": ds_path, "concepts": ck_path})
    return final / "labels.mccl"


def cmd_train_policy(cfg: RunConfig) -> Path:
    ds_path = require(cfg.path("dataset"), "dataset")
    ds = read_dataset(ds_path)
    lab_path, labels = load_labels_checked(cfg, ds_path, ds)
    final = cfg.out() / "policy"
    with staged(final) as d:
        res = train_policy(ds, labels, cfg.policy.model(), cfg.policy.train(cfg.seed), all_task_ids(cfg.env.spec()))
        save_checkpoint(res.bundle, d / "checkpoint.mcck")
        with open(d / "metrics.jsonl", "w") as f:
            for m in res.metrics:
                f.write(json.dumps(m) + "\n")
        write_run_files(d, cfg, "train-policy", {"dataset": ds_path, "labels": lab_path},
                        {"fingerprint": res.bundle.fingerprint})
    return final / "checkpoint.mcck"


def cmd_eval(cfg: RunConfig) -> Path:
    pol_path = require(cfg.path("policy"), "policy checkpoint")
    bundle = load_checkpoint(pol_path)
    spec = cfg.env.spec()
    expected = policy_fingerprint([m for m in _modalities(bundle)], cfg.policy.model(), cfg.policy.train(cfg.seed),
                                  bundle.meta.get("concept_dim", -1))
    bundle.check_fingerprint(expected, "policy checkpoint")
    policy = policy_from_bundle(bundle)
    final = cfg.out() / "eval"
    with staged(final) as d:
        ev = evaluate_policy(PolicyAgent(policy), spec, cfg.policy.eval_episodes, cfg.seed)
        rows = [{"split": s, "success_rate": ev.success[s], "stderr": success_stderr([ev.success[s]], cfg.policy.eval_episodes),
                 "n_episodes": cfg.policy.eval_episodes, "seed": cfg.seed} for s in SPLITS]
        write_rows_csv(rows, d / "success.csv", ("split", "success_rate", "stderr", "n_episodes", "seed"))
        with open(d / "episodes.jsonl", "w") as f:
            for e in ev.episodes:
                f.write(json.dumps(e) + "\n")
        write_run_files(d, cfg, "eval", {"policy": pol_path})
    return final / "success.csv"


def cmd_sweep(cfg: RunConfig) -> Path:
    ds_path = require(cfg.path("dataset"), "dataset")
    ds = read_dataset(ds_path)
    lab_path, labels = load_labels_checked(cfg, ds_path, ds)
    p = cfg.policy
    final = cfg.out() / "sweep"
    with staged(final) as d:
        rows = sweep_policy(ds, labels, cfg.env.spec(), p.model(), p.train(cfg.seed), p.sweep_lambdas, p.sweep_layers,
                            p.sweep_seeds, p.eval_episodes)
        write_rows_csv(rows, d / "sweep.csv", SWEEP_FIELDS)
        write_run_files(d, cfg, "sweep", {"dataset": ds_path, "labels": lab_path})
    return final / "sweep.csv"


ANALYSES = ("similarity", "hierarchy", "diversity", "gallery", "cmi")


def cmd_analyze(cfg: RunConfig, which: list[str] | None = None) -> Path:
    from .analysis import run_analyses

    which = list(which or cfg.analysis.which)
    unknown = sorted(set(which) - set(ANALYSES))
    if unknown:
        raise ValidationError(f"unknown analysis name(s): {', '.join(unknown)}; choose from {', '.join(ANALYSES)}")
    ds_path = require(cfg.path("dataset"), "dataset")
    ds = read_dataset(ds_path)
    ck_path, bundle = load_concepts(cfg, ds)
    lab_path, labels = load_labels_checked(cfg, ds_path, ds)
    final = cfg.out() / "analysis"
    with staged(final) as d:
        summary = run_analyses(which, ds, labels, model_from_bundle(bundle), cfg.analysis, cfg.env.spec(), d)
        (d / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
        write_run_files(d, cfg, "analyze", {"dataset": ds_path, "concepts": ck_path, "labels": lab_path},
                        {"analyses": which})
    return final


def cmd_pipeline(cfg: RunConfig) -> dict:
    times = {}
    for name, fn in (("gen-data", cmd_gen_data), ("train-concepts", cmd_train_concepts), ("label", cmd_label),
                     ("train-policy", cmd_train_policy), ("eval", cmd_eval), ("analyze", cmd_analyze)):
        t = time.perf_counter()
        fn(cfg)
        times[name] = round(time.perf_counter() - t, 2)
        log.info("%s done in %.1fs", name, times[name])
    (cfg.out() / "pipeline_times.json").write_text(json.dumps(times, indent=1))
    return times


def _modalities(bundle):
    from .dataset import ModalitySpec

    return [ModalitySpec(**m) for m in bundle.meta["modalities"]]


# ---------------------------------------------------------------- entry point


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-concepts": cmd_train_concepts,
    "label": cmd_label,
    "train-policy": cmd_train_policy,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mcds", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key by dotted path, e.g. train.seed=7 (repeatable)")
        p.add_argument("--out-dir", help="shorthand for --set io.out_dir=...")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "analyze":
            p.add_argument("--which", nargs="+", choices=ANALYSES, help="analyses to run (default: analysis.which)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.out_dir:
            overrides.append(f"io.out_dir={json.dumps(args.out_dir)}")
        cfg = load_config(args.config, overrides)
        if args.command == "analyze":
            result = cmd_analyze(cfg, args.which)
        else:
            result = COMMANDS[args.command](cfg)
    except Exception as e:  # one parsable line, then a nonzero exit
        code = next((c for t, c in EXIT_CODES.items() if isinstance(e, t)), 1)
        print(dump_json({"error": type(e).__name__, "message": str(e), "command": args.command}), file=sys.stderr)
        return code
    print(dump_json({"ok": True, "command": args.command, "output": str(result) if not isinstance(result, dict) else result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
