"""Command-line entry point: ``metabaseline <command> ...``.

Commands that produce a directory of results write ``manifest.json`` there
first, listing the resolved configuration, input hashes and every output file.
``metabaseline run <manifest>`` replays an experiment from such a manifest.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
Errors print one JSON line to stderr: ``{"error": <kind>, "message": ...}``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .binio import FormatError
from .data import (ConfigError, SplitSpec, SyntheticSpec, generate_synthetic, load_dataset,
                   save_dataset, split_by_supercategory, split_pool, split_shuffled)
from .episodes import EpisodeSpec, SamplingError
from .evaluation import (DEFAULT_TASKS, GeneralizationCurve, Monitor, evaluate, format_results,
                         track_generalization, write_results_jsonl)
from .experiments import (QUICK, DeskPreset, Runner, run_dataset_property_sweep, run_generalization,
                          run_metric_ablation, run_scratch_ablation)
from .pipelines import (TrainConfig, classification_config, load_model, meta_config, save_model,
                        train_classification, train_meta, write_metrics)
from .plot import save_curve_svg
from .tensor import DomainError, NumericError

log = logging.getLogger("metabaseline")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
PRESETS = {"desk": DeskPreset(), "quick": QUICK}


# -- manifests --------------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed: int | None,
                   inputs: dict[str, str], outputs: list[str]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in inputs.items()},
        "output_dir": str(out_dir),
        "outputs": sorted(outputs + ["output_hashes.json"]),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_output_hashes(out_dir: Path, outputs: list[str]) -> dict[str, str]:
    hashes = {name: sha256_file(out_dir / name) for name in sorted(outputs) if (out_dir / name).exists()}
    (out_dir / "output_hashes.json").write_text(json.dumps(hashes, indent=2, sort_keys=True) + "\n")
    return hashes


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e


def _load_train_config(path, stage: str, seed: int | None) -> TrainConfig:
    if path is None:
        cfg = classification_config() if stage == "classification" else meta_config()
    else:
        d = _load_json(path)
        base = classification_config() if stage == "classification" else meta_config()
        cfg = TrainConfig.from_dict({**base.to_dict(), **d})
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if cfg.stage != stage:
        raise ConfigError(f"config stage is {cfg.stage!r}, expected {stage!r}")
    cfg.validate()
    return cfg


# -- commands -----------------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    fields = _load_json(args.spec) if args.spec else {}
    if args.seed is not None:
        fields["seed"] = args.seed
    try:
        spec = SyntheticSpec(**fields)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    ds = generate_synthetic(spec, name=Path(args.out).stem)
    save_dataset(ds, args.out, manifest={"generator": "synthetic", "spec": spec.to_dict(),
                                         "version": __version__})
    print(f"wrote {args.out} ({ds.num_classes} classes, dim {ds.sample_dim})")


def cmd_split(args) -> None:
    ds = load_dataset(args.dataset)
    fractions = tuple(args.fractions) if args.fractions else ((8, 2, 2) if args.mode == "super" else (40, 10, 10))
    if len(fractions) != 3:
        raise ConfigError("--fractions needs three values")
    if args.mode == "super":
        split = split_by_supercategory(ds, fractions, args.seed, args.holdout)
    else:
        split = split_shuffled(ds, fractions, args.seed, args.holdout)
    split.save(args.out)
    print(f"wrote {args.out} (base {len(split.base)}, val {len(split.val)}, novel {len(split.novel)})")


def _train_outputs(prefix: str) -> list[str]:
    return [f"{prefix}_metrics.jsonl", f"{prefix}_metrics.csv", f"{prefix}.fsck", f"{prefix}_state.fsck",
            "config.json"]


def cmd_train(args, stage: str) -> None:
    cfg = _load_train_config(args.config, stage, args.seed)
    ds = load_dataset(args.dataset)
    split = SplitSpec.load(args.split)
    out = Path(args.out)
    prefix = "cls" if stage == "classification" else "meta"
    outputs = _train_outputs(prefix)
    if stage == "meta" and args.curves:
        outputs.append("curves.csv")
    inputs = {"dataset": args.dataset, "split": args.split}
    if stage == "meta" and args.init:
        inputs["init"] = args.init
    write_manifest(out, f"train-{'cls' if stage == 'classification' else 'meta'}", cfg.to_dict(),
                   cfg.seed, inputs, outputs)
    cfg.save(out / "config.json")
    state = out / f"{prefix}_state.fsck"
    if stage == "classification":
        result = train_classification(ds, split, cfg, checkpoint_path=state, resume=args.resume)
    else:
        init = load_model(args.init)[0] if args.init else None
        result = train_meta(init, ds, split, cfg, checkpoint_path=state, resume=args.resume)
        if args.curves:
            key = f"{cfg.episode.n_way}w{cfg.episode.k_shot}s"
            track_generalization(result.records, key).to_csv(out / "curves.csv")
    write_metrics(result.records, out / f"{prefix}_metrics.jsonl", out / f"{prefix}_metrics.csv")
    save_model(out / f"{prefix}.fsck", result)
    write_output_hashes(out, outputs)
    last = result.records[-1]
    print(f"{stage}: {len(result.records)} records, best epoch {result.best_epoch}, "
          f"final loss {last.train_loss}")


def cmd_eval(args) -> None:
    params, extras = load_model(args.checkpoint)
    ds = load_dataset(args.dataset)
    split = SplitSpec.load(args.split)
    pool = split_pool(ds, split, args.which)
    metric = args.metric or extras.get("metric", "cosine")
    results = [evaluate(params, ds, pool, EpisodeSpec(args.n, k, args.q), args.seed, args.tasks, metric)
               for k in args.k]
    print(format_results(results))
    if args.out:
        write_results_jsonl(results, args.out)


def cmd_ablate(args) -> None:
    preset = PRESETS[args.preset]
    out = Path(args.out)
    seeds = tuple(args.seeds)
    if args.kind == "generalization":
        outputs = ["curves.csv", "curves.svg"] + [f"curves_seed{s}.csv" for s in seeds]
    else:
        outputs = ["table.txt", "table.jsonl"]
    write_manifest(out, f"ablate {args.kind}", {"preset": args.preset, **preset.to_dict(),
                                                "shots": list(args.shots)}, None, {}, outputs)
    runner = Runner(preset)
    if args.kind == "generalization":
        mean, curves = run_generalization(runner, seeds, shot=args.shots[0])
        mean.to_csv(out / "curves.csv")
        for s, c in zip(seeds, curves):
            c.to_csv(out / f"curves_seed{s}.csv")
        save_curve_svg(mean, out / "curves.svg", f"{preset.n_way}-way {args.shots[0]}-shot")
        print(f"wrote curves for seeds {list(seeds)} to {out}")
    else:
        run = {"metric": run_metric_ablation, "scratch": run_scratch_ablation,
               "dataset-sweep": run_dataset_property_sweep}[args.kind]
        table = run(runner, seeds, shots=tuple(args.shots))
        (out / "table.txt").write_text(table.format() + "\n")
        table.write_jsonl(out / "table.jsonl")
        print(table.format())
    write_output_hashes(out, outputs)


def cmd_plot(args) -> None:
    curve = GeneralizationCurve.from_csv(args.curves)
    save_curve_svg(curve, args.out, args.title)
    print(f"wrote {args.out}")


# -- experiments from a manifest ---------------------------------------------------------------------


RUN_OUTPUTS = ["dataset.fsds", "split.json", "cls_metrics.jsonl", "cls_metrics.csv", "cls.fsck",
               "meta_metrics.jsonl", "meta_metrics.csv", "meta.fsck", "curves.csv", "results.jsonl"]


def resolve_experiment(d: dict) -> dict:
    """Fill defaults into an experiment description; the result is what the manifest records."""
    if "command" in d and "config" in d:  # a manifest written by a previous run
        d = d["config"]
    known = {"seed", "data", "split", "classification", "meta", "eval"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
    seed = int(d.get("seed", 0))
    try:
        data = SyntheticSpec(**{**d.get("data", {}), "seed": seed})
    except TypeError as e:
        raise ConfigError(f"data: {e}") from e
    split = {"mode": "super", "fractions": None, "holdout_fraction": 0.1, **d.get("split", {})}
    if split["mode"] not in ("super", "shuffled"):
        raise ConfigError(f"unknown split mode {split['mode']!r}")
    ev = {"tasks": DEFAULT_TASKS, "shots": [1, 5], "query": 15, "n_way": 5, "seed": 0, **d.get("eval", {})}
    shared = {"seed": seed, "eval_tasks": ev["tasks"], "eval_seed": ev["seed"],
              "eval_shots": tuple(ev["shots"]), "eval_query": ev["query"]}
    cls = replace(classification_config(), **shared)
    cls = TrainConfig.from_dict({**cls.to_dict(), **d.get("classification", {})})
    meta = None
    if d.get("meta") is not None:
        m = replace(meta_config(), **shared)
        meta = TrainConfig.from_dict({**m.to_dict(), **d["meta"]})
        meta = replace(meta, hidden_dims=cls.hidden_dims, embed_dim=cls.embed_dim)
        meta.validate()
    cls.validate()
    return {"seed": seed, "data": asdict(data), "split": split, "eval": ev,
            "classification": cls.to_dict(), "meta": None if meta is None else meta.to_dict()}


def run_experiment(exp: dict, out: Path) -> dict[str, str]:
    """Generate data, split, train both stages and evaluate; returns output hashes."""
    exp = resolve_experiment(exp)
    outputs = [o for o in RUN_OUTPUTS if exp["meta"] is not None or not o.startswith(("meta", "curves"))]
    write_manifest(out, "run", exp, exp["seed"], {}, outputs)
    ds = generate_synthetic(SyntheticSpec(**exp["data"]), name="dataset")
    save_dataset(ds, out / "dataset.fsds")
    sp = exp["split"]
    if sp["mode"] == "super":
        split = split_by_supercategory(ds, tuple(sp["fractions"] or (8, 2, 2)), exp["seed"], sp["holdout_fraction"])
    else:
        split = split_shuffled(ds, tuple(sp["fractions"] or (40, 10, 10)), exp["seed"], sp["holdout_fraction"])
    split.save(out / "split.json")

    cls_cfg = TrainConfig.from_dict(exp["classification"])
    ev = exp["eval"]
    specs = tuple(EpisodeSpec(ev["n_way"], k, ev["query"]) for k in ev["shots"])
    monitor = Monitor.feasible(ds, split, specs, num_tasks=ev["tasks"], seed=ev["seed"])
    cls = train_classification(ds, split, cls_cfg, monitor=monitor)
    write_metrics(cls.records, out / "cls_metrics.jsonl", out / "cls_metrics.csv")
    save_model(out / "cls.fsck", cls)
    final = {"classifier": cls}
    if exp["meta"] is not None:
        meta_cfg = TrainConfig.from_dict(exp["meta"])
        meta = train_meta(cls.encoder, ds, split, meta_cfg, monitor=monitor)
        write_metrics(meta.records, out / "meta_metrics.jsonl", out / "meta_metrics.csv")
        save_model(out / "meta.fsck", meta)
        if "base_unseen" in monitor.splits:
            key = f"{meta_cfg.episode.n_way}w{meta_cfg.episode.k_shot}s"
            track_generalization(meta.records, key).to_csv(out / "curves.csv")
        final["meta"] = meta
    novel = split_pool(ds, split, "novel")
    with (out / "results.jsonl").open("w") as fh:
        for name, res in final.items():
            for spec in specs:
                r = evaluate(res.selected, ds, novel, spec, ev["seed"], ev["tasks"])
                fh.write(json.dumps({"model": name, **r.to_dict()}, sort_keys=True) + "\n")
    return write_output_hashes(out, outputs)


def cmd_run(args) -> None:
    hashes = run_experiment(_load_json(args.manifest), Path(args.out))
    for name, h in hashes.items():
        print(f"{h}  {name}")


# -- argument parsing --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metabaseline", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    g.add_argument("--spec", help="JSON file with SyntheticSpec fields (defaults otherwise)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("split", help="assign classes to base/val/novel")
    s.add_argument("--dataset", required=True)
    s.add_argument("--mode", choices=("super", "shuffled"), default="super")
    s.add_argument("--fractions", type=int, nargs=3, metavar=("BASE", "VAL", "NOVEL"))
    s.add_argument("--holdout", type=float, default=0.1, help="fraction of base samples held out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    for name, stage in (("train-cls", "classification"), ("train-meta", "meta")):
        t = sub.add_parser(name, help=f"{stage} stage")
        t.add_argument("--config", help="JSON file with TrainConfig overrides")
        t.add_argument("--dataset", required=True)
        t.add_argument("--split", required=True)
        t.add_argument("--seed", type=int)
        t.add_argument("--out", required=True, help="output directory")
        t.add_argument("--resume", action="store_true")
        if stage == "meta":
            t.add_argument("--init", help="checkpoint to start from (fresh init if omitted)")
            t.add_argument("--curves", action="store_true", help="also write base/novel curves.csv")
        t.set_defaults(func=lambda a, st=stage: cmd_train(a, st))

    e = sub.add_parser("eval", help="episodic evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--which", default="novel", choices=("novel", "val", "base_unseen", "base_train"))
    e.add_argument("--n", type=int, default=5)
    e.add_argument("--k", type=int, nargs="+", default=[1, 5])
    e.add_argument("--q", type=int, default=15)
    e.add_argument("--tasks", type=int, default=DEFAULT_TASKS)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--metric", choices=("cosine", "sq_euclidean"))
    e.add_argument("--out", help="write results as JSONL")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run a desk-scale diagnostic experiment")
    a.add_argument("kind", choices=("metric", "scratch", "dataset-sweep", "generalization"))
    a.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--shots", type=int, nargs="+", default=None)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("run", help="run an experiment (or replay a manifest) end to end")
    r.add_argument("manifest")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    pl = sub.add_parser("plot", help="render curves.csv as SVG")
    pl.add_argument("curves")
    pl.add_argument("out")
    pl.add_argument("--title", default="")
    pl.set_defaults(func=cmd_plot)
    return p


def _fail(kind: str, code: int, exc: BaseException) -> int:
    msg = str(exc).replace("\n", " ")
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": msg}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "shots", "unset") is None:
        args.shots = [1] if args.kind in ("scratch", "generalization") else [1, 5]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        return _fail("config", EXIT_CONFIG, e)
    except (FormatError, SamplingError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as e:
        return _fail("data", EXIT_DATA, e)
    except (NumericError, DomainError, FloatingPointError) as e:
        return _fail("numeric", EXIT_NUMERIC, e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
