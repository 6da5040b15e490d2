"""Command-line entry point: ``mmsn <command> [flags]``.

Every command is a deterministic function of its config file, flags and input
files. Artifacts of ``pretrain``, ``eval`` and ``embed`` go to a run directory
``<out>/<command>-<config hash>-s<seed>``. Failures print ``error: <Code>: ...``
on stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, json_schema, load_config
from .data import generate_synthetic_dataset, load_manifest, save_manifest, split_by_patient
from .ehr import parse_feature_group
from .embedding import export_2d_embedding, plot_panels, single_label_rows
from .engine import Checkpoint, Pretrainer
from .errors import ConfigError, MMSNError
from .evaluation import COSINE, PLATEAU, RunSpec, extract_embeddings, low_data_protocol, run_protocol
from .metrics import MetricReport, compare_reports
from .report import render_table

logger = logging.getLogger("mmsn")

EXIT_ERROR = 2


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_dir(root: str | Path, command: str, cfg: RunConfig, extra: dict | None = None) -> Path:
    """``<root>/<command>-<hash>-s<seed>``; ``extra`` (input digests, flags) joins the hash."""
    tag = cfg.digest()
    if extra:
        blob = json.dumps({"cfg": tag, **extra}, sort_keys=True)
        tag = hashlib.sha256(blob.encode()).hexdigest()[:10]
    path = Path(root) / f"{command}-{tag}-s{cfg.effective_seed}"
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.yaml").write_text(cfg.to_yaml())
    return path


# ---------------------------------------------------------------- commands


def cmd_synth_data(args) -> Path:
    overrides: dict = {"data": {}}
    for flag, key in [("patients", "n_patients"), ("per_patient", "images_per_patient"),
                      ("image_size", "image_size"), ("label_model", "label_model")]:
        if getattr(args, flag) is not None:
            overrides["data"][key] = getattr(args, flag)
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    d = cfg.data
    samples = generate_synthetic_dataset(d.n_patients, d.images_per_patient, d.image_size,
                                         d.label_model, seed=cfg.effective_seed)
    splits = split_by_patient(samples, d.fractions, seed=cfg.effective_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for m in splits:
        save_manifest(m, out / f"{m.split}.csv")
    print(f"wrote {len(samples)} samples: " + ", ".join(f"{m.split}={len(m)}" for m in splits))
    return out


def cmd_pretrain(args) -> Path:
    overrides: dict = {"pretrain": {}}
    if args.features is not None:
        parse_feature_group(args.features)
        overrides["pretrain"]["feature_group"] = args.features
    if args.max_steps is not None:
        overrides["pretrain"]["max_steps"] = args.max_steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    manifest = load_manifest(args.train)
    out = run_dir(args.out, "pretrain", cfg, {"train": file_digest(args.train)})
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    trainer = Pretrainer(cfg.view, cfg.model, cfg.loss, cfg.pretrain)
    trainer.fit(manifest, log_path=log_path)
    ckpt = trainer.save(out / "checkpoint.mmsn")
    print(f"{trainer.step} steps, {trainer.epoch} epochs; checkpoint {ckpt}")
    return out


def _parse_fractions(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad fraction list {text!r}") from exc


def cmd_eval(args) -> Path:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    ckpt = Checkpoint.load(args.checkpoint)
    train, val, test = (load_manifest(p) for p in (args.train, args.val, args.test))
    modes = ["linear", "finetune"] if args.mode == "both" else [args.mode]
    inputs = {k: file_digest(getattr(args, k)) for k in ("checkpoint", "train", "val", "test")}
    inputs.update(mode=args.mode, low_data=args.low_data, low_data_lr=args.low_data_lr,
                  low_data_scheduler=args.low_data_scheduler,
                  compare=file_digest(args.compare) if args.compare else None)
    out = run_dir(args.out, "eval", cfg, inputs)
    reference = MetricReport.from_json(args.compare) if args.compare else None

    best_finetune = None
    for mode in modes:
        res = run_protocol(train, val, test, ckpt, cfg.eval, mode=mode, jobs=args.jobs)
        report = res.report
        if reference is not None:
            report.p_value_vs_reference = compare_reports(report, reference, seed=cfg.eval.seed)
        _write_json(out / f"protocol_{mode}.json", {"mode": mode, "runs": res.runs, "best_index": res.best_index,
                                                    "n_test_evaluations": res.n_test_evaluations})
        report.to_json(out / f"report_{mode}.json")
        rows = [(f"{mode} (this run)", report)]
        if reference is not None:
            rows.insert(0, ("reference", reference))
        (out / f"report_{mode}.md").write_text(render_table(rows, "reference" if reference else None))
        print(f"{mode}: {len(res.runs)} runs, test AUROC {report.auroc:.3f} "
              f"({report.auroc_ci[0]:.3f}, {report.auroc_ci[1]:.3f})")
        if mode == "finetune":
            best = res.runs[res.best_index]
            best_finetune = RunSpec(best["learning_rate"], best["scheduler"])

    if args.low_data:
        spec = best_finetune
        if args.low_data_lr is not None or spec is None:
            spec = RunSpec(args.low_data_lr or cfg.eval.learning_rates[0], args.low_data_scheduler)
        low = low_data_protocol(train, val, test, ckpt, spec, cfg.eval, fractions=args.low_data)
        _write_json(out / "low_data.json", {"learning_rate": spec.learning_rate, "scheduler": spec.scheduler,
                                            **low.to_dict()})
        print(f"low-data: {len(low.runs)} runs over fractions {list(args.low_data)}")
    return out


def cmd_embed(args) -> Path:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    ckpt = Checkpoint.load(args.checkpoint)
    manifest = load_manifest(args.manifest)
    inputs = {"checkpoint": file_digest(args.checkpoint), "manifest": file_digest(args.manifest), "tsne": args.tsne}
    X, Y = extract_embeddings(manifest, ckpt)
    rows = single_label_rows(Y)
    if args.tsne:
        emb = export_2d_embedding(X, Y, seed=cfg.effective_seed)  # raises TooFewSamples first
    out = run_dir(args.out, "embed", cfg, inputs)
    np.save(out / "embeddings.npy", X[rows])
    ids = [manifest[int(i)].sample_id for i in rows]
    (out / "sample_ids.txt").write_text("\n".join(ids) + ("\n" if ids else ""))
    if args.tsne:
        np.savetxt(out / "tsne.csv", emb.coords, delimiter=",", fmt="%.10g")
        plot_panels(emb, out / "tsne.png")
        _write_json(out / "panels.json", {"prevalence_order": emb.prevalence_order, "panels": emb.panels})
    print(f"{len(rows)} single-label embeddings written to {out}")
    return out


def cmd_report(args) -> Path | None:
    rows = []
    for item in args.reports:
        name, _, path = item.partition("=")
        if not path:
            name, path = Path(item).stem, item
        rows.append((name, MetricReport.from_json(path)))
    if args.reference is not None:
        ref = dict(rows).get(args.reference)
        if ref is None:
            raise ConfigError(f"reference {args.reference!r} not among the reports")
        for name, rep in rows:
            if name != args.reference and rep.p_value_vs_reference is None and rep.scores is not None:
                rep.p_value_vs_reference = compare_reports(rep, ref, n_perm=args.n_perm, seed=0)
    table = render_table(rows, args.reference)
    if args.out:
        Path(args.out).write_text(table)
    sys.stdout.write(table)
    return Path(args.out) if args.out else None


def cmd_schema(args) -> None:
    text = json.dumps(json_schema(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmsn", description="EHR-aware masked siamese pretraining for chest X-rays")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="runs"):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--seed", type=int, help="global seed (falls back to $MMSN_SEED)")
        sp.add_argument("--out", default=out_default)

    sp = sub.add_parser("synth-data", help="generate a synthetic CXR+EHR dataset with patient splits")
    common(sp, "data")
    sp.add_argument("--patients", type=int)
    sp.add_argument("--per-patient", type=int)
    sp.add_argument("--image-size", type=int)
    sp.add_argument("--label-model", choices=["independent", "ehr_coupled"])
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("pretrain", help="pretrain the encoder on a train manifest")
    common(sp)
    sp.add_argument("--train", required=True, help="train manifest CSV")
    sp.add_argument("--features", help="EHR feature group, e.g. sex, D+SM, none")
    sp.add_argument("--max-steps", type=int)
    sp.set_defaults(func=cmd_pretrain)

    for name, mode in [("eval", None), ("linear-eval", "linear"), ("finetune", "finetune")]:
        sp = sub.add_parser(name, help="downstream protocol on train/val/test manifests")
        common(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--train", required=True)
        sp.add_argument("--val", required=True)
        sp.add_argument("--test", required=True)
        if mode is None:
            # linear + fine-tune grids: 10 runs per model
            sp.add_argument("--mode", choices=["linear", "finetune", "both"], default="both")
        else:
            sp.set_defaults(mode=mode)
        sp.add_argument("--low-data", type=_parse_fractions, help="comma-separated training fractions")
        sp.add_argument("--low-data-lr", type=float)
        sp.add_argument("--low-data-scheduler", choices=[COSINE, PLATEAU], default=COSINE)
        sp.add_argument("--compare", help="reference MetricReport JSON for the significance test")
        sp.add_argument("--jobs", type=int, default=1)
        sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("embed", help="export single-label embeddings (and a t-SNE plot)")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--tsne", action="store_true")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("report", help="render MetricReport JSON files as a markdown table")
    sp.add_argument("reports", nargs="+", help="name=path.json (or just path)")
    sp.add_argument("--reference", help="name of the reference row")
    sp.add_argument("--n-perm", type=int, default=1000)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("schema", help="print the JSON schema of the run config")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_schema)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except MMSNError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: IOError: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
