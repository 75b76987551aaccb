"""Command-line entry point: pretraining, cross-validated training,
ablations, sweeps, synthetic data generation, and report rendering."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .alignment import save_reconstructor
from .config import (RunManifest, parse_overrides, parse_synthetic_attributes,
                     resolve_config)
from .data import AttributeSpec, CohortSchema, load_cohort, read_phenotype_table
from .errors import PopfusionError, TrainingError, ValidationError
from .report import render_report_files, write_run_artifacts
from .train import (ablate_architecture, ablate_graph, ablate_modality,
                    ablate_reconstructor, prepare_reconstructor,
                    run_cross_validation, sweep, synthetic_cohort_from_config)


def artifact_root() -> Path:
    return Path(os.environ.get("POPFUSION_ARTIFACTS", "artifacts"))


def _add_common(parser):
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--preset", help="dataset preset (abide | adhd200)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="config override (repeatable)")
    parser.add_argument("--out", help="artifact directory")


def _add_inputs(parser):
    parser.add_argument("--phenotypes", help="phenotype table (DSV with header)")
    parser.add_argument("--imaging", help="imaging directory or stacked matrix file")
    parser.add_argument("--imaging-index", help="index file for a stacked matrix")
    parser.add_argument("--synthetic", action="store_true",
                        help="use the configured synthetic cohort instead of files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="popfusion",
        description="Multi-modal population-graph learning for subject classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-vae", help="pretrain and freeze the tabular reconstructor")
    _add_common(p)
    p.add_argument("--phenotypes", required=True)
    p.add_argument("--checkpoint", help="output checkpoint path (.npz)")

    p = sub.add_parser("train-cv", help="stratified cross-validated training")
    _add_common(p)
    _add_inputs(p)
    p.add_argument("--external-affinity", help="text matrix replacing the reward affinity")
    p.add_argument("--reconstructor-checkpoint",
                   help="reuse a frozen reconstructor pretrained elsewhere")

    p = sub.add_parser("ablate", help="run a declared ablation")
    p.add_argument("target", choices=["architecture", "reconstructor", "modality", "graph"])
    _add_common(p)
    _add_inputs(p)
    p.add_argument("--external-c", action="append", default=[], metavar="NAME=FILE",
                   help="external affinity matrix for the graph ablation (repeatable)")

    p = sub.add_parser("sweep", help="run a declared parameter sweep")
    p.add_argument("target", choices=["embed-dim", "pool-ratio", "sampling"])
    _add_common(p)
    _add_inputs(p)
    p.add_argument("--grid", help="comma list overriding the default sweep grid")

    p = sub.add_parser("synth-gen", help="write a synthetic cohort in the input file formats")
    _add_common(p)

    p = sub.add_parser("report", help="render tables and plot data from a run report")
    p.add_argument("--run", required=True, help="path to report.json")
    p.add_argument("--out", help="output directory")
    return parser


def _schema_from_table(phenotypes_path, config) -> CohortSchema:
    """Build the cohort schema from the configured attribute descriptors;
    categorical vocabularies are collected from the table itself."""
    descriptors = parse_synthetic_attributes(config.synth_attributes)
    _, _, rows, header = read_phenotype_table(phenotypes_path)
    attrs = []
    for spec in descriptors:
        if spec.name not in header:
            raise ValidationError(f"phenotype table lacks column {spec.name!r}")
        if spec.kind == "categorical":
            vocab = sorted({row[spec.name] for row in rows})
            attrs.append(AttributeSpec(name=spec.name, kind="categorical",
                                       vocabulary=tuple(vocab)))
        else:
            attrs.append(spec)
    return CohortSchema(attributes=tuple(attrs), label_map=config.parsed_label_map())


def _load_any_cohort(args, config):
    if getattr(args, "synthetic", False):
        return synthetic_cohort_from_config(config)
    if not args.phenotypes or not args.imaging:
        raise ValidationError("provide --synthetic or both --phenotypes and --imaging")
    schema = _schema_from_table(args.phenotypes, config)
    return load_cohort(args.imaging, args.phenotypes, schema,
                       drop_missing=config.drop_missing,
                       imaging_index=args.imaging_index)


def _input_files(args):
    files = []
    for name in ("config", "phenotypes", "imaging", "imaging_index"):
        value = getattr(args, name, None)
        if value and Path(value).is_file():
            files.append(value)
    return files


def _out_dir(args, default_name: str) -> Path:
    return Path(args.out) if args.out else artifact_root() / default_name


def _write_multi(runs, out_dir, manifest) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    failed = 0
    lines = ["tag\tstatus\tACC\tSEN\tSPE\tAUC"]
    for tag, report in runs:
        sub = out_dir / tag.replace("/", "_")
        sub.mkdir(parents=True, exist_ok=True)
        report.write(sub / "report.json")
        manifest.register(sub / "report.json")
        if report.status != "ok":
            failed += 1
            lines.append(f"{tag}\t{report.status}\t-\t-\t-\t-")
        else:
            m, s = report.mean, report.std
            cells = "\t".join(f"{100 * m[k]:.2f} ({100 * s[k]:.2f})"
                              for k in ("acc", "sen", "spe", "auc"))
            lines.append(f"{tag}\tok\t{cells}")
    (out_dir / "summary.tsv").write_text("\n".join(lines) + "\n")
    manifest.register(out_dir / "summary.tsv")
    manifest.write(out_dir / "manifest.json")
    return failed


def _cmd_pretrain(args) -> int:
    config = resolve_config(args.config, parse_overrides(args.overrides), args.preset)
    schema = _schema_from_table(args.phenotypes, config)
    ids, labels, rows, _ = read_phenotype_table(args.phenotypes)
    from .data import encode_phenotypes
    encoded = encode_phenotypes(ids, rows, schema)
    model = prepare_reconstructor_from_matrix(encoded, config, cohort_id=str(args.phenotypes))
    out = Path(args.checkpoint) if args.checkpoint else \
        _out_dir(args, "pretrain") / "reconstructor.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_reconstructor(model, out)
    print(f"wrote {out} (final loss {model.loss_trace[-1][-1]:.6g})"
          if model.loss_trace else f"wrote {out}")
    return 0


def prepare_reconstructor_from_matrix(encoded, config, cohort_id=""):
    from .alignment import PretrainConfig, pretrain_reconstructor
    pre = PretrainConfig(learning_rate=config.vae_learning_rate,
                         weight_decay=config.vae_weight_decay,
                         epochs=config.vae_epochs, seed=config.seed)
    return pretrain_reconstructor(encoded, config.embed_dim, pre,
                                  kind=config.reconstructor, cohort_id=cohort_id)


def _cmd_train_cv(args) -> int:
    config = resolve_config(args.config, parse_overrides(args.overrides), args.preset)
    cohort = _load_any_cohort(args, config)
    external = np.loadtxt(args.external_affinity) if args.external_affinity else None
    reconstructor = None
    if args.reconstructor_checkpoint:
        from .alignment import load_reconstructor
        reconstructor = load_reconstructor(args.reconstructor_checkpoint)
    manifest = RunManifest.create(config, _input_files(args))
    report = run_cross_validation(cohort, config, external_affinity=external,
                                  reconstructor=reconstructor)
    out = _out_dir(args, "train-cv")
    write_run_artifacts(report, report.folds, out, manifest)
    if config.export_tables and report.status == "ok" and report.folds and \
            report.folds[0].alpha:
        from .data import make_fold_plan
        from .reward import build_reward_tables, export_tables
        plan = make_fold_plan(cohort.labels(), config.n_folds, config.seed)
        tables = build_reward_tables(cohort, plan.split_codes(0))
        export_tables(tables, np.asarray(report.folds[0].alpha), out / "tables")
    print(report.summary_line() if report.status == "ok"
          else f"run failed: {report.error}")
    return 0 if report.status == "ok" else 2


def _cmd_ablate(args) -> int:
    config = resolve_config(args.config, parse_overrides(args.overrides), args.preset)
    cohort = _load_any_cohort(args, config)
    manifest = RunManifest.create(config, _input_files(args))
    if args.target == "architecture":
        runs = ablate_architecture(cohort, config)
    elif args.target == "reconstructor":
        runs = ablate_reconstructor(cohort, config)
    elif args.target == "modality":
        runs = ablate_modality(cohort, config)
    else:
        external = {}
        for item in args.external_c:
            name, sep, path = item.partition("=")
            if not sep:
                raise ValidationError(f"--external-c {item!r} must be NAME=FILE")
            external[name] = np.loadtxt(path)
        runs = ablate_graph(cohort, config, external)
    failed = _write_multi(runs, _out_dir(args, f"ablate-{args.target}"), manifest)
    return 2 if failed else 0


def _cmd_sweep(args) -> int:
    config = resolve_config(args.config, parse_overrides(args.overrides), args.preset)
    cohort = _load_any_cohort(args, config)
    manifest = RunManifest.create(config, _input_files(args))
    grid = [float(x) for x in args.grid.split(",")] if args.grid else None
    runs = sweep(cohort, config, args.target, grid=grid)
    failed = _write_multi(runs, _out_dir(args, f"sweep-{args.target}"), manifest)
    return 2 if failed else 0


def _cmd_synth_gen(args) -> int:
    config = resolve_config(args.config, parse_overrides(args.overrides), args.preset)
    cohort = synthetic_cohort_from_config(config)
    out = _out_dir(args, "synthetic")
    out.mkdir(parents=True, exist_ok=True)

    pheno_path = out / "phenotypes.tsv"
    attrs = cohort.schema.attributes
    with pheno_path.open("w") as fh:
        names = "\t".join(a.name for a in attrs)
        fh.write(f"subject_id\tlabel\t{names}\n")
        for rec in cohort.records:
            cells = []
            for j, attr in enumerate(attrs):
                if attr.kind == "categorical":
                    cells.append(attr.vocabulary[int(rec.phenotypes[j])])
                else:
                    cells.append(f"{rec.phenotypes[j]:.6f}")
            fh.write(f"{rec.subject_id}\t{rec.label}\t" + "\t".join(cells) + "\n")

    stacked_path = out / "imaging.tsv"
    np.savetxt(stacked_path, cohort.imaging_matrix(), delimiter="\t", fmt="%.8g")
    index_path = Path(str(stacked_path) + ".index")
    index_path.write_text("\n".join(cohort.subject_ids()) + "\n")

    manifest = RunManifest.create(config)
    for p in (pheno_path, stacked_path, index_path):
        manifest.register(p)
    manifest.write(out / "manifest.json")
    print(f"wrote synthetic cohort ({cohort.n_subjects} subjects) under {out}")
    return 0


def _cmd_report(args) -> int:
    out = Path(args.out) if args.out else artifact_root() / "report"
    written = render_report_files(args.run, out)
    print("\n".join(str(p) for p in written))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "pretrain-vae": _cmd_pretrain,
        "train-cv": _cmd_train_cv,
        "ablate": _cmd_ablate,
        "sweep": _cmd_sweep,
        "synth-gen": _cmd_synth_gen,
        "report": _cmd_report,
    }
    try:
        return handlers[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return 2
    except PopfusionError as exc:  # pragma: no cover - safety net
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
