"""
Command-line entry points.

    erdet generate --out DIR [--seed N] [--config FILE]
    erdet run      [--config FILE] [--protocol P] [--strategy S] [...]
    erdet ablate   {components,alpha,topk,ld,feature} [--config FILE] [...]
    erdet report   RUN_DIR [RUN_DIR ...] --out DIR

Exit codes: 0 success, 2 usage error, 3 runtime failure.

CSV files written by ablate and report keep these headers:

    ablate_<sweep>.csv   ABLATION_COLUMNS
    per_class_ap.csv     run,step,category,ap
    base_new.csv         run,step,strategy,mAP,base_ap,new_ap
    losses.csv           run,step,<trainer.LOSS_COLUMNS>
    distances.csv        run_a,run_b,component,distance
"""

import argparse
import csv
import dataclasses
import io
import itertools
import json
import logging
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Sequence

import boto3

from erdet import evalkit
from erdet.artifacts import ArtifactWriter
from erdet.config import ExperimentConfig, load_config
from erdet.errors import ArtifactError, ConfigurationError, ErdetError
from erdet.schemas import generate_metrics_schema, load_json
from erdet.synthshapes import (
    PROTOCOLS,
    SceneSpec,
    ShapesDataset,
    generate_dataset,
    load_dataset,
)
from erdet.tinydet.snapshot import load_snapshot
from erdet.trainer import (
    LOSS_COLUMNS,
    STRATEGIES,
    LossCurve,
    StepResult,
    run_protocol,
    step_dir,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FAILURE = 3

SWEEPS = ("components", "alpha", "topk", "ld", "feature")
TOPK_SWEEP = (5, 10, 50, 100, 1000, "all")
ABLATION_COLUMNS = (
    "label",
    "strategy",
    "alpha1",
    "alpha2",
    "k",
    "use_kl_localization",
    "lambda_feat",
    "feature_selection",
    "step",
    "mAP",
    "ap50",
    "ap75",
    "base_ap",
    "new_ap",
    "num_detections",
    "num_ground_truths",
    "num_images",
)


def _k_value(text: str) -> int | str:
    if text == "all":
        return "all"
    try:
        k = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"k must be a positive integer or 'all', got {text!r}")
    if k < 1:
        raise argparse.ArgumentTypeError(f"k must be positive, got {k}")
    return k


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON experiment config file")
    parser.add_argument("--seed", type=int, help="experiment and dataset seed")
    parser.add_argument("--log-level", default="INFO", help="logging level (default INFO)")


def _add_experiment(parser: argparse.ArgumentParser):
    parser.add_argument("--out", help="output directory holding run directories")
    parser.add_argument("--name", help="run name, the run directory under --out")
    parser.add_argument("--data", help="dataset directory (default <run dir>/data)")
    parser.add_argument("--protocol", choices=PROTOCOLS)
    parser.add_argument("--alpha1", type=float, help="classification selection multiplier")
    parser.add_argument("--alpha2", type=float, help="regression selection multiplier")
    parser.add_argument("--lambda1", type=float, help="classification distillation weight")
    parser.add_argument("--lambda2", type=float, help="localization distillation weight")
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--k", type=_k_value, help="location count for the topk strategy")
    parser.add_argument("--epochs", type=int, help="epochs per protocol step")
    parser.add_argument(
        "--deterministic", action=argparse.BooleanOptionalAction, default=None
    )
    parser.add_argument("--s3-bucket", help="mirror run artifacts to this S3 bucket")
    parser.add_argument("--s3-prefix", default="", help="key prefix for mirrored artifacts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="erdet", description="Elastic response distillation experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", help="render a synthetic shapes dataset")
    _add_common(generate)
    generate.add_argument("--out", required=True, help="dataset directory")
    generate.add_argument("--num-train", type=int)
    generate.add_argument("--num-test", type=int)
    generate.set_defaults(func=cmd_generate)

    run = sub.add_parser("run", help="run one strategy over one protocol")
    _add_common(run)
    _add_experiment(run)
    run.add_argument("--strategy", choices=STRATEGIES)
    run.set_defaults(func=cmd_run)

    ablate = sub.add_parser("ablate", help="run a named sweep and tabulate it")
    ablate.add_argument("sweep", choices=SWEEPS)
    _add_common(ablate)
    _add_experiment(ablate)
    ablate.set_defaults(func=cmd_ablate)

    report = sub.add_parser("report", help="emit plot-ready CSVs from run directories")
    report.add_argument("runs", nargs="+", help="run directories")
    report.add_argument("--out", required=True, help="report directory")
    report.add_argument("--probes", type=int, default=evalkit.DEFAULT_PROBES)
    report.add_argument("--seed", type=int, default=0, help="probe image seed")
    report.add_argument("--log-level", default="INFO")
    report.set_defaults(func=cmd_report)
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict:
    """Flag values as a nested config overlay; flags not given are None and leave the file alone."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    k = get("k")
    return {
        "seed": get("seed"),
        "output_dir": get("out"),
        "name": get("name"),
        "data_dir": get("data"),
        "scene": {"seed": get("seed")},
        "protocol": {"name": get("protocol")},
        "train": {
            "strategy": get("strategy"),
            "topk": k if isinstance(k, int) else None,
            "epochs_per_step": get("epochs"),
            "deterministic": get("deterministic"),
        },
        "distill": {
            "alpha_cls": get("alpha1"),
            "alpha_reg": get("alpha2"),
            "lambda_cls": get("lambda1"),
            "lambda_reg": get("lambda2"),
            "temperature": get("temperature"),
        },
    }


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(getattr(args, "config", None), overrides_from_args(args))
    if getattr(args, "k", None) == "all":
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, topk=None))
    cfg.validate()
    return cfg


def ensure_dataset(cfg: ExperimentConfig) -> ShapesDataset:
    """Loads the configured dataset, generating it when missing or generated differently."""
    root = cfg.dataset_dir
    if (root / "scene.json").exists():
        dataset = load_dataset(root)
        if (
            dataset.spec == cfg.scene
            and len(dataset.train) == cfg.train.num_train_images
            and len(dataset.test) == cfg.train.num_test_images
        ):
            logging.info(f"Using dataset at {root}")
            return dataset
        logging.info(f"Dataset at {root} does not match the config, regenerating it")
    return generate_dataset(
        cfg.scene, cfg.train.num_train_images, cfg.train.num_test_images, root
    )


def make_writer(cfg: ExperimentConfig, args: argparse.Namespace) -> ArtifactWriter:
    bucket = getattr(args, "s3_bucket", None)
    s3_client = boto3.client("s3") if bucket else None
    prefix = getattr(args, "s3_prefix", "") or ""
    if bucket:
        prefix = f"{prefix.rstrip('/')}/{cfg.name}/" if prefix else f"{cfg.name}/"
    return ArtifactWriter(cfg.run_dir, s3_client=s3_client, bucket=bucket, prefix=prefix)


def _write(writer: ArtifactWriter, actions: Sequence[ArtifactWriter.Action]):
    failures = writer.write(actions)
    if failures.any_permanent():
        raise ArtifactError(f"Could not write artifacts: {failures}")


def execute(
    cfg: ExperimentConfig,
    writer: ArtifactWriter,
    dataset: ShapesDataset,
    base_result: StepResult | None = None,
) -> list[StepResult]:
    """Runs one configured experiment, echoing the resolved config and split into the run."""
    split = cfg.split()
    _write(
        writer,
        [
            ArtifactWriter.WriteFileAction(
                path="config.json", body=cfg.to_json(), mime_type="application/json"
            ),
            ArtifactWriter.WriteFileAction(path="split.txt", body=split.to_text()),
        ],
    )
    return run_protocol(
        split, dataset, cfg.head_config(), cfg.train, cfg.distill, writer, base_result
    )


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    num_train = args.num_train or cfg.train.num_train_images
    num_test = args.num_test or cfg.train.num_test_images
    generate_dataset(cfg.scene, num_train, num_test, args.out)
    print(json.dumps(cfg.scene.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    dataset = ensure_dataset(cfg)
    results = execute(cfg, make_writer(cfg, args), dataset)
    final = results[-1].metrics
    logging.info(
        f"Run {cfg.name} finished {len(results)} steps: final mAP {final.mAP:.4f}, "
        f"base AP {final.base_ap}"
    )
    return EXIT_OK


def sweep_variants(sweep: str, cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """The labelled configs of a named sweep, each a variant of cfg."""

    def variant(strategy: str, train: dict = None, distill: dict = None):
        return dataclasses.replace(
            cfg,
            train=dataclasses.replace(cfg.train, strategy=strategy, **(train or {})),
            distill=dataclasses.replace(cfg.distill, **(distill or {})),
        )

    if sweep == "components":
        strategies = (
            "upper_bound",
            "finetune",
            "kd_all",
            "kd_all_cls",
            "kd_all_reg",
            "erd_cls_only",
            "erd_full",
        )
        return [(s, variant(s)) for s in strategies]
    if sweep == "alpha":
        return [
            (
                f"alpha_{a1:g}_{a2:g}",
                variant("erd_full", distill={"alpha_cls": a1, "alpha_reg": a2}),
            )
            for a1, a2 in itertools.product((1.0, 2.0), repeat=2)
        ]
    if sweep == "topk":
        h = cfg.head_config()
        total = sum((h.image_size // s) ** 2 for s in h.pyramid_strides)
        points = []
        for k in TOPK_SWEEP:
            point = "all" if k == "all" or k >= total else k
            if point not in points:
                points.append(point)
        return [
            (f"topk_{k}", variant("topk", train={"topk": None if k == "all" else k}))
            for k in points
        ]
    if sweep == "ld":
        return [
            ("ld_kl", variant("erd_full", distill={"use_kl_localization": True})),
            ("ld_l2", variant("erd_full", distill={"use_kl_localization": False})),
        ]
    if sweep == "feature":
        weight = cfg.distill.lambda_feat or 1.0
        return [
            ("kd_all", variant("kd_all", distill={"lambda_feat": 0.0})),
            (
                "kd_all_feat",
                variant("kd_all", distill={"lambda_feat": weight, "feature_selection": "all"}),
            ),
            (
                "erd_full_feat",
                variant("erd_full", distill={"lambda_feat": weight, "feature_selection": "ers"}),
            ),
            ("erd_full", variant("erd_full", distill={"lambda_feat": 0.0})),
        ]
    raise ConfigurationError(f"Unknown sweep {sweep!r}, expected one of {SWEEPS}")


def ablation_row(label: str, cfg: ExperimentConfig, result: StepResult) -> dict:
    m = result.metrics
    return {
        "label": label,
        "strategy": cfg.train.strategy,
        "alpha1": cfg.distill.alpha_cls,
        "alpha2": cfg.distill.alpha_reg,
        "k": "all" if cfg.train.topk is None else cfg.train.topk,
        "use_kl_localization": cfg.distill.use_kl_localization,
        "lambda_feat": cfg.distill.lambda_feat,
        "feature_selection": cfg.distill.feature_selection,
        "step": result.step_index,
        "mAP": m.mAP,
        "ap50": m.ap50,
        "ap75": m.ap75,
        "base_ap": m.base_ap,
        "new_ap": m.new_ap,
        "num_detections": m.num_detections,
        "num_ground_truths": m.num_ground_truths,
        "num_images": m.num_images,
    }


def to_csv(columns: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: "" if row.get(k) is None else row[k] for k in columns})
    return buf.getvalue()


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    dataset = ensure_dataset(cfg)
    writer = make_writer(cfg, args)

    rows, base_result = [], None
    for label, variant in sweep_variants(args.sweep, cfg):
        variant = dataclasses.replace(
            variant, name=f"{cfg.name}/{label}", data_dir=str(cfg.dataset_dir)
        )
        logging.info(f"Ablation {args.sweep}: running {label}")
        variant_writer = ArtifactWriter(
            variant.run_dir,
            s3_client=writer.s3_client,
            bucket=writer.bucket,
            prefix=f"{writer.prefix}{label}/",
        )
        # Step 0 depends on the seed and base settings only, so every variant shares it.
        results = execute(variant, variant_writer, dataset, base_result)
        base_result = results[0]
        rows.append(ablation_row(label, variant, results[-1]))

    _write(
        writer,
        [
            ArtifactWriter.WriteFileAction(
                path=f"ablate_{args.sweep}.csv",
                body=to_csv(ABLATION_COLUMNS, rows),
                mime_type="text/csv",
            )
        ],
    )
    logging.info(f"Ablation {args.sweep} wrote {len(rows)} rows to {cfg.run_dir}")
    return EXIT_OK


def _step_dirs(run_dir: Path) -> list[tuple[int, Path]]:
    steps = []
    for path in run_dir.glob("step_*"):
        suffix = path.name.removeprefix("step_")
        if path.is_dir() and suffix.isdigit():
            steps.append((int(suffix), path))
    if not steps:
        raise ConfigurationError(f"{run_dir} holds no step directories")
    return sorted(steps)


def report_tables(run_dirs: Sequence[Path]) -> dict[str, str]:
    """per_class_ap, base_new and losses CSV bodies for the given run directories."""
    per_class, base_new, losses = [], [], []
    schema = generate_metrics_schema()
    for run_dir in run_dirs:
        for t, path in _step_dirs(run_dir):
            if (path / "metrics.json").exists():
                document = load_json(path / "metrics.json", schema)
                metrics = evalkit.MetricsReport.from_json_dict(document)
                for c, ap in sorted(metrics.per_class_ap.items()):
                    per_class.append({"run": run_dir.name, "step": t, "category": c, "ap": ap})
                base_new.append(
                    {
                        "run": run_dir.name,
                        "step": t,
                        "strategy": document.get("strategy"),
                        "mAP": metrics.mAP,
                        "base_ap": metrics.base_ap,
                        "new_ap": metrics.new_ap,
                    }
                )
            if (path / "losses.csv").exists():
                curve = LossCurve.from_csv((path / "losses.csv").read_text(encoding="utf-8"))
                losses.extend({"run": run_dir.name, "step": t, **row} for row in curve.rows)
    return {
        "per_class_ap.csv": to_csv(("run", "step", "category", "ap"), per_class),
        "base_new.csv": to_csv(("run", "step", "strategy", "mAP", "base_ap", "new_ap"), base_new),
        "losses.csv": to_csv(("run", "step") + LOSS_COLUMNS, losses),
    }


def cmd_report(args: argparse.Namespace) -> int:
    run_dirs = [Path(r) for r in args.runs]
    out = Path(args.out)
    writer = ArtifactWriter(out)
    tables = report_tables(run_dirs)

    # Final snapshots of every run pair, compared on probe images of the first run's dataset.
    finals = {}
    for run_dir in run_dirs:
        t, path = _step_dirs(run_dir)[-1]
        finals[run_dir] = load_snapshot(path / "snapshot.pt")
    cfg = ExperimentConfig.from_dict(load_json(run_dirs[0] / "config.json"))
    dataset = load_dataset(cfg.dataset_dir)
    probes = evalkit.select_probe_images(dataset.test, args.probes, args.seed)
    images = [dataset.test.load_image(r) for r in probes]

    distances, dumps = [], []
    for a, b in itertools.combinations(run_dirs, 2):
        report = evalkit.feature_distance(finals[a], finals[b], images)
        for component in evalkit.COMPONENTS:
            distances.append(
                {
                    "run_a": a.name,
                    "run_b": b.name,
                    "component": component,
                    "distance": report.distances[component],
                }
            )
    for run_dir, snapshot in finals.items():
        for record, image in zip(probes, images):
            text = evalkit.dump_response_maps(snapshot, image, 0, record.name)
            dumps.append(
                ArtifactWriter.WriteFileAction(
                    path=f"response_maps/{run_dir.name}/{Path(record.name).stem}.txt",
                    body=text + "\n",
                )
            )

    tables["distances.csv"] = to_csv(("run_a", "run_b", "component", "distance"), distances)
    actions = [
        ArtifactWriter.WriteFileAction(path=name, body=body, mime_type="text/csv")
        for name, body in tables.items()
    ]
    _write(writer, actions + dumps)
    logging.info(f"Report for {len(run_dirs)} runs written to {out}")
    return EXIT_OK


def _log_version():
    try:
        __version__ = version("erdet")
        logging.info(f"erdet {__version__} starting")
    except PackageNotFoundError:
        # Not installed as a package, eg running directly from Git clone.
        logging.info("erdet starting from dev environment")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(message)s",
    )
    _log_version()
    try:
        return args.func(args)
    except ErdetError:
        logging.exception(f"erdet {args.command} failed")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
