"""Command-line interface: dataset generation, training, evaluation, sweeps.

One JSON config document with sections ``{data, model, train, eval, sweep}``
drives every command; precedence is built-in defaults < config file < dotted
``--set section.key=value`` overrides.  Unknown keys anywhere are rejected.
Every run writes ``resolved_config.json`` (the exact settings used) and
``manifest.json`` (seed + sha256 of every artifact), so a completed run is
reproducible from snapshot + seed alone.

Exit codes: 0 success, 2 config error, 3 runtime error; errors are emitted
as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .annotations import (
    LabelTaxonomy,
    collapse_labels,
    compute_statistics,
    export_dataset,
    import_dataset,
    infer_taxonomy,
)
from .evaluation import APTable, evaluate
from .geometry import Box, Detection
from .model import (
    ModelConfig,
    TrainConfig,
    build_model,
    load_checkpoint,
    make_optimizer,
    parameter_checksum,
    parameter_count,
    predict,
    save_checkpoint,
    train_step,
)
from .synthgen import SceneConfig, dataset_images, generate_dataset

OUTPUT_ROOT_ENV = "CARTONDET_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (exit code 2)."""


_DATA_DEFAULTS = {
    "n_images": 20,
    "base_seed": None,  # falls back to the top-level seed
    "taxonomy": "four_label",
    "dataset_dir": None,  # load a gen-data directory instead of generating
    "scene": {},  # SceneConfig field overrides
}
_TRAIN_DEFAULTS = {
    "steps": 200,
    "batch_size": 4,
    "base_lr": 0.02,
    "reference_batch_size": 8,
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "warmup_steps": 100,
    "decay_steps": (),
    "decay_factor": 0.1,
    "max_grad_norm": 10.0,
}
_EVAL_DEFAULTS = {
    "checkpoint": None,  # model route: predict + score
    "detections": None,  # file route: COCO-style results JSON
    "alpha": None,  # None -> the model's fusion setting
    "score_thresh": None,
    "nms_iou": None,
}
_SWEEP_DEFAULTS = {
    "alphas": [round(0.1 * i, 1) for i in range(11)],
    "thicknesses": [16.0, 40.0, 96.0],
    "variants": ["focal", "bce", "dice"],
    "steps": None,  # None -> train.steps
}


def _merge_section(name: str, defaults: dict, supplied: dict) -> dict:
    unknown = set(supplied) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}' section: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(supplied)
    return merged


def resolve_config(file_config: dict, overrides: list[str]) -> dict:
    """defaults < file < dotted overrides, with unknown-key rejection."""
    config = dict(file_config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings are allowed unquoted
        node = config
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a non-section value")
        node[parts[-1]] = value

    top_known = {"seed", "output_dir", "data", "model", "train", "eval", "sweep"}
    unknown = set(config) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")

    resolved = {
        "seed": int(config.get("seed", 0)),
        "output_dir": config.get("output_dir"),
        "data": _merge_section("data", _DATA_DEFAULTS, config.get("data", {})),
        "train": _merge_section("train", _TRAIN_DEFAULTS, config.get("train", {})),
        "eval": _merge_section("eval", _EVAL_DEFAULTS, config.get("eval", {})),
        "sweep": _merge_section("sweep", _SWEEP_DEFAULTS, config.get("sweep", {})),
    }
    if resolved["data"]["taxonomy"] not in ("four_label", "one_label"):
        raise ConfigError("data.taxonomy must be 'four_label' or 'one_label'")

    model_section = dict(config.get("model", {}))
    if "num_classes" not in model_section:
        model_section["num_classes"] = (
            4 if resolved["data"]["taxonomy"] == "four_label" else 1
        )
    scene_section = dict(resolved["data"]["scene"])
    if "seed" not in scene_section:
        base = resolved["data"]["base_seed"]
        scene_section["seed"] = int(base) if base is not None else resolved["seed"]
    try:
        model_cfg = ModelConfig.from_dict(model_section)
        scene_cfg = SceneConfig.from_dict(scene_section)
        train_section = dict(resolved["train"])
        steps = train_section.pop("steps")
        batch_size = train_section.pop("batch_size")
        train_cfg = TrainConfig.from_dict(train_section)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if steps < 1 or batch_size < 1:
        raise ConfigError("train.steps and train.batch_size must be >= 1")

    resolved["model"] = model_cfg.to_dict()
    resolved["data"]["scene"] = {
        field: getattr(scene_cfg, field) for field in scene_cfg.__dataclass_fields__
    }
    return resolved


def _taxonomy_of(resolved: dict) -> LabelTaxonomy:
    return (
        LabelTaxonomy.four_label()
        if resolved["data"]["taxonomy"] == "four_label"
        else LabelTaxonomy.one_label()
    )


def _model_config(resolved: dict) -> ModelConfig:
    return ModelConfig.from_dict(resolved["model"])


def _scene_config(resolved: dict) -> SceneConfig:
    return SceneConfig.from_dict(resolved["data"]["scene"])


def _train_config(resolved: dict) -> TrainConfig:
    section = dict(resolved["train"])
    section.pop("steps")
    section.pop("batch_size")
    return TrainConfig.from_dict(section)


def resolve_dataset(resolved: dict):
    """(records, images, taxonomy) from a dataset directory or the generator."""
    taxonomy = _taxonomy_of(resolved)
    dataset_dir = resolved["data"]["dataset_dir"]
    if dataset_dir is not None:
        from PIL import Image

        root = Path(dataset_dir)
        ann = root / "annotations.json"
        if not ann.exists():
            raise ConfigError(f"dataset_dir has no annotations.json: {root}")
        records = import_dataset(ann, "coco_json")
        images = []
        for rec in records:
            path = root / "images" / rec.file_name
            if not path.exists():
                raise ConfigError(f"dataset image missing: {path}")
            images.append(np.asarray(Image.open(path).convert("RGB")))
    else:
        scene = _scene_config(resolved)
        n_images = int(resolved["data"]["n_images"])
        records = generate_dataset(scene, n_images)
        images = dataset_images(scene, n_images)
    if resolved["data"]["taxonomy"] == "one_label":
        records = collapse_labels(records)
    seen = {inst.label for rec in records for inst in rec.instances}
    foreign = seen - set(taxonomy.labels)
    if foreign:
        raise ConfigError(
            f"dataset labels {sorted(foreign)} do not belong to the "
            f"{resolved['data']['taxonomy']} taxonomy"
        )
    return records, images, taxonomy


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class RunDirectory:
    """Collects artifacts under one directory and writes the manifest."""

    def __init__(self, command: str, resolved: dict, out_override=None):
        explicit = out_override or resolved.get("output_dir")
        if explicit is not None:
            self.path = Path(explicit)
        else:
            root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
            self.path = Path(root) / command
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.resolved = resolved

    def write_text(self, name: str, text: str) -> Path:
        target = self.path / name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text)
        return target

    def finalize(self) -> Path:
        snapshot = json.dumps(self.resolved, indent=2, sort_keys=True, default=str)
        self.write_text("resolved_config.json", snapshot + "\n")
        artifacts = {}
        for path in sorted(self.path.rglob("*")):
            if path.is_file() and path.name != "manifest.json":
                artifacts[path.relative_to(self.path).as_posix()] = _sha256_file(path)
        manifest = {
            "command": self.command,
            "seed": self.resolved["seed"],
            "config_sha256": hashlib.sha256(snapshot.encode()).hexdigest(),
            "artifacts": artifacts,
        }
        target = self.path / "manifest.json"
        target.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return target


def _train_model(resolved: dict, records, images, taxonomy, run: RunDirectory,
                 model_cfg: ModelConfig = None, metrics_name="metrics.jsonl"):
    """Train per config; returns the model and writes JSON-lines metrics."""
    model_cfg = model_cfg or _model_config(resolved)
    if model_cfg.num_classes != len(taxonomy.labels):
        raise ConfigError(
            f"model.num_classes={model_cfg.num_classes} does not match the "
            f"{len(taxonomy.labels)}-label taxonomy"
        )
    train_cfg = _train_config(resolved)
    steps = int(resolved["train"]["steps"])
    batch_size = int(resolved["train"]["batch_size"])
    model = build_model(model_cfg, seed=resolved["seed"])
    optimizer = make_optimizer(model, train_cfg)
    order = np.random.default_rng(resolved["seed"]).permutation(len(records))
    lines = []
    for step in range(steps):
        picks = [int(order[(step * batch_size + i) % len(records)]) for i in range(batch_size)]
        breakdown = train_step(
            model,
            [images[i] for i in picks],
            [records[i] for i in picks],
            taxonomy,
            optimizer,
            step,
            train_cfg,
        )
        lines.append(json.dumps(breakdown, sort_keys=True))
    run.write_text(metrics_name, "\n".join(lines) + "\n")
    return model


def _predict_dataset(model, records, images, alpha=None, score_thresh=None, nms_iou=None):
    return {
        rec.image_id: predict(
            model, image, alpha=alpha, score_thresh=score_thresh, nms_iou=nms_iou
        )
        for rec, image in zip(records, images)
    }


def _load_detections_file(path: Path, records, taxonomy: LabelTaxonomy) -> dict:
    """COCO-style results: [{image_id, category_id, bbox [x,y,w,h], score}]."""
    try:
        entries = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read detections file {path}: {exc}") from exc
    if not isinstance(entries, list):
        raise ConfigError("detections file must hold a JSON list")
    detections = {rec.image_id: [] for rec in records}
    for i, entry in enumerate(entries):
        try:
            image_id = int(entry["image_id"])
            category = int(entry["category_id"])
            x, y, w, h = (float(v) for v in entry["bbox"])
            score = float(entry["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed detection entry {i}: {exc}") from exc
        if not 1 <= category <= len(taxonomy.labels):
            raise ConfigError(f"detection entry {i}: category_id {category} out of range")
        if image_id not in detections:
            raise ConfigError(f"detection entry {i}: unknown image_id {image_id}")
        detections[image_id].append(
            Detection(
                box=Box(x, y, x + w, y + h),
                class_id=category - 1,
                p_cls=score,
                p_loc=score,
                score=score,
            )
        )
    return detections


def _write_ap_table(run: RunDirectory, table: APTable, stem: str) -> None:
    run.write_text(f"{stem}.json", table.to_json() + "\n")
    run.write_text(f"{stem}.txt", table.to_text() + "\n")


def _write_csv(run: RunDirectory, name: str, header: list[str], rows: list[list]) -> Path:
    target = run.path / name
    with open(target, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return target


def cmd_gen_data(resolved: dict, args) -> int:
    run = RunDirectory("gen-data", resolved, args.out)
    scene = _scene_config(resolved)
    n_images = int(resolved["data"]["n_images"])
    records = generate_dataset(scene, n_images, out_dir=run.path)
    if resolved["data"]["taxonomy"] == "one_label":
        records = collapse_labels(records)
        export_dataset(records, "coco_json", run.path / "annotations.json")
    run.finalize()
    print(f"wrote {n_images} images, {sum(len(r.instances) for r in records)} instances -> {run.path}")
    return 0


def cmd_stats(resolved: dict, args) -> int:
    records, _, _ = resolve_dataset(resolved)
    run = RunDirectory("stats", resolved, args.out)
    stats = compute_statistics(records)
    run.write_text(
        "stats.json", json.dumps(stats.to_json(), indent=1, sort_keys=True) + "\n"
    )
    run.finalize()
    print(f"{stats.n_images} images, {stats.n_instances} instances -> {run.path}")
    return 0


def cmd_train(resolved: dict, args) -> int:
    records, images, taxonomy = resolve_dataset(resolved)
    run = RunDirectory("train", resolved, args.out)
    model = _train_model(resolved, records, images, taxonomy, run)
    save_checkpoint(
        model,
        run.path / "checkpoint.pt",
        {"steps": resolved["train"]["steps"], "seed": resolved["seed"]},
    )
    summary = {
        "parameters": parameter_count(model),
        "parameter_checksum": parameter_checksum(model),
        "boundary_head_evaluations": model.bgs_evaluations,
    }
    run.write_text("train_summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    run.finalize()
    print(f"trained {resolved['train']['steps']} steps -> {run.path}")
    return 0


def cmd_eval(resolved: dict, args) -> int:
    records, images, taxonomy = resolve_dataset(resolved)
    section = resolved["eval"]
    if (section["checkpoint"] is None) == (section["detections"] is None):
        raise ConfigError("eval needs exactly one of eval.checkpoint / eval.detections")
    run = RunDirectory("eval", resolved, args.out)
    if section["detections"] is not None:
        detections = _load_detections_file(section["detections"], records, taxonomy)
    else:
        try:
            model, _ = load_checkpoint(section["checkpoint"])
        except (OSError, RuntimeError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot load checkpoint: {exc}") from exc
        detections = _predict_dataset(
            model, records, images,
            alpha=section["alpha"],
            score_thresh=section["score_thresh"],
            nms_iou=section["nms_iou"],
        )
    table = evaluate(detections, records, taxonomy)
    _write_ap_table(run, table, "ap_table")
    run.finalize()
    print(table.to_text())
    return 0


def cmd_sweep_alpha(resolved: dict, args) -> int:
    """Train once, then re-score the fused ranking at every alpha."""
    records, images, taxonomy = resolve_dataset(resolved)
    run = RunDirectory("sweep-alpha", resolved, args.out)
    if _model_config(resolved).opcl is None:
        raise ConfigError("sweep-alpha requires a model with the gap head enabled")
    model = _train_model(resolved, records, images, taxonomy, run)
    rows = []
    for alpha in resolved["sweep"]["alphas"]:
        alpha = float(alpha)
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"sweep alpha {alpha} outside [0, 1]")
        detections = _predict_dataset(model, records, images, alpha=alpha)
        table = evaluate(detections, records, taxonomy)
        _write_ap_table(run, table, f"ap_table_alpha_{alpha:.2f}")
        rows.append([f"{alpha:.2f}", _csv_float(table.mean_ap), _csv_float(table.per_threshold[0.5])])
    _write_csv(run, "summary.csv", ["alpha", "mAP", "AP50"], rows)
    run.finalize()
    print(f"swept {len(rows)} alpha points -> {run.path}")
    return 0


def _csv_float(value) -> str:
    return "" if value is None else f"{value:.6f}"


def _sweep_training_resolved(resolved: dict) -> dict:
    override = resolved["sweep"]["steps"]
    if override is None:
        return resolved
    patched = json.loads(json.dumps(resolved))
    patched["train"]["steps"] = int(override)
    return patched


def cmd_sweep_thickness(resolved: dict, args) -> int:
    records, images, taxonomy = resolve_dataset(resolved)
    run = RunDirectory("sweep-thickness", resolved, args.out)
    base_model = _model_config(resolved)
    if not base_model.bgs_enabled:
        raise ConfigError("sweep-thickness requires bgs_enabled")
    training = _sweep_training_resolved(resolved)
    rows = []
    for thickness in resolved["sweep"]["thicknesses"]:
        cfg = ModelConfig.from_dict({**base_model.to_dict(), "bgs_thickness": float(thickness)})
        model = _train_model(
            training, records, images, taxonomy, run,
            model_cfg=cfg, metrics_name=f"metrics_t{thickness:g}.jsonl",
        )
        table = evaluate(_predict_dataset(model, records, images), records, taxonomy)
        _write_ap_table(run, table, f"ap_table_t{thickness:g}")
        rows.append([f"{thickness:g}", _csv_float(table.mean_ap), _csv_float(table.per_threshold[0.5])])
    _write_csv(run, "summary.csv", ["thickness", "mAP", "AP50"], rows)
    run.finalize()
    print(f"swept {len(rows)} thickness points -> {run.path}")
    return 0


def cmd_sweep_bgs_loss(resolved: dict, args) -> int:
    records, images, taxonomy = resolve_dataset(resolved)
    run = RunDirectory("sweep-bgs-loss", resolved, args.out)
    base_model = _model_config(resolved)
    if not base_model.bgs_enabled:
        raise ConfigError("sweep-bgs-loss requires bgs_enabled")
    training = _sweep_training_resolved(resolved)
    rows = []
    for variant in resolved["sweep"]["variants"]:
        cfg = ModelConfig.from_dict({**base_model.to_dict(), "bgs_variant": str(variant)})
        model = _train_model(
            training, records, images, taxonomy, run,
            model_cfg=cfg, metrics_name=f"metrics_{variant}.jsonl",
        )
        table = evaluate(_predict_dataset(model, records, images), records, taxonomy)
        _write_ap_table(run, table, f"ap_table_{variant}")
        rows.append([str(variant), _csv_float(table.mean_ap), _csv_float(table.per_threshold[0.5])])
    _write_csv(run, "summary.csv", ["variant", "mAP", "AP50"], rows)
    run.finalize()
    print(f"swept {len(rows)} loss variants -> {run.path}")
    return 0


def cmd_export(resolved: dict, args) -> int:
    if args.dataset is None:
        raise ConfigError("export requires --dataset")
    source = Path(args.dataset)
    fmt_in = "voc_xml" if source.is_dir() else "coco_json"
    try:
        records = import_dataset(source, fmt_in)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    run = RunDirectory("export", resolved, args.out)
    fmt_out = args.format
    target = run.path / ("annotations.json" if fmt_out == "coco_json" else "voc")
    export_dataset(records, fmt_out, target)
    run.finalize()
    print(f"exported {len(records)} records as {fmt_out} -> {target}")
    return 0


def _read_summary(path: Path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            reader = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read summary {path}: {exc}") from exc
    if not reader or len(reader) < 2:
        raise RuntimeError(f"summary {path} has no data rows to plot")
    return reader[0], reader[1:]


def cmd_plot_metrics(resolved: dict, args) -> int:
    if not args.summary:
        raise ConfigError("plot-metrics requires --summary")
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "cartondet"
    import matplotlib.pyplot as plt

    run = RunDirectory("plot-metrics", resolved, args.out)
    header, rows = _read_summary(Path(args.summary))
    kind = header[0]
    ys = [float(r[1]) if r[1] else float("nan") for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if kind == "variant":
        ax.bar(range(len(rows)), ys, color="#8c6239")
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels([r[0] for r in rows])
    else:
        xs = [float(r[0]) for r in rows]
        ax.plot(xs, ys, marker="o", color="#8c6239")
    ax.set_xlabel(kind)
    ax.set_ylabel(header[1])
    ax.set_title(f"{header[1]} vs {kind}")
    fig.tight_layout()
    fig.savefig(run.path / "plot.svg", metadata={"Date": None})
    plt.close(fig)
    _write_csv(run, "plot_data.csv", header, rows)
    run.finalize()
    print(f"plotted {len(rows)} points -> {run.path}")
    return 0


_COMMANDS = {
    "gen-data": (cmd_gen_data, "Generate a synthetic stacked-carton dataset"),
    "stats": (cmd_stats, "Summarize dataset statistics"),
    "train": (cmd_train, "Train a detector and save a checkpoint"),
    "eval": (cmd_eval, "Score a checkpoint or detections file against a dataset"),
    "sweep-alpha": (cmd_sweep_alpha, "Train once, score the fusion exponent grid"),
    "sweep-thickness": (cmd_sweep_thickness, "Retrain per boundary-band thickness"),
    "sweep-bgs-loss": (cmd_sweep_bgs_loss, "Retrain per boundary loss variant"),
    "export": (cmd_export, "Convert annotations between COCO JSON and VOC XML"),
    "plot-metrics": (cmd_plot_metrics, "Render a sweep summary CSV as an SVG plot"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cartondet",
        description=__doc__.split("\n\n")[0],
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", type=Path, default=None,
                         help="JSON config file with {data,model,train,eval,sweep} sections")
        cmd.add_argument("--set", dest="overrides", action="append", default=[],
                         metavar="PATH=VALUE",
                         help="dotted config override, e.g. --set train.steps=500")
        cmd.add_argument("--out", type=Path, default=None,
                         help=f"output directory (default: config output_dir, else ${OUTPUT_ROOT_ENV}/<command>)")
        if name == "export":
            cmd.add_argument("--dataset", type=Path, default=None,
                             help="source annotations.json or VOC directory")
            cmd.add_argument("--format", choices=["coco_json", "voc_xml"],
                             default="voc_xml", help="target format")
        if name == "plot-metrics":
            cmd.add_argument("--summary", type=Path, default=None,
                             help="summary.csv produced by a sweep command")
    return parser


def _error_json(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        file_config = {}
        if args.config is not None:
            try:
                file_config = json.loads(Path(args.config).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
            if not isinstance(file_config, dict):
                raise ConfigError("config file must hold a JSON object")
        resolved = resolve_config(file_config, args.overrides)
    except ConfigError as exc:
        _error_json("config", str(exc))
        return 2
    try:
        handler = _COMMANDS[args.command][0]
        return handler(resolved, args)
    except ConfigError as exc:
        _error_json("config", str(exc))
        return 2
    except Exception as exc:  # noqa: BLE001 - boundary: report and exit 3
        _error_json("runtime", f"{type(exc).__name__}: {exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
