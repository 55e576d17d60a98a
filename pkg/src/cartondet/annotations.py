"""Dataset model: polygon instances, the carton taxonomy, COCO/VOC I/O, stats.

The carton taxonomy has two modes.  Four-label mode distinguishes
``inner``/``outer`` (is the instance contour entirely in contact with other
cartons or the image edge?) crossed with ``all``/``occlusion`` (does the
instance still show at least one complete face?).  One-label mode collapses
everything to plain ``Carton``.

Interchange formats
-------------------
COCO JSON (single file) is the lossless format.  The subset written/read:

``images``       ``id``, ``file_name``, ``width``, ``height`` and an extra
                 ``source`` key (``synthetic`` | ``imported``).
``annotations``  ``id``, ``image_id``, ``category_id``, ``bbox`` (xywh),
                 ``area``, ``segmentation`` (one flat ``[x1, y1, ...]``
                 polygon), ``iscrowd`` (always 0) and an extra
                 ``polygon_degraded`` flag.
``categories``   ``id``, ``name``.

VOC XML (one file per image, named ``<image_id>.xml``) carries bounding
boxes only; polygons do not survive.  Re-imported VOC instances use the box
rectangle as their polygon and are flagged ``polygon_degraded``.  All
coordinates in both formats are 0-based real-valued pixels.
"""

from __future__ import annotations

import json
import math
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box

FOUR_LABELS = (
    "Carton-inner-all",
    "Carton-inner-occlusion",
    "Carton-outer-all",
    "Carton-outer-occlusion",
)
ONE_LABEL = ("Carton",)

# histogram binning used by compute_statistics
_UNIT_BINS = 20
_ASPECT_LIMIT = 3.125
_ASPECT_BINS = 25  # odd, so log-aspect 0 sits inside the middle bin


class DatasetFormatError(ValueError):
    """A dataset file does not conform to the documented schema subset."""


class TaxonomyError(ValueError):
    """A label is not a member of the active taxonomy."""


@dataclass(frozen=True)
class LabelTaxonomy:
    mode: str  # "four_label" | "one_label"
    labels: tuple[str, ...]

    @classmethod
    def four_label(cls) -> "LabelTaxonomy":
        return cls(mode="four_label", labels=FOUR_LABELS)

    @classmethod
    def one_label(cls) -> "LabelTaxonomy":
        return cls(mode="one_label", labels=ONE_LABEL)

    def __post_init__(self):
        if self.mode == "four_label":
            if set(self.labels) != set(FOUR_LABELS):
                raise TaxonomyError(f"four_label taxonomy must be {FOUR_LABELS}")
        elif self.mode == "one_label":
            if set(self.labels) != set(ONE_LABEL):
                raise TaxonomyError(f"one_label taxonomy must be {ONE_LABEL}")
        else:
            raise TaxonomyError(f"unknown taxonomy mode {self.mode!r}")

    def index_of(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise TaxonomyError(f"label {label!r} is not in the {self.mode} taxonomy") from None


def polygon_hull(polygon: Sequence[tuple[float, float]]) -> Box:
    """Tight axis-aligned bounding box of a vertex list."""
    xs = [p[0] for p in polygon]
    ys = [p[1] for p in polygon]
    return Box(min(xs), min(ys), max(xs), max(ys))


@dataclass(frozen=True)
class InstanceAnnotation:
    """One polygon instance.

    ``bbox`` must be the tight hull of ``polygon``; use :meth:`from_polygon`
    to construct it that way.  ``polygon_degraded`` records that the true
    polygon was lost in a bbox-only interchange format and the stored one is
    just the box rectangle.
    """

    instance_id: int
    label: str
    polygon: tuple[tuple[float, float], ...]
    bbox: Box
    polygon_degraded: bool = False

    @classmethod
    def from_polygon(
        cls,
        instance_id: int,
        label: str,
        polygon: Iterable[Sequence[float]],
        polygon_degraded: bool = False,
    ) -> "InstanceAnnotation":
        poly = tuple((float(x), float(y)) for x, y in polygon)
        if len(poly) < 3:
            raise DatasetFormatError(
                f"instance {instance_id}: polygon needs >= 3 vertices, got {len(poly)}"
            )
        return cls(
            instance_id=int(instance_id),
            label=label,
            polygon=poly,
            bbox=polygon_hull(poly),
            polygon_degraded=polygon_degraded,
        )


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    width: int
    height: int
    file_name: str = ""
    source: str = "synthetic"
    instances: tuple[InstanceAnnotation, ...] = ()

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DatasetFormatError(
                f"image {self.image_id}: non-positive size {self.width}x{self.height}"
            )


def infer_taxonomy(records: Iterable[ImageRecord]) -> LabelTaxonomy:
    """Pick the taxonomy matching the labels actually present."""
    seen = {inst.label for rec in records for inst in rec.instances}
    if seen <= set(ONE_LABEL):
        return LabelTaxonomy.one_label()
    if seen <= set(FOUR_LABELS):
        return LabelTaxonomy.four_label()
    raise TaxonomyError(f"labels {sorted(seen)} fit neither taxonomy")


def _check_polygon(image_id, ann_id, poly, path):
    if len(poly) < 3:
        raise DatasetFormatError(
            f"{path}: image {image_id} annotation {ann_id}: polygon has "
            f"{len(poly)} vertices, need >= 3"
        )
    hull = polygon_hull(poly)
    if hull.area < 1.0:
        raise DatasetFormatError(
            f"{path}: image {image_id} annotation {ann_id}: degenerate polygon "
            f"(hull area {hull.area:.4g} < 1 px^2)"
        )


def _import_coco(path: Path, taxonomy: LabelTaxonomy | None) -> list[ImageRecord]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: not valid JSON: {exc}") from exc
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise DatasetFormatError(f"{path}: missing top-level {key!r} array")
    cat_names = {}
    for cat in doc["categories"]:
        cat_names[cat["id"]] = cat["name"]
    if taxonomy is None and cat_names:
        labels = set(cat_names.values())
        if labels <= set(ONE_LABEL):
            taxonomy = LabelTaxonomy.one_label()
        elif labels <= set(FOUR_LABELS):
            taxonomy = LabelTaxonomy.four_label()
        else:
            raise TaxonomyError(f"{path}: categories {sorted(labels)} fit neither taxonomy")
    allowed = set(taxonomy.labels) if taxonomy is not None else None

    by_image: dict[int, list[InstanceAnnotation]] = {}
    for ann in doc["annotations"]:
        ann_id = ann.get("id")
        image_id = ann.get("image_id")
        try:
            label = cat_names[ann["category_id"]]
        except KeyError:
            raise DatasetFormatError(
                f"{path}: annotation {ann_id}: unknown category_id {ann.get('category_id')}"
            ) from None
        if allowed is not None and label not in allowed:
            raise TaxonomyError(
                f"{path}: annotation {ann_id}: label {label!r} is not in the active taxonomy"
            )
        seg = ann.get("segmentation")
        if not seg or not isinstance(seg, list) or not isinstance(seg[0], list):
            raise DatasetFormatError(
                f"{path}: annotation {ann_id}: expected one [x1, y1, ...] polygon"
            )
        flat = seg[0]
        if len(flat) % 2 != 0:
            raise DatasetFormatError(
                f"{path}: annotation {ann_id}: odd segmentation length {len(flat)}"
            )
        poly = [(float(flat[i]), float(flat[i + 1])) for i in range(0, len(flat), 2)]
        _check_polygon(image_id, ann_id, poly, path)
        inst = InstanceAnnotation.from_polygon(
            instance_id=ann_id,
            label=label,
            polygon=poly,
            polygon_degraded=bool(ann.get("polygon_degraded", False)),
        )
        by_image.setdefault(image_id, []).append(inst)

    records = []
    for img in doc["images"]:
        records.append(
            ImageRecord(
                image_id=img["id"],
                width=img["width"],
                height=img["height"],
                file_name=img.get("file_name", ""),
                source=img.get("source", "imported"),
                instances=tuple(by_image.get(img["id"], ())),
            )
        )
    records.sort(key=lambda r: r.image_id)
    return records


def _import_voc(path: Path, taxonomy: LabelTaxonomy | None) -> list[ImageRecord]:
    files = sorted(path.glob("*.xml")) if path.is_dir() else [path]
    if not files:
        raise DatasetFormatError(f"{path}: no .xml files found")
    allowed = set(taxonomy.labels) if taxonomy is not None else None
    records = []
    for xml_path in files:
        try:
            root = ET.parse(xml_path).getroot()
        except ET.ParseError as exc:
            raise DatasetFormatError(f"{xml_path}: not valid XML: {exc}") from exc
        if root.tag != "annotation":
            raise DatasetFormatError(f"{xml_path}: root element must be <annotation>")
        size = root.find("size")
        if size is None:
            raise DatasetFormatError(f"{xml_path}: missing <size>")
        id_node = root.find("id")
        image_id = int(id_node.text) if id_node is not None else int(xml_path.stem)
        source_node = root.find("source")
        instances = []
        for k, obj in enumerate(root.iter("object")):
            label = obj.findtext("name")
            if label is None:
                raise DatasetFormatError(f"{xml_path}: object {k} has no <name>")
            if allowed is not None and label not in allowed:
                raise TaxonomyError(
                    f"{xml_path}: object {k}: label {label!r} is not in the active taxonomy"
                )
            bnd = obj.find("bndbox")
            if bnd is None:
                raise DatasetFormatError(f"{xml_path}: object {k} has no <bndbox>")
            try:
                x1 = float(bnd.findtext("xmin"))
                y1 = float(bnd.findtext("ymin"))
                x2 = float(bnd.findtext("xmax"))
                y2 = float(bnd.findtext("ymax"))
            except (TypeError, ValueError):
                raise DatasetFormatError(f"{xml_path}: object {k}: bad <bndbox>") from None
            inst_node = obj.findtext("instance_id")
            inst_id = int(inst_node) if inst_node is not None else k
            poly = [(x1, y1), (x2, y1), (x2, y2), (x1, y2)]
            _check_polygon(image_id, inst_id, poly, xml_path)
            instances.append(
                InstanceAnnotation.from_polygon(
                    instance_id=inst_id, label=label, polygon=poly, polygon_degraded=True
                )
            )
        records.append(
            ImageRecord(
                image_id=image_id,
                width=int(float(size.findtext("width"))),
                height=int(float(size.findtext("height"))),
                file_name=root.findtext("filename") or "",
                source=source_node.text if source_node is not None else "imported",
                instances=tuple(instances),
            )
        )
    records.sort(key=lambda r: r.image_id)
    return records


def import_dataset(path, format: str, taxonomy: LabelTaxonomy | None = None) -> list[ImageRecord]:
    """Read a dataset from disk.

    ``format`` is ``coco_json`` (one file) or ``voc_xml`` (a directory of
    per-image files, or one file).  When ``taxonomy`` is given, any label
    outside it raises :class:`TaxonomyError`; otherwise the taxonomy is
    inferred from the labels present.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f"{path}: does not exist")
    if format == "coco_json":
        return _import_coco(path, taxonomy)
    if format == "voc_xml":
        return _import_voc(path, taxonomy)
    raise ValueError(f"unknown dataset format {format!r}")


def _export_coco(records: Sequence[ImageRecord], path: Path) -> None:
    # Write the full taxonomy's category table, not just the labels present,
    # so ``category_id == taxonomy index + 1`` regardless of which labels a
    # particular dataset happens to contain (detections files rely on this).
    labels = infer_taxonomy(records).labels
    cat_ids = {name: i + 1 for i, name in enumerate(labels)}
    doc = {"images": [], "annotations": [], "categories": []}
    for name, cid in cat_ids.items():
        doc["categories"].append({"id": cid, "name": name})
    for rec in records:
        doc["images"].append(
            {
                "id": rec.image_id,
                "file_name": rec.file_name,
                "width": rec.width,
                "height": rec.height,
                "source": rec.source,
            }
        )
        for inst in rec.instances:
            flat = [v for pt in inst.polygon for v in pt]
            b = inst.bbox
            doc["annotations"].append(
                {
                    "id": inst.instance_id,
                    "image_id": rec.image_id,
                    "category_id": cat_ids[inst.label],
                    "bbox": [b.x_min, b.y_min, b.width, b.height],
                    "area": b.area,
                    "segmentation": [flat],
                    "iscrowd": 0,
                    "polygon_degraded": inst.polygon_degraded,
                }
            )
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def _export_voc(records: Sequence[ImageRecord], path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)
    for rec in records:
        root = ET.Element("annotation")
        ET.SubElement(root, "id").text = str(rec.image_id)
        ET.SubElement(root, "filename").text = rec.file_name
        ET.SubElement(root, "source").text = rec.source
        size = ET.SubElement(root, "size")
        ET.SubElement(size, "width").text = str(rec.width)
        ET.SubElement(size, "height").text = str(rec.height)
        ET.SubElement(size, "depth").text = "3"
        for inst in rec.instances:
            obj = ET.SubElement(root, "object")
            ET.SubElement(obj, "name").text = inst.label
            ET.SubElement(obj, "instance_id").text = str(inst.instance_id)
            bnd = ET.SubElement(obj, "bndbox")
            b = inst.bbox
            ET.SubElement(bnd, "xmin").text = repr(b.x_min)
            ET.SubElement(bnd, "ymin").text = repr(b.y_min)
            ET.SubElement(bnd, "xmax").text = repr(b.x_max)
            ET.SubElement(bnd, "ymax").text = repr(b.y_max)
        tree = ET.ElementTree(root)
        ET.indent(tree)
        tree.write(path / f"{rec.image_id}.xml", encoding="utf-8")


def export_dataset(records: Sequence[ImageRecord], format: str, path) -> None:
    """Write a dataset to disk; see the module docstring for the schemas."""
    path = Path(path)
    if format == "coco_json":
        _export_coco(records, path)
    elif format == "voc_xml":
        _export_voc(records, path)
    else:
        raise ValueError(f"unknown dataset format {format!r}")


def collapse_labels(records: Sequence[ImageRecord]) -> list[ImageRecord]:
    """Map every four-label instance to plain ``Carton``.

    Idempotent; warns when the records are already one-label.
    """
    labels = {inst.label for rec in records for inst in rec.instances}
    if labels <= set(ONE_LABEL):
        warnings.warn("records are already one-label; collapse_labels is a no-op")
        return list(records)
    out = []
    for rec in records:
        out.append(
            replace(
                rec,
                instances=tuple(replace(inst, label="Carton") for inst in rec.instances),
            )
        )
    return out


def validate_taxonomy(record: ImageRecord, taxonomy: LabelTaxonomy) -> list[str]:
    """Schema-level violations of one record; empty list means valid."""
    violations = []
    seen_ids = set()
    allowed = set(taxonomy.labels)
    for inst in record.instances:
        where = f"image {record.image_id} instance {inst.instance_id}"
        if inst.label not in allowed:
            violations.append(f"{where}: unknown label {inst.label!r}")
        if len(inst.polygon) < 3:
            violations.append(f"{where}: polygon has {len(inst.polygon)} vertices")
        else:
            hull = polygon_hull(inst.polygon)
            if hull != inst.bbox:
                violations.append(
                    f"{where}: bbox {inst.bbox.as_tuple()} is not the polygon hull "
                    f"{hull.as_tuple()}"
                )
            if hull.area < 1.0:
                violations.append(f"{where}: degenerate polygon (hull area {hull.area:.4g})")
        for x, y in inst.polygon:
            if not (0 <= x <= record.width and 0 <= y <= record.height):
                violations.append(f"{where}: vertex ({x}, {y}) outside image bounds")
                break
        if inst.instance_id in seen_ids:
            violations.append(f"{where}: duplicate instance_id")
        seen_ids.add(inst.instance_id)
    return violations


@dataclass
class DatasetStatistics:
    """Shape/size/count histograms plus per-label tallies.

    Each histogram is ``(edges, counts)`` with ``len(edges) == len(counts)+1``.
    Values are clipped into the edge range, so histogram mass equals the
    number of contributing instances (or images).
    """

    n_images: int
    n_instances: int
    degenerate_instances: int
    histograms: dict[str, tuple[np.ndarray, np.ndarray]]
    label_counts: dict[str, dict[str, int]]

    def to_json(self) -> dict:
        return {
            "n_images": self.n_images,
            "n_instances": self.n_instances,
            "degenerate_instances": self.degenerate_instances,
            "histograms": {
                name: {"edges": edges.tolist(), "counts": counts.tolist()}
                for name, (edges, counts) in self.histograms.items()
            },
            "label_counts": self.label_counts,
        }


def compute_statistics(records: Sequence[ImageRecord]) -> DatasetStatistics:
    """Aggregate instance-shape and count statistics over a dataset.

    Widths, heights and areas are normalized by the owning image; aspect
    ratio is ``log(width / height)`` clipped symmetrically so a square box
    lands exactly at 0 and swapping every box's width/height mirrors the
    histogram.  Zero-size boxes are excluded and tallied separately.
    """
    if not records:
        raise ValueError("compute_statistics requires at least one record")
    widths, heights, aspects, areas = [], [], [], []
    per_image_counts = []
    label_counts: dict[str, dict[str, int]] = {}
    degenerate = 0
    for rec in records:
        per_image_counts.append(len(rec.instances))
        labels_here = set()
        for inst in rec.instances:
            entry = label_counts.setdefault(inst.label, {"instances": 0, "images": 0})
            entry["instances"] += 1
            labels_here.add(inst.label)
            b = inst.bbox
            if b.width <= 0 or b.height <= 0:
                degenerate += 1
                continue
            widths.append(b.width / rec.width)
            heights.append(b.height / rec.height)
            aspects.append(math.log(b.width / b.height))
            areas.append(b.area / (rec.width * rec.height))
        for label in labels_here:
            label_counts[label]["images"] += 1

    unit_edges = np.linspace(0.0, 1.0, _UNIT_BINS + 1)
    aspect_edges = np.linspace(-_ASPECT_LIMIT, _ASPECT_LIMIT, _ASPECT_BINS + 1)
    max_count = max(per_image_counts)
    count_edges = np.arange(0, max_count + 2, dtype=float)

    def hist(values, edges):
        clipped = np.clip(np.asarray(values, dtype=float), edges[0], edges[-1])
        counts, _ = np.histogram(clipped, bins=edges)
        return edges, counts

    histograms = {
        "width_norm": hist(widths, unit_edges),
        "height_norm": hist(heights, unit_edges),
        "log_aspect": hist(aspects, aspect_edges),
        "area_norm": hist(areas, unit_edges),
        "instances_per_image": hist(per_image_counts, count_edges),
    }
    return DatasetStatistics(
        n_images=len(records),
        n_instances=sum(per_image_counts),
        degenerate_instances=degenerate,
        histograms=histograms,
        label_counts=label_counts,
    )
