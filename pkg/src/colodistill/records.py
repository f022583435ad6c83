"""Record data model, manifest I/O and cohort splitting."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .imaging import read_rgb

MANIFEST_COLUMNS = (
    "record_id",
    "center_id",
    "report_text",
    "image_paths",
    "expert_report_label",
    "expert_image_labels",
    "pathology",
)
SPLIT_NAMES = ("train", "internal_test", "external_test", "prospective_test")


class ManifestError(ValueError):
    pass


class MissingLabelError(KeyError):
    pass


@dataclass(frozen=True)
class PathologyLabel:
    vienna_category: int
    malignant: int

    def __post_init__(self):
        if self.vienna_category not in (1, 3, 4, 5):
            raise ValueError(f"Vienna category {self.vienna_category} is not in {{1,3,4,5}}")
        if self.malignant != int(self.vienna_category != 1):
            raise ValueError("malignant flag inconsistent with Vienna category")


def map_vienna(category: int) -> PathologyLabel:
    """Category 1 is benign; 3, 4 and 5 are malignant. Others are excluded."""
    if category not in (1, 3, 4, 5):
        raise ValueError(f"Vienna category {category} is excluded (expected 1, 3, 4 or 5)")
    return PathologyLabel(category, int(category != 1))


@dataclass(frozen=True)
class ColonoscopyRecord:
    record_id: str
    report_text: str
    image_refs: tuple[str, ...]
    center_id: str = ""
    expert_report_label: int | None = None
    expert_image_labels: tuple[int, ...] | None = None
    pathology_outcome: PathologyLabel | None = None

    def __post_init__(self):
        object.__setattr__(self, "image_refs", tuple(self.image_refs))
        if not self.image_refs:
            raise ManifestError(f"record {self.record_id}: empty image list")
        if self.expert_report_label not in (None, 0, 1):
            raise ManifestError(f"record {self.record_id}: report label must be 0/1")
        if self.expert_image_labels is not None:
            labels = tuple(int(v) for v in self.expert_image_labels)
            if len(labels) != len(self.image_refs):
                raise ManifestError(
                    f"record {self.record_id}: {len(labels)} image labels for "
                    f"{len(self.image_refs)} images"
                )
            if any(v not in (0, 1) for v in labels):
                raise ManifestError(f"record {self.record_id}: image labels must be 0/1")
            object.__setattr__(self, "expert_image_labels", labels)


@dataclass(frozen=True)
class ImageSample:
    image_id: str
    pixels: np.ndarray
    parent_record: str

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"image {self.image_id}: expected HxWx3, got {p.shape}")
        if p.dtype != np.uint8:
            raise ValueError(f"image {self.image_id}: expected uint8 pixels, got {p.dtype}")
        p.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class Bag:
    record_id: str
    instances: tuple[ImageSample, ...]
    label: int

    def __post_init__(self):
        if len(self.instances) < 1:
            raise ValueError(f"bag {self.record_id} has no instances")
        if self.label not in (0, 1):
            raise ValueError(f"bag {self.record_id}: label must be 0/1")

    def __len__(self) -> int:
        return len(self.instances)


@dataclass(frozen=True)
class DatasetSplit:
    name: str
    record_ids: frozenset[str] = field(default_factory=frozenset)


def image_id_from_ref(ref: str) -> str:
    return Path(ref).stem


def _opt_int(text: str, what: str, lineno: int) -> int | None:
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        raise ManifestError(f"line {lineno}: bad {what} {text!r}") from None


def load_manifest(path: str | Path, check_images: bool = True) -> list[ColonoscopyRecord]:
    """Parse a tab-separated manifest; image paths resolve relative to its directory."""
    path = Path(path)
    base = path.parent
    records: list[ColonoscopyRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = (line.rstrip("\r\n").split("\t") if line.strip() else [] for line in fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError("line 1: missing header row") from None
        if tuple(header) != MANIFEST_COLUMNS:
            raise ManifestError(f"line 1: header must be {MANIFEST_COLUMNS}, got {tuple(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(
                    f"line {lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}"
                )
            rid, center, text_json, paths, rep, img_labels, path_cat = row
            if not rid:
                raise ManifestError(f"line {lineno}: empty record_id")
            if rid in seen:
                raise ManifestError(f"line {lineno}: duplicate record_id {rid}")
            try:
                text = json.loads(text_json)
            except json.JSONDecodeError as e:
                raise ManifestError(f"line {lineno}: report_text is not JSON: {e}") from None
            if not isinstance(text, str):
                raise ManifestError(f"line {lineno}: report_text must be a JSON string")
            refs = tuple(p for p in paths.split(";") if p)
            if not refs:
                raise ManifestError(f"line {lineno}: record {rid}: empty image list")
            labels = None
            if img_labels:
                try:
                    labels = tuple(int(v) for v in img_labels.split(","))
                except ValueError:
                    raise ManifestError(f"line {lineno}: bad image labels {img_labels!r}") from None
            cat = _opt_int(path_cat, "pathology category", lineno)
            try:
                rec = ColonoscopyRecord(
                    record_id=rid,
                    report_text=text,
                    image_refs=refs,
                    center_id=center,
                    expert_report_label=_opt_int(rep, "report label", lineno),
                    expert_image_labels=labels,
                    pathology_outcome=None if cat is None else map_vienna(cat),
                )
            except ValueError as e:
                raise ManifestError(f"line {lineno}: {e}") from None
            if check_images:
                for ref in refs:
                    if not (base / ref).is_file():
                        raise ManifestError(f"record {rid}: missing image file {ref}")
            seen.add(rid)
            records.append(rec)
    return records


def write_manifest(path: str | Path, records: Iterable[ColonoscopyRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for r in records:
            row = [
                r.record_id,
                r.center_id,
                json.dumps(r.report_text, ensure_ascii=False),
                ";".join(r.image_refs),
                "" if r.expert_report_label is None else str(r.expert_report_label),
                "" if r.expert_image_labels is None else ",".join(map(str, r.expert_image_labels)),
                "" if r.pathology_outcome is None else str(r.pathology_outcome.vienna_category),
            ]
            for cell in row:
                if "\t" in cell or "\n" in cell or "\r" in cell:
                    raise ManifestError(f"record {r.record_id}: field contains a tab or newline: {cell!r}")
            fh.write("\t".join(row) + "\n")


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    quotas = [n * f for f in fractions]
    sizes = [math.floor(q) for q in quotas]
    left = n - sum(sizes)
    # stable sort: equal remainders go to the earlier name
    order = sorted(range(len(quotas)), key=lambda i: -(quotas[i] - sizes[i]))
    for i in order[:left]:
        sizes[i] += 1
    return sizes


def split_dataset(
    records: Sequence[ColonoscopyRecord] | Sequence[str],
    fractions: Mapping[str, float],
    seed: int,
) -> list[DatasetSplit]:
    """Random disjoint partition sized by largest-remainder rounding.

    Depends only on the set of record ids, the fractions and the seed; input
    order is irrelevant.
    """
    for name, f in fractions.items():
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"fraction for {name!r} out of [0,1]: {f}")
    if abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ValueError(f"fractions sum to {sum(fractions.values())}, expected 1")
    ids = sorted(r if isinstance(r, str) else r.record_id for r in records)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate record ids")
    perm = np.random.default_rng(seed).permutation(len(ids))
    sizes = largest_remainder(len(ids), list(fractions.values()))
    out, start = [], 0
    for name, size in zip(fractions, sizes):
        out.append(DatasetSplit(name, frozenset(ids[i] for i in perm[start : start + size])))
        start += size
    return out


def load_image(record: ColonoscopyRecord, ref: str, base: str | Path = ".") -> ImageSample:
    return ImageSample(image_id_from_ref(ref), read_rgb(Path(base) / ref), record.record_id)


def build_bags(
    records: Sequence[ColonoscopyRecord],
    report_labels: Mapping[str, int],
    loader: Callable[[ColonoscopyRecord, str], ImageSample] | None = None,
    base: str | Path = ".",
) -> list[Bag]:
    """One bag per record, instances in manifest order."""
    if loader is None:
        loader = lambda rec, ref: load_image(rec, ref, base)  # noqa: E731
    bags = []
    for rec in records:
        if rec.record_id not in report_labels:
            raise MissingLabelError(f"no report label for record {rec.record_id}")
        label = int(report_labels[rec.record_id])
        bags.append(Bag(rec.record_id, tuple(loader(rec, ref) for ref in rec.image_refs), label))
    return bags
