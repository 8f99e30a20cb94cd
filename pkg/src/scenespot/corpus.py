"""Corpus construction and serving.

A corpus is a directory with one subdirectory per destination class holding
PNG/JPEG images, described by a ``manifest.jsonl`` file (one header line with
label map / split ratios / seed, then one record line per image).

Images enter the corpus through ``build_corpus`` (URL-manifest downloader
with decode check and perceptual-hash dedup) or are simply placed in the
class directories and indexed by ``scan_directory``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import urllib.parse
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .autograd import Tensor
from .errors import (
    ConfigurationError,
    DataError,
    LoadError,
    SplitError,
    UnknownClassError,
    UsageError,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.8, 0.1, 0.1)

# The fourteen destinations the default model recognizes, in label order.
DEFAULT_DESTINATIONS: tuple[tuple[str, str], ...] = (
    ("Bragatheeswarar Temple", "India"),
    ("Giza Plateau", "Egypt"),
    ("Lake Pichhola", "India"),
    ("Machu Picchu", "Peru"),
    ("Mahabalipuram", "India"),
    ("Marina Beach", "India"),
    ("Meenakshiamman Temple", "India"),
    ("Nilgiri Railway", "India"),
    ("Taj Mahal", "India"),
    ("Pulpit Rock", "Norway"),
    ("Troll Tongue", "Norway"),
    ("Palace of LostCity", "South Africa"),
    ("Petra", "Jordan"),
    ("Leaning Tower of Pisa", "Italy"),
)

ACCEPTED_FORMATS = ("PNG", "JPEG")
DOWNLOAD_SHORT_SIDE = 128
DOWNLOAD_TIMEOUT_S = 20.0
DOWNLOAD_WORKERS = 8


class LabelMap:
    """Ordered, contiguous mapping index -> (destination name, country)."""

    def __init__(self, entries: Iterable[tuple[str, str]] = DEFAULT_DESTINATIONS):
        self.entries: tuple[tuple[str, str], ...] = tuple((str(n), str(c)) for n, c in entries)
        if not self.entries:
            raise ConfigurationError("label map must not be empty")
        names = [n for n, _ in self.entries]
        if len(set(names)) != len(names):
            raise ConfigurationError("label map names must be unique")
        self._index = {n: i for i, (n, _) in enumerate(self.entries)}

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelMap) and self.entries == other.entries

    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def name(self, index: int) -> str:
        return self.entries[index][0]

    def country(self, index: int) -> str:
        return self.entries[index][1]

    def index(self, name: str) -> int:
        if name not in self._index:
            raise UnknownClassError(f"unknown class {name!r}")
        return self._index[name]


@dataclass
class SampleRecord:
    path: str                     # relative to the corpus root
    label_index: int
    split: Optional[str] = None   # train/val/test once assigned
    content_hash: int = 0         # 64-bit perceptual difference hash


@dataclass
class CorpusManifest:
    labels: LabelMap
    records: list[SampleRecord]
    ratios: Optional[tuple[float, float, float]] = None
    seed: Optional[int] = None
    root: Optional[Path] = None   # runtime only, not serialized

    def split_records(self, split: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == split]

    def class_records(self, label_index: int) -> list[SampleRecord]:
        return [r for r in self.records if r.label_index == label_index]


@dataclass
class UrlManifest:
    """Rows of (destination class, source URL, license note)."""

    rows: list[tuple[str, str, str]]

    def validate(self, labels: LabelMap) -> None:
        for i, (cls, url, _license) in enumerate(self.rows):
            if cls not in labels.names():
                raise UnknownClassError(f"row {i + 1}: unknown class {cls!r}")
            parsed = urllib.parse.urlparse(url)
            if parsed.scheme not in ("http", "https", "file") or \
                    (not parsed.netloc and not parsed.path):
                raise DataError(f"row {i + 1}: malformed URL {url!r}")


def read_url_manifest(path) -> UrlManifest:
    """Parse the `class,url,license` CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["class", "url", "license"]:
            raise DataError(f"URL manifest must start with header 'class,url,license', "
                            f"got {header!r}")
        rows = []
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                raise DataError(f"URL manifest row {reader.line_num} has too few columns")
            cls = row[0].strip()
            url = row[1].strip()
            lic = row[2].strip() if len(row) > 2 else ""
            rows.append((cls, url, lic))
    return UrlManifest(rows)


# -- perceptual hashing -------------------------------------------------------

def dhash(img: Image.Image) -> int:
    """8x8 difference hash: 64 bits of horizontal brightness gradients."""
    small = img.convert("L").resize((9, 8), Image.Resampling.LANCZOS)
    px = np.asarray(small, dtype=np.int16)
    bits = px[:, :-1] > px[:, 1:]
    h = 0
    for b in bits.reshape(-1):
        h = (h << 1) | int(b)
    return h


def dhash_file(path) -> int:
    with Image.open(path) as img:
        return dhash(img)


def _decode_accepted(data: bytes) -> Image.Image:
    """Decode bytes as PNG or JPEG; anything else raises LoadError."""
    try:
        img = Image.open(io.BytesIO(data))
        fmt = img.format
        img.load()
    except (UnidentifiedImageError, OSError) as e:
        raise LoadError(f"undecodable image: {e}", path=None) from e
    if fmt not in ACCEPTED_FORMATS:
        raise LoadError(f"unsupported format {fmt!r} (accepted: PNG, JPEG)", path=None)
    return img


# -- build: download, curate, store -------------------------------------------

@dataclass
class ClassCounters:
    downloaded: int = 0
    failed: int = 0
    rejected_undecodable: int = 0
    rejected_duplicate: int = 0
    stored: int = 0


@dataclass
class CurationReport:
    per_class: dict[str, ClassCounters] = field(default_factory=dict)

    def counters(self, cls: str) -> ClassCounters:
        return self.per_class.setdefault(cls, ClassCounters())

    def to_dict(self) -> dict:
        out = {"classes": {}, "totals": {}}
        totals = ClassCounters()
        for cls in sorted(self.per_class):
            c = self.per_class[cls]
            out["classes"][cls] = vars(c).copy()
            for k in vars(totals):
                setattr(totals, k, getattr(totals, k) + getattr(c, k))
        out["totals"] = vars(totals).copy()
        return out


def _fetch(url: str) -> bytes:
    with urllib.request.urlopen(url, timeout=DOWNLOAD_TIMEOUT_S) as resp:
        return resp.read()


def build_corpus(urls: UrlManifest, out_dir,
                 labels: Optional[LabelMap] = None) -> CurationReport:
    """Fetch every manifest row, verify, resize, dedup and store.

    Stored files live under out_dir/<class name>/<hash>.png with the short
    side resized to 128 px. Duplicate detection is exact-match on the 64-bit
    difference hash within a class, including files already present from
    earlier runs, so re-running over the same manifest adds nothing. Per-URL
    failures are tallied in the report, not raised. The report is also
    written to out_dir/curation_report.json.
    """
    labels = labels or LabelMap()
    urls.validate(labels)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    report = CurationReport()
    for cls in labels.names():
        report.counters(cls)

    # hashes of images already stored, per class
    seen: dict[str, set[int]] = {}
    for cls in labels.names():
        cls_dir = out_dir / cls
        hashes = set()
        if cls_dir.is_dir():
            for f in sorted(cls_dir.iterdir()):
                if f.is_file():
                    try:
                        hashes.add(dhash_file(f))
                    except (UnidentifiedImageError, OSError):
                        log.warning("ignoring undecodable existing file %s", f)
        seen[cls] = hashes

    def fetch_row(row):
        cls, url, _lic = row
        try:
            return cls, url, _fetch(url), None
        except Exception as e:  # per-row network failures are data, not fatal
            return cls, url, None, e

    with ThreadPoolExecutor(max_workers=DOWNLOAD_WORKERS) as pool:
        fetched = pool.map(fetch_row, urls.rows)
        # acceptance is sequential in manifest order so dedup is deterministic
        for cls, url, data, err in fetched:
            counters = report.counters(cls)
            if err is not None:
                log.warning("fetch failed for %s: %s", url, err)
                counters.failed += 1
                continue
            counters.downloaded += 1
            try:
                img = _decode_accepted(data)
            except LoadError as e:
                log.warning("rejecting %s: %s", url, e)
                counters.rejected_undecodable += 1
                continue
            img = img.convert("RGB")
            w, h = img.size
            scale = DOWNLOAD_SHORT_SIDE / min(w, h)
            img = img.resize((max(1, round(w * scale)), max(1, round(h * scale))),
                             Image.Resampling.BILINEAR)
            h64 = dhash(img)
            if h64 in seen[cls]:
                counters.rejected_duplicate += 1
                continue
            cls_dir = out_dir / cls
            cls_dir.mkdir(parents=True, exist_ok=True)
            img.save(cls_dir / f"{h64:016x}.png")
            seen[cls].add(h64)
            counters.stored += 1

    (out_dir / "curation_report.json").write_text(
        json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return report


# -- scan ----------------------------------------------------------------------

def scan_directory(root, labels: Optional[LabelMap] = None) -> CorpusManifest:
    """Index every decodable image under root/<class>/ into an unsplit manifest.

    Unknown subdirectories are an error; missing or empty class directories
    get a warning and zero records. Files that fail to decode are logged and
    skipped; exact within-class hash duplicates keep only the first file in
    sorted order.
    """
    labels = labels or LabelMap()
    root = Path(root)
    if not root.is_dir():
        raise LoadError(f"corpus root {root} is not a directory", path=root)

    known = set(labels.names())
    offenders = sorted(d.name for d in root.iterdir()
                       if d.is_dir() and d.name not in known)
    if offenders:
        raise UnknownClassError(
            f"directories not in the label map: {', '.join(offenders)}")

    records: list[SampleRecord] = []
    for idx, cls in enumerate(labels.names()):
        cls_dir = root / cls
        if not cls_dir.is_dir():
            log.warning("class %r has no directory under %s", cls, root)
            continue
        seen_hashes: set[int] = set()
        count = 0
        for f in sorted(cls_dir.iterdir()):
            if not f.is_file():
                continue
            try:
                with Image.open(f) as img:
                    fmt = img.format
                    img.load()
                    if fmt not in ACCEPTED_FORMATS:
                        log.warning("skipping %s: unsupported format %r", f, fmt)
                        continue
                    h64 = dhash(img)
            except (UnidentifiedImageError, OSError) as e:
                log.warning("skipping undecodable %s: %s", f, e)
                continue
            if h64 in seen_hashes:
                log.warning("skipping %s: duplicate hash %016x within class %r",
                            f, h64, cls)
                continue
            seen_hashes.add(h64)
            records.append(SampleRecord(path=str(f.relative_to(root)),
                                        label_index=idx, content_hash=h64))
            count += 1
        if count == 0:
            log.warning("class %r has no usable images", cls)

    return CorpusManifest(labels=labels, records=records, root=root)


# -- split ---------------------------------------------------------------------

def largest_remainder_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer partition of n by ratios: floors first, remainders largest-first."""
    floors = [int(n * r) for r in ratios]
    remainder = n - sum(floors)
    fracs = sorted(range(len(ratios)), key=lambda i: (-(n * ratios[i] - floors[i]), i))
    for i in range(remainder):
        floors[fracs[i]] += 1
    return floors


def stratified_split(manifest: CorpusManifest,
                     ratios: tuple[float, float, float],
                     seed: int) -> CorpusManifest:
    """Assign train/val/test per class: seeded shuffle, largest-remainder counts.

    Every class must end up with at least one record in every split, else the
    split fails naming the class.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ConfigurationError(f"ratios must be three non-negative values summing "
                                 f"to 1, got {ratios}")
    rng = np.random.Generator(np.random.PCG64(seed))
    new_records: list[SampleRecord] = []
    for idx, cls in enumerate(manifest.labels.names()):
        recs = manifest.class_records(idx)
        if len(recs) < 3:
            raise SplitError(f"class {cls!r} has {len(recs)} images, need >= 3 to split")
        order = rng.permutation(len(recs))
        counts = largest_remainder_counts(len(recs), ratios)
        if min(counts) < 1:
            raise SplitError(
                f"class {cls!r}: ratios {ratios} leave an empty split "
                f"for {len(recs)} images (counts {counts})")
        assigned = []
        pos = 0
        for split_name, cnt in zip(SPLITS, counts):
            for j in order[pos:pos + cnt]:
                r = recs[j]
                assigned.append(SampleRecord(r.path, r.label_index, split_name,
                                             r.content_hash))
            pos += cnt
        # keep records in original scan order within the class
        by_path = {r.path: r for r in assigned}
        new_records.extend(by_path[r.path] for r in recs)

    return CorpusManifest(labels=manifest.labels, records=new_records,
                          ratios=tuple(ratios), seed=seed, root=manifest.root)


# -- manifest JSONL ------------------------------------------------------------

def write_manifest(manifest: CorpusManifest, path) -> None:
    """Header line (label map, ratios, seed) then one record per line."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "labels": [[n, c] for n, c in manifest.labels.entries],
            "ratios": list(manifest.ratios) if manifest.ratios else None,
            "seed": manifest.seed,
        }
        fh.write(json.dumps(header) + "\n")
        for r in manifest.records:
            fh.write(json.dumps({
                "path": r.path,
                "label_index": r.label_index,
                "split": r.split,
                "hash": f"{r.content_hash:016x}",
            }) + "\n")


def read_manifest(path) -> CorpusManifest:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"manifest {path} is empty")
    try:
        header = json.loads(lines[0])
        labels = LabelMap(tuple((n, c) for n, c in header["labels"]))
        ratios = tuple(header["ratios"]) if header.get("ratios") else None
        seed = header.get("seed")
        records = []
        for ln in lines[1:]:
            obj = json.loads(ln)
            records.append(SampleRecord(
                path=obj["path"],
                label_index=int(obj["label_index"]),
                split=obj.get("split"),
                content_hash=int(obj["hash"], 16),
            ))
    except (KeyError, ValueError, TypeError) as e:
        raise DataError(f"malformed manifest {path}: {e}") from e
    for r in records:
        if not 0 <= r.label_index < len(labels):
            raise DataError(f"manifest record {r.path!r} has label {r.label_index} "
                            f"outside the {len(labels)}-class label map")
    return CorpusManifest(labels=labels, records=records, ratios=ratios,
                          seed=seed, root=path.parent)


# -- batch loading --------------------------------------------------------------

def load_image_tensor(path, input_size: int) -> np.ndarray:
    """Decode one image to a (3, S, S) float32 array in [-1, 1].

    Center-crop to square, bilinear resize, scale to [0,1], then map through
    (x - 0.5) / 0.5. Channel order RGB.
    """
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            w, h = img.size
            side = min(w, h)
            left = (w - side) // 2
            top = (h - side) // 2
            img = img.crop((left, top, left + side, top + side))
            img = img.resize((input_size, input_size), Image.Resampling.BILINEAR)
            arr = np.asarray(img, dtype=np.float32)
    except (UnidentifiedImageError, OSError) as e:
        raise LoadError(f"cannot load image {path}: {e}", path=path) from e
    arr = arr / 255.0
    arr = (arr - 0.5) / 0.5
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_batch(manifest: CorpusManifest, records: Sequence[SampleRecord],
               input_size: int) -> tuple[Tensor, list[int]]:
    """Decode the given records into an (N,3,S,S) tensor plus label list."""
    if not records:
        raise UsageErrorPlaceholder  # replaced below; see load_batch guard
    root = manifest.root or Path(".")
    images = np.empty((len(records), 3, input_size, input_size), dtype=np.float32)
    labels = []
    for i, r in enumerate(records):
        images[i] = load_image_tensor(root / r.path, input_size)
        labels.append(r.label_index)
    return Tensor(images), labels
