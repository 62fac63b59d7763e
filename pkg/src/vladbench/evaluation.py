"""Retrieval ground truth and mean average precision.

Two AP variants are implemented over junk-aware ranked lists:

* ``discrete`` (the default): junk ids are removed from the ranked list
  (later ranks close up), then AP = (1/|P|) * sum over hit ranks r of
  (hits_so_far / r).  Positives never retrieved contribute zero.
* ``trapezoid``: the interpolated variant used by the classic landmark
  benchmark scripts; junk is skipped in place and each hit adds the
  trapezoid between the previous and current precision, starting from
  precision 1 at recall 0.

Both variants are invariant to where junk ids appear in the ranking.

Ground truth sources:

* Landmark-style directories of ``*_query.txt`` / ``_good.txt`` / ``_ok.txt``
  / ``_junk.txt`` files: positives are good+ok, junk stays junk, and the
  query's own image is treated as junk (it stays in the database).
* Group datasets (one query per group of near-duplicates): explicit groups
  from the manifest's ground truth file, or groups derived from the
  id-div-100 naming convention.  The query is the group's first image and is
  excluded from its own database scan.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, load_ground_truth_groups
from .errors import FormatError, ZeroPositivesError
from .retrieval import RetrievalIndex, query_by_id

AP_VARIANTS = ("discrete", "trapezoid")


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Per-query relevance sets.

    ``positives[q]`` are the images that count as correct for query ``q``;
    ``junk[q]`` are ignored entirely (neither correct nor incorrect).
    ``exclude_self`` says whether the query's own database entry must be
    dropped before ranking (group protocols) rather than junked (landmark
    protocol, where the query is a crop and its source image is junk).
    """

    queries: tuple[str, ...]
    positives: dict[str, frozenset[str]]
    junk: dict[str, frozenset[str]]
    exclude_self: bool

    def __post_init__(self) -> None:
        if not self.queries:
            raise ValueError("ground truth must define at least one query")
        if len(set(self.queries)) != len(self.queries):
            raise ValueError("duplicate query ids in ground truth")
        for q in self.queries:
            if q not in self.positives or q not in self.junk:
                raise ValueError(f"query {q!r} missing positive or junk set")
            overlap = self.positives[q] & self.junk[q]
            if overlap:
                raise ValueError(
                    f"query {q!r}: ids marked both positive and junk: {sorted(overlap)}"
                )


def average_precision(
    ranked_ids: list[str] | tuple[str, ...],
    positives: frozenset[str] | set[str],
    junk: frozenset[str] | set[str] = frozenset(),
    *,
    variant: str = "discrete",
) -> float:
    """AP of one ranked list against one query's relevance sets."""
    if variant not in AP_VARIANTS:
        raise ValueError(f"variant must be one of {AP_VARIANTS}, got {variant!r}")
    if len(set(ranked_ids)) != len(ranked_ids):
        raise ValueError("ranked list contains duplicate ids")
    n_pos = len(set(positives) - set(junk))
    if n_pos == 0:
        raise ZeroPositivesError("query has no positives after junk removal")
    if variant == "discrete":
        hits = 0
        total = 0.0
        rank = 0
        for image_id in ranked_ids:
            if image_id in junk:
                continue
            rank += 1
            if image_id in positives:
                hits += 1
                total += hits / rank
        return total / n_pos
    # trapezoid: interpolated precision-recall area, junk skipped in place
    ap = 0.0
    old_recall = 0.0
    old_precision = 1.0
    hits = 0
    seen = 0
    for image_id in ranked_ids:
        if image_id in junk:
            continue
        seen += 1
        if image_id in positives:
            hits += 1
        recall = hits / n_pos
        precision = hits / seen
        ap += (recall - old_recall) * (old_precision + precision) / 2.0
        old_recall = recall
        old_precision = precision
    return ap


def mean_ap(per_query_ap: list[float]) -> float:
    if not per_query_ap:
        raise ValueError("mean_ap of an empty list is undefined")
    return float(np.mean(per_query_ap))


@dataclass(frozen=True, eq=False)
class EvaluationResult:
    mean_ap: float
    per_query: dict[str, float]
    skipped: tuple[str, ...]


def evaluate_index(
    index: RetrievalIndex,
    ground_truth: GroundTruth,
    *,
    variant: str = "discrete",
) -> EvaluationResult:
    """Run every ground-truth query against the index and average the APs.

    Queries with no positives are skipped with a warning on stderr; queries
    absent from the index are an error.
    """
    per_query: dict[str, float] = {}
    skipped: list[str] = []
    for q in ground_truth.queries:
        if q not in index:
            raise ValueError(f"query id {q!r} not present in the index")
        ranked = query_by_id(index, q, exclude_self=ground_truth.exclude_self)
        try:
            per_query[q] = average_precision(
                ranked.image_ids,
                ground_truth.positives[q],
                ground_truth.junk[q],
                variant=variant,
            )
        except ZeroPositivesError:
            print(
                f"warning: query {q} has no positives, skipping", file=sys.stderr
            )
            skipped.append(q)
    if not per_query:
        raise ZeroPositivesError("no query had positives; mAP undefined")
    return EvaluationResult(
        mean_ap=mean_ap(list(per_query.values())),
        per_query=per_query,
        skipped=tuple(skipped),
    )


def _read_id_lines(path: Path) -> list[str]:
    ids = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            ids.append(line)
    return ids


def load_oxford_ground_truth(gt_dir: str | Path) -> GroundTruth:
    """Parse a directory of landmark query/good/ok/junk text files.

    Each ``<name>_query.txt`` holds the query image id (with the ``oxc1_``
    prefix stripped) and a 4-float bounding box, which is validated and
    discarded since descriptors cover whole images.  Queries are ordered by
    file name.
    """
    gt_dir = Path(gt_dir)
    query_files = sorted(gt_dir.glob("*_query.txt"))
    if not query_files:
        raise FormatError(f"{gt_dir}: no *_query.txt files found")
    queries: list[str] = []
    positives: dict[str, frozenset[str]] = {}
    junk: dict[str, frozenset[str]] = {}
    for qfile in query_files:
        tokens = qfile.read_text(encoding="utf-8").split()
        if len(tokens) != 5:
            raise FormatError(
                f"{qfile}: expected 'image_id x1 y1 x2 y2', got {len(tokens)} fields"
            )
        image_id = tokens[0]
        if image_id.startswith("oxc1_"):
            image_id = image_id[len("oxc1_") :]
        try:
            [float(t) for t in tokens[1:]]
        except ValueError as exc:
            raise FormatError(f"{qfile}: non-numeric bounding box") from exc
        stem = qfile.name[: -len("_query.txt")]
        good = _read_id_lines(gt_dir / f"{stem}_good.txt")
        ok = _read_id_lines(gt_dir / f"{stem}_ok.txt")
        junk_ids = _read_id_lines(gt_dir / f"{stem}_junk.txt")
        if image_id in queries:
            raise FormatError(f"{gt_dir}: query image {image_id} appears twice")
        pos = frozenset(good) | frozenset(ok)
        jnk = (frozenset(junk_ids) | {image_id}) - pos
        queries.append(image_id)
        positives[image_id] = pos - {image_id}
        junk[image_id] = jnk
    return GroundTruth(
        queries=tuple(queries), positives=positives, junk=junk, exclude_self=False
    )


def load_holidays_ground_truth(manifest: DatasetManifest) -> GroundTruth:
    """Group ground truth for a manifest: explicit groups file, or ids/100.

    With no ground truth file, image ids must be integers and images sharing
    ``id // 100`` form a group; the numerically smallest id is the query.
    """
    gt_path = manifest.ground_truth_path()
    if gt_path is not None:
        groups = load_ground_truth_groups(gt_path)
    else:
        by_group: dict[int, list[str]] = {}
        for image_id in manifest.image_ids:
            try:
                numeric = int(image_id)
            except ValueError as exc:
                raise FormatError(
                    f"image id {image_id!r} is not numeric; group convention "
                    f"needs integer ids or an explicit ground truth file"
                ) from exc
            by_group.setdefault(numeric // 100, []).append(image_id)
        groups = [
            sorted(by_group[g], key=int) for g in sorted(by_group)
        ]
    known = set(manifest.image_ids)
    seen: set[str] = set()
    queries: list[str] = []
    positives: dict[str, frozenset[str]] = {}
    junk: dict[str, frozenset[str]] = {}
    for group in groups:
        for image_id in group:
            if image_id not in known:
                raise FormatError(f"ground truth id {image_id!r} not in manifest")
            if image_id in seen:
                raise FormatError(f"image id {image_id!r} appears in two groups")
            seen.add(image_id)
        q = group[0]
        queries.append(q)
        positives[q] = frozenset(group[1:])
        junk[q] = frozenset()
    return GroundTruth(
        queries=tuple(queries), positives=positives, junk=junk, exclude_self=True
    )
