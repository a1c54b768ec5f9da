"""
Filtered link-prediction evaluation.

For every triple of a split the model ranks all N entities for the missing
tail and, depending on the direction, the missing head. Other known answers
(from train, valid and test) are removed from the candidate pool before
ranking. Ranks are reduced to MRR, mean rank and Hits@{1,3,10}, overall, per
direction and per relation category.
"""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from tabulate import tabulate

from .data import CATEGORIES, SPLITS, build_label_index, classify_relations, prepare_store
from .errors import ShapeError
from .model import forward

logger = logging.getLogger("acre.evaluation")

TIE_POLICIES = ("mean", "optimistic", "pessimistic")
DIRECTIONS = ("head", "tail", "both")
HITS_AT = (1, 3, 10)
METRICS_SCHEMA = "acre.metrics/1"
# floats held per relation when scoring candidate heads directly
DIRECT_TABLE_BUDGET = 2 ** 24


def _rank_rows(scores, gold, known, tie_policy):
    """Ranks of gold[i] within scores[i], ignoring known[i] (a bool mask)."""
    rows = np.arange(len(gold))
    excluded = known.copy()
    excluded[rows, gold] = True
    gold_scores = scores[rows, gold][:, None]
    candidates = ~excluded
    higher = np.count_nonzero((scores > gold_scores) & candidates, axis=1)
    ties = np.count_nonzero((scores == gold_scores) & candidates, axis=1)
    if tie_policy == "mean":
        return 1.0 + higher + ties / 2.0
    if tie_policy == "optimistic":
        return 1.0 + higher
    if tie_policy == "pessimistic":
        return 1.0 + higher + ties
    raise ValueError(f"tie_policy must be one of {TIE_POLICIES}, got {tie_policy!r}")


def filtered_rank(scores, gold, known=(), tie_policy="mean"):
    """
    Rank of the gold entity among candidates not in known.

    Equal scores are resolved by the tie policy: "mean" places the gold in
    the middle of its tie group, "optimistic" first, "pessimistic" last.

    Args:
        scores (array-like): [N] scores, higher is better
        gold (int): gold entity id
        known (iterable): ids to filter out; may contain gold
        tie_policy (str): "mean", "optimistic" or "pessimistic"

    Returns:
        float: rank in [1, N]; a whole number except for "mean" with an odd
        tie count

    Raises:
        ValueError: if gold is out of range
    """
    scores = np.asarray(getattr(scores, "data", scores), dtype=float).reshape(1, -1)
    n = scores.shape[1]
    if not 0 <= gold < n:
        raise ValueError(f"gold id {gold} is out of range [0, {n})")
    mask = np.zeros_like(scores, dtype=bool)
    ids = list(known)
    if ids:
        mask[0, ids] = True
    return float(_rank_rows(scores, np.array([gold]), mask, tie_policy)[0])


class FilterIndex:
    """Known answers over all splits, for tail queries and direct head queries."""

    def __init__(self, store):
        self.tail = build_label_index(store, SPLITS, "tail")
        self._store = store
        self._head = None

    @property
    def head(self):
        if self._head is None:
            self._head = build_label_index(self._store, SPLITS, "head")
        return self._head


@dataclass(frozen=True)
class RankEntry:
    """
    Filtered rank of one gold entity.

    For a tail query `entity` is the head and `gold` the tail; for a head
    query `entity` is the tail and `gold` the head. `relation` is always the
    original relation id.
    """

    direction: str
    entity: int
    relation: int
    gold: int
    rank: float


@dataclass(frozen=True)
class MetricReport:
    """
    Rank statistics of a set of queries.

    Attributes:
        mrr (float): mean reciprocal rank
        hits (dict): k -> fraction of ranks <= k
        mean_rank (float): mean rank
        count (int): number of ranked queries
        by_direction (dict): "head"/"tail" -> MetricReport
        entries (tuple): the RankEntries behind the report, when kept
    """

    mrr: float
    hits: dict
    mean_rank: float
    count: int
    by_direction: dict = field(default_factory=dict)
    entries: tuple = field(default=(), repr=False, compare=False)

    @classmethod
    def from_ranks(cls, ranks, hits_at=HITS_AT):
        ranks = np.asarray(ranks, dtype=float)
        if ranks.size == 0:
            raise ValueError("cannot build a report from zero ranks")
        return cls(
            mrr=float(np.mean(1.0 / ranks)),
            hits={k: float(np.mean(ranks <= k)) for k in hits_at},
            mean_rank=float(np.mean(ranks)),
            count=int(ranks.size),
        )

    @classmethod
    def from_entries(cls, entries):
        entries = tuple(entries)
        overall = cls.from_ranks([e.rank for e in entries])
        by_direction = {}
        for direction in ("head", "tail"):
            ranks = [e.rank for e in entries if e.direction == direction]
            if ranks:
                by_direction[direction] = cls.from_ranks(ranks)
        return cls(overall.mrr, overall.hits, overall.mean_rank, overall.count, by_direction, entries)

    def to_record(self, **extra):
        """Flat JSON-serializable record in the metrics schema."""
        record = {"schema": METRICS_SCHEMA, **extra, "mrr": self.mrr}
        record.update({f"hits@{k}": v for k, v in sorted(self.hits.items())})
        record.update({"mean_rank": self.mean_rank, "count": self.count})
        return record

    def records(self, **extra):
        """One record for the pooled ranks plus one per direction."""
        default = "both" if len(self.by_direction) > 1 else next(iter(self.by_direction), None)
        direction = extra.pop("direction", default)
        rows = [self.to_record(direction=direction, **extra)]
        if len(self.by_direction) > 1:
            rows += [sub.to_record(direction=name, **extra) for name, sub in self.by_direction.items()]
        return rows

    def to_frame(self):
        rows = []
        for record in self.records():
            rows.append({
                "direction": record["direction"],
                "MRR": record["mrr"],
                **{f"H@{k}": record[f"hits@{k}"] for k in sorted(self.hits)},
                "MR": record["mean_rank"],
                "count": record["count"],
            })
        return pd.DataFrame(rows)


class _RankAccumulator:
    """Streaming reducer; order of add() calls does not matter."""

    def __init__(self, hits_at=HITS_AT):
        self.hits_at = hits_at
        self.reciprocal_sum = 0.0
        self.rank_sum = 0.0
        self.hit_counts = {k: 0 for k in hits_at}
        self.count = 0

    def add(self, ranks):
        ranks = np.asarray(ranks, dtype=float)
        self.reciprocal_sum += float(np.sum(1.0 / ranks))
        self.rank_sum += float(np.sum(ranks))
        for k in self.hits_at:
            self.hit_counts[k] += int(np.count_nonzero(ranks <= k))
        self.count += ranks.size

    def report(self, by_direction=None, entries=()):
        if self.count == 0:
            raise ValueError("cannot build a report from zero ranks")
        return MetricReport(
            mrr=self.reciprocal_sum / self.count,
            hits={k: self.hit_counts[k] / self.count for k in self.hits_at},
            mean_rank=self.rank_sum / self.count,
            count=self.count,
            by_direction=by_direction or {},
            entries=tuple(entries),
        )


def _known_mask(queries, index, num_entities, filtered):
    mask = np.zeros((len(queries), num_entities), dtype=bool)
    if filtered:
        for row, (entity, relation) in enumerate(queries.tolist()):
            answers = index.get(entity, relation)
            if answers:
                mask[row, list(answers)] = True
    return mask


def _score_queries(params, entities, relations, batch_size):
    cfg = params.config
    for start in range(0, len(entities), batch_size):
        stop = start + batch_size
        yield start, forward(entities[start:stop], relations[start:stop], params, cfg, train=False).data


def _tail_style_ranks(params, queries, gold, index, batch_size, filtered, tie_policy):
    ranks = np.empty(len(queries))
    for start, scores in _score_queries(params, queries[:, 0], queries[:, 1], batch_size):
        stop = start + len(scores)
        known = _known_mask(queries[start:stop], index, params.num_entities, filtered)
        ranks[start:stop] = _rank_rows(scores, gold[start:stop], known, tie_policy)
    return ranks


def _direct_head_ranks(params, triples, index, batch_size, filtered, tie_policy, table_budget=None):
    """
    Score every candidate head for (?, r, t), one relation at a time.

    Only the tail columns a split asks about are kept, in chunks of at most
    table_budget // N columns; each chunk rescores all candidate heads.
    """
    n = params.num_entities
    ranks = np.empty(len(triples))
    candidates = np.arange(n, dtype=np.int64)
    width = max(1, (table_budget or DIRECT_TABLE_BUDGET) // n)
    for relation in np.unique(triples[:, 1]):
        rows = np.flatnonzero(triples[:, 1] == relation)
        needed = np.unique(triples[rows, 2])
        for first in range(0, len(needed), width):
            columns = needed[first:first + width]
            table = None
            for start, scores in _score_queries(params, candidates, np.full(n, relation), batch_size):
                if table is None:
                    table = np.empty((n, len(columns)), dtype=scores.dtype)
                table[start:start + len(scores)] = scores[:, columns]
            chunk_rows = rows[np.isin(triples[rows, 2], columns)]
            tails = triples[chunk_rows, 2]
            scores = table[:, np.searchsorted(columns, tails)].T
            queries = np.stack([tails, np.full(len(chunk_rows), relation)], axis=1)
            known = _known_mask(queries, index, n, filtered)
            ranks[chunk_rows] = _rank_rows(scores, triples[chunk_rows, 0], known, tie_policy)
    return ranks


def evaluate(model, store, split="test", direction="both", head_mode=None, tie_policy="mean",
             filtered=True, filters=None, batch_size=256):
    """
    Rank every triple of a split and reduce the ranks to a MetricReport.

    In "reciprocal" head mode a head query (?, r, t) is answered as the tail
    query (t, r_inv, ?); in "direct" mode every entity is scored as a
    candidate head. "both" pools head and tail ranks into one list.

    Args:
        model (Checkpoint or ModelParams): trained model
        store (TripleStore): dataset the model was trained on
        split (str): "train", "valid" or "test"
        direction (str): "head", "tail" or "both"
        head_mode (str, optional): defaults to the checkpoint's mode, else to
            "reciprocal" when the store carries inverse relations
        tie_policy (str): rank convention for equal scores
        filtered (bool): remove other known answers before ranking
        filters (FilterIndex, optional): reused across calls during training
        batch_size (int): queries per forward pass

    Returns:
        MetricReport: with by_direction and entries filled in

    Raises:
        ValueError: on an empty split or unknown direction/tie policy
        ShapeError: if the model was trained on a different vocabulary
    """
    params = getattr(model, "params", model)
    if head_mode is None:
        train_config = getattr(model, "train_config", None)
        head_mode = train_config.head_mode if train_config else ("reciprocal" if store.reciprocal else "direct")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if tie_policy not in TIE_POLICIES:
        raise ValueError(f"tie_policy must be one of {TIE_POLICIES}, got {tie_policy!r}")
    store = prepare_store(store, head_mode)
    if (store.num_entities, store.num_relations) != (params.num_entities, params.num_relations):
        raise ShapeError(
            f"model has {params.num_entities} entities / {params.num_relations} relations, "
            f"dataset has {store.num_entities} / {store.num_relations}"
        )

    triples = store.original_triples(split)
    if not len(triples):
        raise ValueError(f"the {split} split is empty")
    filters = filters or FilterIndex(store)

    directions = ("head", "tail") if direction == "both" else (direction,)
    pooled = _RankAccumulator()
    by_direction, entries = {}, []
    for side in directions:
        if side == "tail":
            ranks = _tail_style_ranks(
                params, triples[:, :2], triples[:, 2], filters.tail, batch_size, filtered, tie_policy
            )
            query_entities = triples[:, 0]
        elif head_mode == "reciprocal":
            queries = np.stack([triples[:, 2], triples[:, 1] + store.num_original_relations], axis=1)
            ranks = _tail_style_ranks(params, queries, triples[:, 0], filters.tail, batch_size, filtered, tie_policy)
            query_entities = triples[:, 2]
        else:
            ranks = _direct_head_ranks(params, triples, filters.head, batch_size, filtered, tie_policy)
            query_entities = triples[:, 2]

        side_acc = _RankAccumulator()
        side_acc.add(ranks)
        pooled.add(ranks)
        gold = triples[:, 0] if side == "head" else triples[:, 2]
        side_entries = [
            RankEntry(side, int(e), int(r), int(g), float(k))
            for e, r, g, k in zip(query_entities, triples[:, 1], gold, ranks)
        ]
        by_direction[side] = side_acc.report(entries=side_entries)
        entries.extend(side_entries)

    report = pooled.report(by_direction, entries)
    setting = "filtered" if filtered else "raw"
    logger.info(f"{split} ({direction}, {setting}): MRR {report.mrr:.4f}, H@10 {report.hits[10]:.4f}, n={report.count}")
    return report


def category_report(model, store, split="test", threshold=1.5, report=None, **evaluate_kwargs):
    """
    Hits@10 per relation category and direction.

    A (direction, category) cell with no triples is absent from the result
    rather than reported as zero. Relations without training triples have no
    category and are left out.

    Args:
        model (Checkpoint or ModelParams): trained model
        store (TripleStore): dataset
        split (str): split to rank
        threshold (float): one/many cut-off for classify_relations
        report (MetricReport, optional): reuse the entries of an earlier
            evaluate() over both directions

    Returns:
        dict: direction -> {category: {"hits@10": float, "count": int}}
    """
    if report is None:
        report = evaluate(model, store, split, "both", **evaluate_kwargs)
    categories = classify_relations(store, threshold)
    groups = {}
    skipped = 0
    for entry in report.entries:
        category = categories.get(entry.relation)
        if category is None:
            skipped += 1
            continue
        groups.setdefault((entry.direction, category), []).append(entry.rank)
    if skipped:
        logger.warning(f"{skipped} ranked queries have a relation without a category")

    cells = {}
    for (direction, category), ranks in groups.items():
        ranks = np.asarray(ranks)
        cells.setdefault(direction, {})[category] = {
            "hits@10": float(np.mean(ranks <= 10)),
            "count": int(ranks.size),
        }
    return {d: {c: cells[d][c] for c in CATEGORIES if c in cells[d]} for d in ("head", "tail") if d in cells}


def category_frame(cells):
    """Direction x category table of Hits@10 in percent; absent cells stay empty."""
    rows = []
    for direction in ("head", "tail"):
        row = {"direction": direction}
        for category in CATEGORIES:
            cell = cells.get(direction, {}).get(category)
            row[category] = round(100.0 * cell["hits@10"], 1) if cell else None
        rows.append(row)
    return pd.DataFrame(rows)


def format_table(frame, floatfmt=".4f"):
    """Render a DataFrame as an aligned pipe table."""
    return tabulate(frame, headers="keys", tablefmt="pipe", showindex=False, floatfmt=floatfmt, missingval="-")


def write_records(path, records):
    """Append records as JSON lines."""
    with open(path, "a", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def dump_ranks(report, path, vocab=None):
    """
    Write one CSV row per ranked query for error analysis.

    Args:
        report (MetricReport): report with entries
        path (str): CSV destination
        vocab (Vocabulary, optional): adds entity and relation names
    """
    frame = pd.DataFrame([asdict(e) for e in report.entries], columns=["direction", "entity", "relation", "gold", "rank"])
    if vocab is not None:
        frame["entity_name"] = [vocab.entities[i] for i in frame["entity"]]
        frame["relation_name"] = [vocab.relations[i] for i in frame["relation"]]
        frame["gold_name"] = [vocab.entities[i] for i in frame["gold"]]
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} ranks to {path}")
    return frame
