"""
Knowledge-graph triple ingestion.

Reads train/valid/test triple files, assigns dense ids, adds reciprocal
relations, builds the (query -> answers) label index used for 1-N targets and
filtered ranking, and sorts relations into the 1-to-1 / 1-to-n / n-to-1 /
m-to-n categories.
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import TripleFormatError

logger = logging.getLogger("acre.data")

SPLITS = ("train", "valid", "test")
SPLIT_FILE_CANDIDATES = {
    "train": ("train.txt", "train.tsv", "train"),
    "valid": ("valid.txt", "valid.tsv", "valid", "dev.txt"),
    "test": ("test.txt", "test.tsv", "test"),
}

CACHE_FORMAT = "acre.triples"
CACHE_VERSION = 1

CATEGORIES = ("1-to-1", "1-to-n", "n-to-1", "m-to-n")
RECIPROCAL_SUFFIX = "_reverse"
HEAD_MODES = ("reciprocal", "direct")


@dataclass(frozen=True)
class Vocabulary:
    """Bijective name <-> id maps for entities and relations."""

    entities: tuple
    relations: tuple
    entity_to_id: dict = field(init=False, repr=False, compare=False)
    relation_to_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entity_to_id", {name: i for i, name in enumerate(self.entities)})
        object.__setattr__(self, "relation_to_id", {name: i for i, name in enumerate(self.relations)})
        if len(self.entity_to_id) != len(self.entities) or len(self.relation_to_id) != len(self.relations):
            raise ValueError("vocabulary names must be unique")

    @property
    def num_entities(self):
        return len(self.entities)

    @property
    def num_relations(self):
        return len(self.relations)

    def entity_id(self, name):
        return self.entity_to_id[name]

    def relation_id(self, name):
        return self.relation_to_id[name]


@dataclass(frozen=True)
class TripleStore:
    """
    Deduplicated id triples per split.

    Attributes:
        vocab (Vocabulary): id assignment
        splits (dict): split name -> int64 array [n, 3] of (head, relation, tail)
        source (str): where the triples came from
        reciprocal (bool): True once add_reciprocals has been applied
        num_original_relations (int): relation count before reciprocals
        unseen_entities (frozenset): entity ids that never occur in train
        duplicates (dict): split name -> number of dropped duplicate lines
    """

    vocab: Vocabulary
    splits: dict
    source: str = ""
    reciprocal: bool = False
    num_original_relations: int = 0
    unseen_entities: frozenset = frozenset()
    duplicates: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, triples in self.splits.items():
            triples.setflags(write=False)

    @property
    def num_entities(self):
        return self.vocab.num_entities

    @property
    def num_relations(self):
        return self.vocab.num_relations

    def split(self, name):
        return self.splits.get(name, np.empty((0, 3), dtype=np.int64))

    def original_triples(self, name):
        """Triples of a split without the reciprocal mirrors."""
        triples = self.split(name)
        if not self.reciprocal:
            return triples
        return triples[triples[:, 1] < self.num_original_relations]

    def stats(self):
        """Dataset statistics in the schema of the benchmark statistics table."""
        return {
            "entities": self.num_entities,
            "relations": self.num_original_relations,
            **{name: len(self.original_triples(name)) for name in SPLITS},
        }

    def stats_line(self):
        s = self.stats()
        return f"E={s['entities']} R={s['relations']} train={s['train']} valid={s['valid']} test={s['test']}"


def read_triples_file(path):
    """
    Parse a `head relation tail` file (tab or whitespace separated, UTF-8).

    Args:
        path (str): file path

    Returns:
        list: (head, relation, tail) name tuples in file order

    Raises:
        TripleFormatError: if the file is empty or a line has other than 3 columns
    """
    triples = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            columns = stripped.split("\t") if "\t" in stripped else stripped.split()
            columns = [c.strip() for c in columns]
            if len(columns) != 3 or not all(columns):
                raise TripleFormatError(path, f"expected 3 columns, found {len(columns)}", line_number)
            triples.append(tuple(columns))
    if not triples:
        raise TripleFormatError(path, "file is empty")
    return triples


def find_split_file(dataset_dir, split):
    for candidate in SPLIT_FILE_CANDIDATES[split]:
        path = os.path.join(dataset_dir, candidate)
        if os.path.isfile(path):
            return path
    raise FileNotFoundError(
        f"missing {split} file in {dataset_dir} (looked for {', '.join(SPLIT_FILE_CANDIDATES[split])})"
    )


def _dedupe(named_triples):
    seen = set()
    unique = []
    for triple in named_triples:
        if triple not in seen:
            seen.add(triple)
            unique.append(triple)
    return unique, len(named_triples) - len(unique)


def build_vocabulary(named_splits):
    """Assign ids in first-appearance order over train, then valid, then test."""
    entities, relations = {}, {}
    for split in SPLITS:
        for h, r, t in named_splits.get(split, []):
            entities.setdefault(h, len(entities))
            relations.setdefault(r, len(relations))
            entities.setdefault(t, len(entities))
    return Vocabulary(tuple(entities), tuple(relations))


def load_triples(path, vocab=None):
    """
    Load a dataset directory (train/valid/test files) or a single triple file.

    A single file is loaded as the train split. When no vocabulary is given it
    is built in first-appearance order; entities seen only in valid/test are
    kept and flagged in `unseen_entities`.

    Args:
        path (str): dataset directory or triple file
        vocab (Vocabulary, optional): fixed id assignment to reuse

    Returns:
        tuple: (TripleStore, Vocabulary)

    Raises:
        TripleFormatError: on a malformed or empty file
        FileNotFoundError: if a split file is missing
        KeyError: if a name is absent from the given vocabulary
    """
    if os.path.isdir(path):
        split_paths = {split: find_split_file(path, split) for split in SPLITS}
    else:
        split_paths = {"train": path}

    named_splits, duplicates = {}, {}
    for split, split_path in split_paths.items():
        unique, dropped = _dedupe(read_triples_file(split_path))
        named_splits[split] = unique
        duplicates[split] = dropped
        if dropped:
            logger.info(f"Dropped {dropped} duplicate triples from {split_path}")

    if vocab is None:
        vocab = build_vocabulary(named_splits)

    splits = {}
    for split, named in named_splits.items():
        try:
            ids = [(vocab.entity_to_id[h], vocab.relation_to_id[r], vocab.entity_to_id[t]) for h, r, t in named]
        except KeyError as e:
            raise KeyError(f"name {e.args[0]!r} in {split} split is not in the vocabulary") from None
        splits[split] = np.array(ids, dtype=np.int64).reshape(-1, 3)

    train = splits.get("train", np.empty((0, 3), dtype=np.int64))
    seen = set(train[:, 0].tolist()) | set(train[:, 2].tolist())
    unseen = frozenset(i for i in range(vocab.num_entities) if i not in seen)
    if unseen:
        logger.warning(f"{len(unseen)} entities appear only outside the train split; their embeddings stay untrained")

    store = TripleStore(
        vocab=vocab,
        splits=splits,
        source=str(path),
        reciprocal=False,
        num_original_relations=vocab.num_relations,
        unseen_entities=unseen,
        duplicates=duplicates,
    )
    logger.info(f"Loaded {path}: {store.stats_line()}")
    return store, vocab


def mirror(triples, num_original_relations):
    """Map (h, r, t) to (t, r_inv, h) and back; r_inv = r + R_orig."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    relations = triples[:, 1]
    flipped = np.where(relations < num_original_relations,
                       relations + num_original_relations,
                       relations - num_original_relations)
    return np.stack([triples[:, 2], flipped, triples[:, 0]], axis=1)


def add_reciprocals(store):
    """
    Add an inverse relation r + R for every relation r and mirror every triple.

    Raises:
        ValueError: if the store already carries reciprocals
    """
    if store.reciprocal:
        raise ValueError("reciprocal relations were already added to this store")
    r_orig = store.num_relations
    relations = store.vocab.relations + tuple(f"{name}{RECIPROCAL_SUFFIX}" for name in store.vocab.relations)
    vocab = Vocabulary(store.vocab.entities, relations)
    splits = {
        name: np.concatenate([triples, mirror(triples, r_orig)], axis=0)
        for name, triples in store.splits.items()
    }
    return TripleStore(
        vocab=vocab,
        splits=splits,
        source=store.source,
        reciprocal=True,
        num_original_relations=r_orig,
        unseen_entities=store.unseen_entities,
        duplicates=dict(store.duplicates),
    )


def prepare_store(store, head_mode):
    """
    Bring a store into the shape a head-prediction mode expects.

    "reciprocal" needs the inverse relations (they are added when missing);
    "direct" needs a store without them.
    """
    if head_mode not in HEAD_MODES:
        raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {head_mode!r}")
    if head_mode == "reciprocal":
        return store if store.reciprocal else add_reciprocals(store)
    if store.reciprocal:
        raise ValueError("direct head prediction needs a store without reciprocal relations")
    return store


class LabelIndex:
    """
    Exact map from a query (entity, relation) to the set of answer entities.

    For direction "tail" the key is (head, relation) and the answers are
    tails; for direction "head" the key is (tail, relation) and the answers
    are heads.
    """

    def __init__(self, answers, direction="tail", splits=()):
        self._answers = answers
        self.direction = direction
        self.splits = tuple(splits)

    def __getitem__(self, query):
        return self._answers.get((int(query[0]), int(query[1])), frozenset())

    def get(self, entity, relation):
        return self[(entity, relation)]

    def __contains__(self, query):
        return (int(query[0]), int(query[1])) in self._answers

    def __len__(self):
        return len(self._answers)

    def queries(self):
        """All queries as a sorted int64 array [n, 2]."""
        return np.array(sorted(self._answers), dtype=np.int64).reshape(-1, 2)

    def multi_hot(self, queries, num_entities, dtype=np.float64):
        """Label rows [len(queries), num_entities] with ones at the answers."""
        labels = np.zeros((len(queries), num_entities), dtype=dtype)
        for row, (entity, relation) in enumerate(queries):
            answers = self._answers.get((int(entity), int(relation)))
            if answers:
                labels[row, list(answers)] = 1.0
        return labels


def build_label_index(store, splits=("train",), direction="tail"):
    """
    Collect the answers of every query over a union of splits.

    Args:
        store (TripleStore): triples
        splits (iterable): split names to include
        direction (str): "tail" keys on (h, r); "head" keys on (t, r)

    Returns:
        LabelIndex
    """
    splits = tuple(splits)
    if not splits:
        raise ValueError("build_label_index needs at least one split")
    if direction not in ("tail", "head"):
        raise ValueError(f"direction must be 'tail' or 'head', got {direction!r}")
    answers = {}
    for split in splits:
        for h, r, t in store.split(split).tolist():
            key, answer = ((h, r), t) if direction == "tail" else ((t, r), h)
            answers.setdefault(key, set()).add(answer)
    return LabelIndex({k: frozenset(v) for k, v in answers.items()}, direction, splits)


@dataclass(frozen=True)
class RelationCategories:
    """Relation id -> category, plus relations without training triples."""

    categories: dict
    undefined: tuple
    table: pd.DataFrame = field(repr=False, compare=False, default=None)

    def __getitem__(self, relation):
        return self.categories[relation]

    def get(self, relation, default=None):
        return self.categories.get(relation, default)

    def share_of_triples(self, store):
        """Fraction of (original) train triples per category."""
        train = store.original_triples("train")
        counts = {c: 0 for c in CATEGORIES}
        for r in train[:, 1].tolist():
            category = self.categories.get(r)
            if category is not None:
                counts[category] += 1
        total = max(len(train), 1)
        return {c: n / total for c, n in counts.items()}


def classify_relations(store, threshold=1.5):
    """
    Sort the original relations into 1-to-1 / 1-to-n / n-to-1 / m-to-n.

    For every relation, hpt is the mean number of tails per (head, relation)
    and tph the mean number of heads per (tail, relation), both over train.
    A side counts as "many" when its mean exceeds the threshold.

    Args:
        store (TripleStore): triples; reciprocal mirrors are ignored
        threshold (float): cut-off between "one" and "many"

    Returns:
        RelationCategories
    """
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    train = pd.DataFrame(store.original_triples("train"), columns=["head", "relation", "tail"])
    tails_per_head = train.groupby(["relation", "head"])["tail"].nunique().groupby(level="relation").mean()
    heads_per_tail = train.groupby(["relation", "tail"])["head"].nunique().groupby(level="relation").mean()
    table = pd.DataFrame({"hpt": tails_per_head, "tph": heads_per_tail})

    def _category(row):
        many_tails = row["hpt"] > threshold
        many_heads = row["tph"] > threshold
        if many_tails and many_heads:
            return "m-to-n"
        if many_tails:
            return "1-to-n"
        if many_heads:
            return "n-to-1"
        return "1-to-1"

    table["category"] = table.apply(_category, axis=1) if len(table) else pd.Series(dtype=object)
    categories = {int(r): c for r, c in table["category"].items()}
    undefined = tuple(r for r in range(store.num_original_relations) if r not in categories)
    if undefined:
        logger.warning(f"{len(undefined)} relations have no training triples; their category is undefined")
    return RelationCategories(categories, undefined, table)


def save_cache(store, path):
    """
    Write vocabulary and id triples as a versioned JSON cache.

    The output is byte-identical for identical stores.
    """
    payload = {
        "format": CACHE_FORMAT,
        "version": CACHE_VERSION,
        "source": store.source,
        "reciprocal": store.reciprocal,
        "num_original_relations": store.num_original_relations,
        "entities": list(store.vocab.entities),
        "relations": list(store.vocab.relations),
        "unseen_entities": sorted(store.unseen_entities),
        "duplicates": {k: int(v) for k, v in sorted(store.duplicates.items())},
        "splits": {name: store.splits[name].tolist() for name in sorted(store.splits)},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        f.write("\n")
    logger.info(f"Wrote triple cache: {path}")


def load_cache(path):
    """
    Read a cache written by save_cache.

    Raises:
        TripleFormatError: if the file is not a supported cache
    """
    with open(path, "r", encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise TripleFormatError(path, f"not a JSON cache: {e}") from None
    if payload.get("format") != CACHE_FORMAT or payload.get("version") != CACHE_VERSION:
        raise TripleFormatError(
            path, f"unsupported cache format {payload.get('format')!r} version {payload.get('version')!r}"
        )
    vocab = Vocabulary(tuple(payload["entities"]), tuple(payload["relations"]))
    splits = {name: np.array(rows, dtype=np.int64).reshape(-1, 3) for name, rows in payload["splits"].items()}
    return TripleStore(
        vocab=vocab,
        splits=splits,
        source=payload.get("source", str(path)),
        reciprocal=payload["reciprocal"],
        num_original_relations=payload["num_original_relations"],
        unseen_entities=frozenset(payload["unseen_entities"]),
        duplicates=payload.get("duplicates", {}),
    )


def load_store(path):
    """Load either a JSON cache file or a raw dataset directory/file."""
    if os.path.isfile(path) and path.endswith(".json"):
        return load_cache(path)
    store, _ = load_triples(path)
    return store
