import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd


STANDARD_COLUMNS = ("learner_id", "kc_id", "timestamp", "correct")
ANNOTATION_COLUMNS = ("source_kc", "target_kc", "relation", "rating", "expert")
RELATIONS = ("prerequisite", "similarity")


@dataclass(frozen=True)
class InteractionRecord:
    """One logged interaction: a learner answering an item tagged with a KC."""
    learner_id: str
    kc_id: str
    timestamp: float
    outcome: int

    def __post_init__(self):
        if self.outcome not in (0, 1):
            raise ValueError(f"invalid outcome {self.outcome} for learner {self.learner_id}")
        if not np.isfinite(self.timestamp):
            raise ValueError(f"non-finite timestamp for learner {self.learner_id}")


class InteractionHistory:
    """
    Time-ordered interactions of a single learner.

    Besides the records themselves the history keeps numpy views used by the
    numerical code: KC indices, timestamps and outcomes.

    Parameters:
        learner_id (str): Learner identifier.
        records (iterable): InteractionRecord objects, already sorted by time.
        kc_index (dict): Mapping kc_id -> index from the owning cohort.

    Raises:
        ValueError: If timestamps decrease or a KC is missing from kc_index.
    """

    def __init__(self, learner_id, records, kc_index):
        self.learner_id = learner_id
        self.records = tuple(records)
        self._kc_index = kc_index
        try:
            self.kcs = np.array([kc_index[r.kc_id] for r in self.records], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"unknown kc_id {e.args[0]!r} in history of {learner_id}")
        self.times = np.array([r.timestamp for r in self.records], dtype=float)
        self.outcomes = np.array([r.outcome for r in self.records], dtype=np.int64)
        if len(self.times) > 1 and np.any(np.diff(self.times) < 0):
            raise ValueError(f"timestamps of learner {learner_id} are not non-decreasing")

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, InteractionHistory):
            return NotImplemented
        return self.learner_id == other.learner_id and self.records == other.records

    def intervals(self, min_interval=0.0):
        """
        Returns tau_n = t_n - t_(n-1) in seconds, with tau_0 = 0.

        Intervals after the first step are clamped from below at min_interval,
        which keeps the OU kernel non-degenerate for simultaneous interactions.
        """
        tau = np.zeros(len(self.times))
        if len(self.times) > 1:
            tau[1:] = np.diff(self.times)
            n_clamped = int(np.sum(tau[1:] < min_interval))
            if n_clamped:
                logging.info(f"{self.learner_id}: {n_clamped} interval(s) clamped to {min_interval} s")
            tau[1:] = np.maximum(tau[1:], min_interval)
        return tau

    def slice(self, start, stop=None):
        return InteractionHistory(self.learner_id, self.records[start:stop], self._kc_index)

    def subset(self, positions):
        """Sub-history made of the records at the given (sorted) positions."""
        positions = sorted(positions)
        return InteractionHistory(self.learner_id, [self.records[p] for p in positions], self._kc_index)

    def append(self, record):
        if record.learner_id != self.learner_id:
            raise ValueError(f"record of {record.learner_id} appended to history of {self.learner_id}")
        return InteractionHistory(self.learner_id, self.records + (record,), self._kc_index)


class Cohort:
    """
    A set of learner histories sharing one frozen KC vocabulary.

    Parameters:
        histories (list): InteractionHistory objects with unique learner ids.
        kc_vocabulary (list): kc_id strings; position is the KC index.
    """

    def __init__(self, histories, kc_vocabulary):
        self.kc_vocabulary = tuple(kc_vocabulary)
        self.kc_index = {kc: idx for idx, kc in enumerate(self.kc_vocabulary)}
        if len(self.kc_index) != len(self.kc_vocabulary):
            raise ValueError("kc vocabulary contains duplicates")
        self.histories = list(histories)
        ids = [h.learner_id for h in self.histories]
        if len(set(ids)) != len(ids):
            raise ValueError("learner ids in a cohort must be unique")

    @property
    def n_kcs(self):
        return len(self.kc_vocabulary)

    def __len__(self):
        return len(self.histories)

    def __iter__(self):
        return iter(self.histories)

    def __eq__(self, other):
        if not isinstance(other, Cohort):
            return NotImplemented
        return self.kc_vocabulary == other.kc_vocabulary and self.histories == other.histories

    def index_of(self, kc_id):
        if kc_id not in self.kc_index:
            raise ValueError(f"unknown kc_id {kc_id!r}: the KC vocabulary is frozen after ingestion")
        return self.kc_index[kc_id]

    def history(self, learner_id):
        for h in self.histories:
            if h.learner_id == learner_id:
                return h
        raise ValueError(f"unknown learner {learner_id!r}")

    def make_history(self, learner_id, records):
        return InteractionHistory(learner_id, records, self.kc_index)

    def with_histories(self, histories):
        """New cohort over the same vocabulary."""
        return Cohort(histories, self.kc_vocabulary)

    def records(self):
        return [r for h in self.histories for r in h.records]


@dataclass(frozen=True)
class GraphAnnotation:
    source_kc: str
    target_kc: str
    relation: str
    ratings: tuple = ()
    expert: bool = False

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise ValueError(f"invalid relation {self.relation!r}")
        if not self.expert and not self.ratings:
            raise ValueError(f"crowd annotation {self.source_kc}->{self.target_kc} has no ratings")

    @property
    def mean_rating(self):
        return float(np.mean(self.ratings))


@dataclass
class SplitCohort:
    """
    Train/test split of a filtered cohort.

    train and test hold per-learner histories of exactly train_len and
    test_len records; remainder holds whatever follows (used by the
    continual protocol).
    """
    train: list
    test: list
    remainder: list
    kc_vocabulary: tuple
    n_dropped: int = 0
    kc_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.kc_index = {kc: idx for idx, kc in enumerate(self.kc_vocabulary)}

    @property
    def n_kcs(self):
        return len(self.kc_vocabulary)

    @property
    def learner_ids(self):
        return [h.learner_id for h in self.train]

    def train_cohort(self):
        return Cohort(self.train, self.kc_vocabulary)

    def full_history(self, position):
        """Train, test and remainder of one learner joined back together."""
        records = self.train[position].records + self.test[position].records + self.remainder[position].records
        return InteractionHistory(self.train[position].learner_id, records, self.kc_index)

    def select(self, positions):
        return SplitCohort(
            train=[self.train[p] for p in positions],
            test=[self.test[p] for p in positions],
            remainder=[self.remainder[p] for p in positions],
            kc_vocabulary=self.kc_vocabulary,
        )


def _resolve_columns(frame, schema, filename):
    schema = dict(schema or {})
    mapping = {}
    for name in STANDARD_COLUMNS:
        column = schema.get(name, name)
        if column not in frame.columns:
            raise ValueError(f"Missing column '{column}' (for {name}) in header of {filename}")
        mapping[column] = name
    return frame.rename(columns=mapping)[list(STANDARD_COLUMNS)]


def parse_interactions(filename, schema=None, timestamp_unit="seconds", kc_order="first_seen", vocabulary=None):
    """
    Reads an interaction CSV into a Cohort.

    Records are grouped by learner and sorted by timestamp with a stable
    tie-break on input position. Learner order and the first-seen KC order
    both follow the time-sorted stream, so permuting the input rows does not
    change the result.

    Parameters:
        filename (str): Path to the CSV file.
        schema (dict, optional): Maps standard names (learner_id, kc_id,
            timestamp, correct) to the column names used in the file.
        timestamp_unit (str): "seconds" or "milliseconds".
        kc_order (str): "first_seen" or "sorted" vocabulary order.
        vocabulary (list, optional): Fixed KC vocabulary; unseen KCs are errors.

    Returns:
        Cohort: The parsed cohort.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: On empty files, malformed rows or invalid outcomes.
    """
    if timestamp_unit not in ("seconds", "milliseconds"):
        raise ValueError(f"invalid timestamp_unit {timestamp_unit!r}")
    try:
        frame = pd.read_csv(filename, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        raise FileNotFoundError(f"File {filename} does not exist")
    except pd.errors.EmptyDataError:
        raise ValueError(f"{filename} is empty")
    except pd.errors.ParserError as e:
        raise ValueError(f"malformed row in {filename}: {e}")

    frame = _resolve_columns(frame, schema, filename)
    if frame.empty:
        raise ValueError(f"{filename} contains no interactions")

    # header is line 1
    frame["line"] = np.arange(len(frame)) + 2
    for name in STANDARD_COLUMNS:
        blank = frame[name].str.strip() == ""
        if blank.any():
            line = int(frame.loc[blank, "line"].iloc[0])
            raise ValueError(f"malformed row at line {line}: empty '{name}' field")

    timestamps = pd.to_numeric(frame["timestamp"], errors="coerce")
    bad = ~np.isfinite(timestamps.to_numpy(dtype=float, na_value=np.nan))
    if bad.any():
        line = int(frame.loc[bad, "line"].iloc[0])
        raise ValueError(f"malformed row at line {line}: invalid timestamp")
    outcomes = pd.to_numeric(frame["correct"], errors="coerce")
    bad = ~outcomes.isin([0, 1])
    if bad.any():
        line = int(frame.loc[bad, "line"].iloc[0])
        raise ValueError(f"invalid outcome at line {line}")

    frame["timestamp"] = timestamps.astype(float)
    if timestamp_unit == "milliseconds":
        frame["timestamp"] = frame["timestamp"] / 1000.0
    frame["correct"] = outcomes.astype(int)
    frame = frame.sort_values(["timestamp", "line"], kind="stable")

    if vocabulary is not None:
        unknown = ~frame["kc_id"].isin(set(vocabulary))
        if unknown.any():
            line = int(frame.loc[unknown, "line"].iloc[0])
            raise ValueError(f"unknown kc_id at line {line}: the KC vocabulary is frozen")
        kc_vocabulary = list(vocabulary)
    elif kc_order == "sorted":
        kc_vocabulary = sorted(frame["kc_id"].unique())
    elif kc_order == "first_seen":
        kc_vocabulary = list(pd.unique(frame["kc_id"]))
    else:
        raise ValueError(f"invalid kc_order {kc_order!r}")
    kc_index = {kc: idx for idx, kc in enumerate(kc_vocabulary)}

    histories = []
    for learner_id, group in frame.groupby("learner_id", sort=False):
        records = [
            InteractionRecord(learner_id, kc, float(t), int(y))
            for kc, t, y in zip(group["kc_id"], group["timestamp"], group["correct"])
        ]
        histories.append(InteractionHistory(learner_id, records, kc_index))

    logging.info(f"Parsed {len(frame)} interactions of {len(histories)} learners over {len(kc_vocabulary)} KCs from {filename}")
    return Cohort(histories, kc_vocabulary)


def write_interactions(cohort, filename):
    """Writes a cohort in the standard interaction CSV schema."""
    rows = [(r.learner_id, r.kc_id, r.timestamp, r.outcome) for r in cohort.records()]
    frame = pd.DataFrame(rows, columns=list(STANDARD_COLUMNS))
    frame.to_csv(filename, index=False)
    logging.info(f"Wrote {len(frame)} interactions to {filename}")


def _parse_flag(value, line):
    text = str(value).strip().lower()
    if text in ("1", "true", "yes"):
        return True
    if text in ("0", "false", "no", ""):
        return False
    raise ValueError(f"invalid expert flag at line {line}")


def parse_annotations(filename, cohort=None, schema=None):
    """
    Reads graph annotations; repeated (source, target, relation, expert)
    rows are aggregated into one GraphAnnotation holding all their ratings.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: On invalid ratings, relations or KCs unknown to the cohort.
    """
    try:
        frame = pd.read_csv(filename, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        raise FileNotFoundError(f"File {filename} does not exist")
    except pd.errors.EmptyDataError:
        raise ValueError(f"{filename} is empty")
    except pd.errors.ParserError as e:
        raise ValueError(f"malformed row in {filename}: {e}")

    schema = dict(schema or {})
    mapping = {}
    for name in ANNOTATION_COLUMNS:
        column = schema.get(name, name)
        if column not in frame.columns:
            raise ValueError(f"Missing column '{column}' (for {name}) in header of {filename}")
        mapping[column] = name
    frame = frame.rename(columns=mapping)

    grouped = {}
    for position, row in enumerate(frame.itertuples(index=False), start=2):
        source, target = row.source_kc.strip(), row.target_kc.strip()
        relation = row.relation.strip().lower()
        if relation not in RELATIONS:
            raise ValueError(f"invalid relation {relation!r} at line {position}")
        if cohort is not None:
            for kc in (source, target):
                if kc not in cohort.kc_index:
                    raise ValueError(f"unknown kc_id {kc!r} at line {position}")
        expert = _parse_flag(row.expert, position)
        key = (source, target, relation, expert)
        ratings = grouped.setdefault(key, [])
        if row.rating.strip():
            try:
                rating = float(row.rating)
            except ValueError:
                raise ValueError(f"invalid rating at line {position}")
            if not 1.0 <= rating <= 9.0:
                raise ValueError(f"rating {rating} outside [1, 9] at line {position}")
            ratings.append(rating)

    annotations = [
        GraphAnnotation(source, target, relation, tuple(ratings), expert)
        for (source, target, relation, expert), ratings in grouped.items()
    ]
    logging.info(f"Parsed {len(annotations)} annotated KC pairs from {filename}")
    return annotations


def filter_and_split(cohort, min_interactions, train_len, test_len):
    """
    Drops short histories and splits the rest into train and test windows.

    Learners with fewer than max(min_interactions, train_len + test_len)
    records are dropped. Each survivor contributes its first train_len
    records for training and the next test_len records for testing.

    Returns:
        SplitCohort: The split, with the drop count in n_dropped.

    Raises:
        ValueError: On invalid lengths or if no learner survives.
    """
    if train_len < 1 or test_len < 1:
        raise ValueError("train_len and test_len must both be at least 1")
    threshold = max(min_interactions, train_len + test_len)
    kept = [h for h in cohort if len(h) >= threshold]
    n_dropped = len(cohort) - len(kept)
    logging.info(f"filter_and_split: kept {len(kept)} learners, dropped {n_dropped} with fewer than {threshold} records")
    if not kept:
        raise ValueError(f"no learner has at least {threshold} interactions")
    return SplitCohort(
        train=[h.slice(0, train_len) for h in kept],
        test=[h.slice(train_len, train_len + test_len) for h in kept],
        remainder=[h.slice(train_len + test_len) for h in kept],
        kc_vocabulary=cohort.kc_vocabulary,
        n_dropped=n_dropped,
    )


def validation_split(split, fraction, seed):
    """
    Holds out a fraction of learners (at least one learner stays in each part).

    Returns:
        tuple: (SplitCohort used for fitting, SplitCohort of held-out learners)
    """
    n_learners = len(split.train)
    if n_learners < 2:
        raise ValueError("validation_split needs at least two learners")
    n_held = int(round(fraction * n_learners))
    n_held = min(max(n_held, 1), n_learners - 1)
    order = np.random.default_rng(seed).permutation(n_learners)
    held = sorted(order[:n_held].tolist())
    kept = sorted(order[n_held:].tolist())
    return split.select(kept), split.select(held)


def build_time_balanced_subsets(history, n_subsets, subset_len, seed):
    """
    Partitions a history into disjoint subsets of equal length whose
    average presentation times are close to each other.

    KCs are visited by descending frequency (ties by KC index) and each is
    assigned whole to the subset, among those with room left, whose mean
    timestamp it keeps closest to the history's overall mean. Subsets that
    end up too long drop their latest records; short subsets are padded from
    the leftover records in a seeded order.

    Returns:
        list: n_subsets InteractionHistory objects of subset_len records each.

    Raises:
        ValueError: If the history has fewer than n_subsets * subset_len records.
    """
    if n_subsets < 1 or subset_len < 1:
        raise ValueError("n_subsets and subset_len must both be at least 1")
    if len(history) < n_subsets * subset_len:
        raise ValueError(
            f"history of {history.learner_id} has {len(history)} records, "
            f"needs {n_subsets * subset_len} for {n_subsets} subsets of {subset_len}"
        )
    target_mean = float(np.mean(history.times))
    kcs, counts = np.unique(history.kcs, return_counts=True)
    kc_order = sorted(zip(kcs.tolist(), counts.tolist()), key=lambda kc_count: (-kc_count[1], kc_count[0]))

    members = [[] for _ in range(n_subsets)]
    time_sums = np.zeros(n_subsets)
    leftover = []
    for kc, _ in kc_order:
        positions = np.flatnonzero(history.kcs == kc).tolist()
        open_subsets = [j for j in range(n_subsets) if len(members[j]) < subset_len]
        if not open_subsets:
            leftover.extend(positions)
            continue
        kc_time = float(history.times[positions].sum())

        def imbalance(j):
            mean = (time_sums[j] + kc_time) / (len(members[j]) + len(positions))
            return (abs(mean - target_mean), len(members[j]), j)

        best = min(open_subsets, key=imbalance)
        members[best].extend(positions)
        time_sums[best] += kc_time

    for j in range(n_subsets):
        members[j].sort(key=lambda p: (history.times[p], p))
        leftover.extend(members[j][subset_len:])
        members[j] = members[j][:subset_len]

    leftover.sort()
    rng = np.random.default_rng(seed)
    leftover = [leftover[i] for i in rng.permutation(len(leftover))]
    for j in range(n_subsets):
        while len(members[j]) < subset_len:
            members[j].append(leftover.pop())

    return [history.subset(m) for m in members]
