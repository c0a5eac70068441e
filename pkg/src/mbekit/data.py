"""Dataset generators, the per-digit tokenizer, and separation metrics.

Three task families: the conflicting-memory Gaussian regression pair (two
teachers at theta +/- delta), a digit-level integer multiplication corpus
with disjoint train/eval pair sets, and byte-level text corpus ingestion
for the character LM. All generators are pure functions of (spec, seed).
"""

import json
from dataclasses import dataclass

import numpy as np

from .entropy import MbeConfig, spectrum_report
from .errors import DegenerateRepresentationError
from .nets import mlp_forward, shifted_params

MEAN_TASK1 = np.array([1, 1, 1, 1, 1, 0, 0, 0, 0, 0], dtype=np.float64)
MEAN_TASK2 = np.array([0, 0, 0, 0, 0, 1, 1, 1, 1, 1], dtype=np.float64)

BYTE_VOCAB = 256


@dataclass(frozen=True)
class ConflictTaskSpec:
    n_per_task: int = 256
    sigma: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_per_task < 1:
            raise ValueError("n_per_task must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


def gen_conflict_data(spec, mlp_config, base_params, delta):
    """Two regression tasks with opposed teachers.

    X1 ~ N(mean_task1, sigma^2 I), X2 ~ N(mean_task2, sigma^2 I);
    Y1 = f(theta + delta)(X1), Y2 = f(theta - delta)(X2).
    """
    rng = np.random.default_rng(spec.seed)
    x1 = MEAN_TASK1 + spec.sigma * rng.standard_normal((spec.n_per_task, MEAN_TASK1.size))
    x2 = MEAN_TASK2 + spec.sigma * rng.standard_normal((spec.n_per_task, MEAN_TASK2.size))
    teacher_plus = shifted_params(base_params, delta, +1)
    teacher_minus = shifted_params(base_params, delta, -1)
    y1 = mlp_forward(mlp_config, teacher_plus, x1).logits.data
    y2 = mlp_forward(mlp_config, teacher_minus, x2).logits.data
    return (x1, y1), (x2, y2)


class DigitTokenizer:
    """Fixed 14-symbol vocabulary: digits 0-9, '*', '=', eos, pad."""

    STAR = 10
    EQUALS = 11
    EOS = 12
    PAD = 13
    VOCAB_SIZE = 14

    _CHAR_TO_ID = {str(d): d for d in range(10)} | {"*": STAR, "=": EQUALS}
    _ID_TO_CHAR = {v: k for k, v in _CHAR_TO_ID.items()}

    def encode(self, text):
        ids = []
        for pos, ch in enumerate(text):
            if ch not in self._CHAR_TO_ID:
                raise ValueError(f"unknown character {ch!r} at position {pos}")
            ids.append(self._CHAR_TO_ID[ch])
        return ids

    def decode(self, ids):
        chars = []
        for pos, i in enumerate(ids):
            if i not in self._ID_TO_CHAR:
                raise ValueError(f"non-text token id {i} at position {pos}")
            chars.append(self._ID_TO_CHAR[i])
        return "".join(chars)


@dataclass(frozen=True)
class ArithmeticSpec:
    train_digit_range: tuple = (1, 2)
    ood_digit_range: tuple = (3, 3)
    count_train: int = 100_000
    count_test_id: int = 5_000
    count_test_ood: int = 5_000
    count_val_ood: int = 1_000
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.train_digit_range
        olo, ohi = self.ood_digit_range
        if not (1 <= lo <= hi and 1 <= olo <= ohi):
            raise ValueError("digit ranges must be nonempty and positive")
        if olo <= hi:
            raise ValueError("OOD digit range must lie strictly above the train range")


@dataclass
class MultiplicationSplits:
    train: list
    test_id: list
    test_ood: list
    val_ood: list
    manifest: dict


def _values_with_digits(length):
    # 1-digit numbers include 0; longer ones exclude leading zeros.
    if length == 1:
        return 10, 0
    return 9 * 10 ** (length - 1), 10 ** (length - 1)


def _pair_space(digit_range):
    values = sum(_values_with_digits(length)[0] for length in range(digit_range[0], digit_range[1] + 1))
    return values * values


def _sample_operand(rng, digit_range):
    length = int(rng.integers(digit_range[0], digit_range[1] + 1))
    count, start = _values_with_digits(length)
    return start + int(rng.integers(0, count))


def _sample_distinct_pairs(rng, digit_range, count, forbidden):
    pairs = set()
    while len(pairs) < count:
        pair = (_sample_operand(rng, digit_range), _sample_operand(rng, digit_range))
        if pair not in forbidden and pair not in pairs:
            pairs.add(pair)
    return pairs


def _equation(pair):
    a, b = pair
    return f"{a}*{b}={a * b}"


def gen_multiplication_data(spec):
    """Equation splits with disjoint (a, b) pair sets.

    Eval pairs are reserved first (distinct, mutually disjoint); the train
    split then samples with replacement from the remaining pairs, so no
    train pair ever appears in an eval split. Errors out when a range
    cannot supply the requested distinct pairs.
    """
    id_space = _pair_space(spec.train_digit_range)
    ood_space = _pair_space(spec.ood_digit_range)
    if spec.count_test_id >= id_space:
        raise ValueError(
            f"ranges exhausted: {spec.count_test_id} ID eval pairs requested from "
            f"a space of {id_space} (train needs a nonempty remainder)"
        )
    if spec.count_test_ood + spec.count_val_ood > ood_space:
        raise ValueError(
            f"ranges exhausted: {spec.count_test_ood + spec.count_val_ood} OOD pairs "
            f"requested from a space of {ood_space}"
        )

    rng = np.random.default_rng(spec.seed)
    id_eval = _sample_distinct_pairs(rng, spec.train_digit_range, spec.count_test_id, set())
    ood_eval = _sample_distinct_pairs(
        rng, spec.ood_digit_range, spec.count_test_ood + spec.count_val_ood, set()
    )
    ood_eval = sorted(ood_eval)
    rng.shuffle(ood_eval)
    test_ood = [tuple(p) for p in ood_eval[: spec.count_test_ood]]
    val_ood = [tuple(p) for p in ood_eval[spec.count_test_ood :]]

    train = []
    while len(train) < spec.count_train:
        pair = (_sample_operand(rng, spec.train_digit_range),
                _sample_operand(rng, spec.train_digit_range))
        if pair not in id_eval:
            train.append(pair)

    manifest = {
        "seed": spec.seed,
        "train_digit_range": list(spec.train_digit_range),
        "ood_digit_range": list(spec.ood_digit_range),
        "counts": {
            "train": len(train),
            "test_id": len(id_eval),
            "test_ood": len(test_ood),
            "val_ood": len(val_ood),
        },
    }
    return MultiplicationSplits(
        train=[_equation(p) for p in train],
        test_id=[_equation(p) for p in sorted(id_eval)],
        test_ood=[_equation(p) for p in test_ood],
        val_ood=[_equation(p) for p in val_ood],
        manifest=manifest,
    )


def write_splits(splits, out_dir):
    """Persist equation splits as newline-delimited text plus a manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in ("train", "test_id", "test_ood", "val_ood"):
        (out_dir / f"{name}.txt").write_text("\n".join(getattr(splits, name)) + "\n")
    (out_dir / "manifest.json").write_text(json.dumps(splits.manifest, indent=2) + "\n")


def equation_tokens(equation, tokenizer=DigitTokenizer()):
    """Token ids for one equation plus eos, and the answer-start index.

    Loss weights cover predictions of everything after '=': the answer
    digits and the eos.
    """
    ids = tokenizer.encode(equation) + [DigitTokenizer.EOS]
    answer_start = equation.index("=") + 1
    return ids, answer_start


def batch_equations(equations, tokenizer=DigitTokenizer()):
    """Pad a list of equations into (inputs, targets, weights) LM arrays.

    inputs[t] predicts targets[t]; weight 1 only where the target is an
    answer digit or eos, 0 on operands and padding.
    """
    encoded = [equation_tokens(eq, tokenizer) for eq in equations]
    width = max(len(ids) for ids, _ in encoded)
    n = len(encoded)
    tokens = np.full((n, width), DigitTokenizer.PAD, dtype=np.int64)
    weights = np.zeros((n, width - 1), dtype=np.float64)
    for row, (ids, answer_start) in enumerate(encoded):
        tokens[row, : len(ids)] = ids
        weights[row, answer_start - 1 : len(ids) - 1] = 1.0
    return tokens[:, :-1], tokens[:, 1:], weights


@dataclass
class CharCorpus:
    train_blocks: np.ndarray  # (n, context+1) int64 byte ids
    val_blocks: np.ndarray
    vocab_size: int = BYTE_VOCAB


def char_corpus(path, context_length, split_fraction=0.1):
    """Contiguous fixed-length byte blocks; the final fraction is validation."""
    raw = np.frombuffer(open(path, "rb").read(), dtype=np.uint8)
    block = context_length + 1
    n_blocks = raw.size // block
    if n_blocks < 1:
        raise ValueError(f"{path}: file shorter than one context ({block} bytes)")
    blocks = raw[: n_blocks * block].reshape(n_blocks, block).astype(np.int64)
    n_val = int(n_blocks * split_fraction)
    n_train = n_blocks - n_val
    if n_train < 1:
        raise ValueError("split leaves no training blocks")
    return CharCorpus(train_blocks=blocks[:n_train], val_blocks=blocks[n_train:])


def sample_block_batch(blocks, batch_size, rng):
    idx = rng.integers(0, blocks.shape[0], size=batch_size)
    chosen = blocks[idx]
    return chosen[:, :-1], chosen[:, 1:]


@dataclass
class SeparationReport:
    distance: float
    separation_ratio: float
    per_task_mbe: tuple


def separation_metrics(reps_task1, reps_task2, mbe_config=MbeConfig()):
    """Centroid distance and spread-normalized separation of two rep clouds."""
    a = np.asarray(reps_task1, dtype=np.float64)
    b = np.asarray(reps_task2, dtype=np.float64)
    if a.size == 0 or b.size == 0 or a.shape[1] != b.shape[1]:
        raise ValueError(f"incompatible representation shapes {a.shape} vs {b.shape}")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    distance = float(np.linalg.norm(ca - cb))
    spread_a = float(np.linalg.norm(a - ca, axis=1).mean())
    spread_b = float(np.linalg.norm(b - cb, axis=1).mean())
    ratio = distance / ((spread_a + spread_b) / 2.0 + 1e-12)
    return SeparationReport(
        distance=distance,
        separation_ratio=ratio,
        per_task_mbe=(_cloud_mbe(a, mbe_config), _cloud_mbe(b, mbe_config)),
    )


def _cloud_mbe(cloud, config):
    try:
        return spectrum_report(cloud, config).mbe_normalized
    except DegenerateRepresentationError:
        return 0.0  # all-zero cloud: a point mass has no spectrum to spread
