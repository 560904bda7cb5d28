"""Object-category immune training of the object stream.

Three stages:

1. train an object classifier on object features and freeze it;
2. train a synthesizer that fuses two object features so that the frozen classifier sees
   both categories with equal probability;
3. train the object verb stream on synthesized features (a feature fused with a partner of
   a similar category, or with itself) and their averaged labels.

At inference the object stream sees ``synth(f, f)``.
"""

from __future__ import annotations

import json
import logging
import pathlib
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import FormatError, ValidationError, Vocabulary
from .models.mlp import (
    StreamNet,
    StreamOutput,
    backward,
    forward,
    init_uniform_,
    load_state_rows,
    sgd_step,
    state_rows,
    stream_loss,
)
from .models.streams import DEFAULT_LR, batches

logger = logging.getLogger(__name__)

DEFAULT_DUP_PROB = 0.5


class OcImmuneError(ValidationError):
    """Raised on invalid inputs to the object-category immune stages."""

    pass


def freeze(module: nn.Module) -> nn.Module:
    module.requires_grad_(False)
    module.eval()
    return module


def is_frozen(module: nn.Module) -> bool:
    return not any(p.requires_grad for p in module.parameters())


def _mlp(widths: Sequence[int], generator: torch.Generator) -> nn.ModuleList:
    layers = nn.ModuleList(nn.Linear(a, b, dtype=torch.float64) for a, b in zip(widths[:-1], widths[1:], strict=True))
    for layer in layers:
        init_uniform_(layer, generator)
    return layers


def _run(layers: nn.ModuleList, x: torch.Tensor) -> torch.Tensor:
    for layer in layers[:-1]:
        x = F.relu(layer(x))
    return layers[-1](x)


# --------------------------------------------------------------------------- #
# Stage 1: object classifier
# --------------------------------------------------------------------------- #


class ObjectClassifier(nn.Module):
    """Softmax MLP over object categories.

    Args:
        input_dim: Object feature dimension.
        hidden: Hidden widths.
        n_objects: Number of categories.
        seed: Initialisation seed.
    """

    def __init__(self, input_dim: int, hidden: Sequence[int], n_objects: int, seed: int = 0):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_widths = tuple(hidden)
        self.n_objects = n_objects
        self.layers = _mlp((input_dim, *hidden, n_objects), torch.Generator().manual_seed(seed))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return _run(self.layers, x)

    def config(self) -> dict[str, Any]:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden_widths), "n_objects": self.n_objects}


def train_object_classifier(
    features: torch.Tensor,
    labels: Sequence[int] | torch.Tensor,
    n_objects: int,
    hidden: Sequence[int] = (64,),
    epochs: int = 60,
    lr: float = 0.05,
    batch_size: int | None = 64,
    seed: int = 0,
) -> ObjectClassifier:
    """Train an object classifier with cross-entropy and return it frozen.

    Raises:
        OcImmuneError: If fewer than two categories are present or lengths disagree.
    """
    x = torch.as_tensor(features, dtype=torch.float64)
    y = torch.as_tensor(labels, dtype=torch.long)
    if x.dim() != 2 or len(x) != len(y):
        raise OcImmuneError(f"{len(x)} feature rows but {len(y)} category labels")
    if len(torch.unique(y)) < 2:
        raise OcImmuneError("object classifier needs at least two categories")
    if y.min() < 0 or y.max() >= n_objects:
        raise OcImmuneError(f"category labels must lie in [0, {n_objects})")

    classifier = ObjectClassifier(x.shape[1], hidden, n_objects, seed)
    optimizer = torch.optim.SGD(classifier.parameters(), lr=lr)
    generator = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        for index in batches(len(x), batch_size, generator):
            optimizer.zero_grad()
            F.cross_entropy(classifier(x[index]), y[index]).backward()
            optimizer.step()
        if epoch == epochs - 1:
            with torch.no_grad():
                accuracy = (classifier(x).argmax(dim=1) == y).double().mean().item()
            logger.info("Object classifier: %d epochs, train accuracy %.4f", epochs, accuracy)
    return freeze(classifier)


# --------------------------------------------------------------------------- #
# Stage 2: synthesizer
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class SynthesizerSpec:
    dim: int
    hidden: tuple[int, ...] = (64,)
    seed: int = 0


class Synthesizer(nn.Module):
    """Fuses two object features: ``(f_a + f_b) / 2 + MLP(concat(f_a, f_b))``.

    The output layer starts at zero, so an untrained synthesizer averages its inputs and
    ``synth(f, f) == f``.
    """

    def __init__(self, spec: SynthesizerSpec):
        super().__init__()
        self.spec = spec
        self.layers = _mlp((2 * spec.dim, *spec.hidden, spec.dim), torch.Generator().manual_seed(spec.seed))
        with torch.no_grad():
            self.layers[-1].weight.zero_()
            self.layers[-1].bias.zero_()

    def forward(self, f_a: torch.Tensor, f_b: torch.Tensor) -> torch.Tensor:
        return (f_a + f_b) / 2.0 + _run(self.layers, torch.cat([f_a, f_b], dim=-1))


def synthesizer_target(a: int, b: int, n_objects: int) -> torch.Tensor:
    """Soft target: 0.5 on each of ``a`` and ``b``, or 1.0 on ``a`` when they coincide."""
    for c in (a, b):
        if not 0 <= c < n_objects:
            raise OcImmuneError(f"category {c} not in [0, {n_objects})")
    target = torch.zeros(n_objects, dtype=torch.float64)
    target[a] += 0.5
    target[b] += 0.5
    return target


def synthesizer_loss(
    synthesizer: Synthesizer,
    classifier: ObjectClassifier,
    f_a: torch.Tensor,
    f_b: torch.Tensor,
    targets: torch.Tensor,
) -> torch.Tensor:
    """Soft-target cross-entropy of the classifier's prediction on ``synth(f_a, f_b)``."""
    return F.cross_entropy(classifier(synthesizer(f_a, f_b)), targets)


def train_synthesizer(
    features: torch.Tensor,
    categories: Sequence[int] | torch.Tensor,
    classifier: ObjectClassifier,
    hidden: Sequence[int] = (64,),
    epochs: int = 40,
    lr: float = 0.05,
    batch_size: int | None = 64,
    seed: int = 0,
) -> Synthesizer:
    """Train the synthesizer against a frozen classifier and return it frozen.

    Every epoch pairs each feature with a uniformly drawn partner and minimises the
    cross-entropy between the classifier's prediction on the fused feature and the two-hot
    target.

    Raises:
        OcImmuneError: If the classifier is not frozen or inputs disagree in length.
    """
    if not is_frozen(classifier):
        raise OcImmuneError("the object classifier must be frozen before training the synthesizer")
    x = torch.as_tensor(features, dtype=torch.float64)
    cats = torch.as_tensor(categories, dtype=torch.long)
    if x.dim() != 2 or len(x) != len(cats) or len(x) == 0:
        raise OcImmuneError(f"{len(x)} feature rows but {len(cats)} categories")
    if x.shape[1] != classifier.input_dim:
        raise OcImmuneError(f"features have dim {x.shape[1]}, classifier expects {classifier.input_dim}")

    synthesizer = Synthesizer(SynthesizerSpec(dim=x.shape[1], hidden=tuple(hidden), seed=seed))
    optimizer = torch.optim.SGD(synthesizer.parameters(), lr=lr)
    generator = torch.Generator().manual_seed(seed)
    n_objects = classifier.n_objects
    for epoch in range(epochs):
        partners = torch.randint(len(x), (len(x),), generator=generator)
        targets = (F.one_hot(cats, n_objects) + F.one_hot(cats[partners], n_objects)).double() / 2.0
        total = 0.0
        for index in batches(len(x), batch_size, generator):
            optimizer.zero_grad()
            value = synthesizer_loss(synthesizer, classifier, x[index], x[partners[index]], targets[index])
            value.backward()
            optimizer.step()
            total += value.item() * len(index)
        logger.debug("Synthesizer epoch %d loss %.6f", epoch, total / len(x))
    return freeze(synthesizer)


# --------------------------------------------------------------------------- #
# Stage 3: object verb stream on synthesized features
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class SimilarityTable:
    """For every object category, the categories it may be fused with (symmetric, reflexive)."""

    similar: tuple[frozenset[int], ...]

    def __post_init__(self) -> None:
        for a, group in enumerate(self.similar):
            if a not in group:
                raise OcImmuneError(f"similarity must be reflexive, category {a} is missing from its own set")
            for b in group:
                if not 0 <= b < len(self.similar) or a not in self.similar[b]:
                    raise OcImmuneError(f"similarity must be symmetric ({a}, {b})")

    def is_similar(self, a: int, b: int) -> bool:
        return b in self.similar[a]

    def __len__(self) -> int:
        return len(self.similar)


def build_similarity(vocabulary: Vocabulary) -> SimilarityTable:
    """Two categories are similar iff some verb composes with both."""
    groups: list[set[int]] = [{o} for o in range(vocabulary.n_objects)]
    for verb_id in range(vocabulary.n_verbs):
        objects = vocabulary.objects_for_verb(verb_id)
        for a in objects:
            groups[a].update(objects)
    return SimilarityTable(tuple(frozenset(g) for g in groups))


@dataclass(frozen=True)
class ObjectPool:
    """Object-stream training records: features (n, d), verb labels (n, |V|), categories (n,)."""

    features: torch.Tensor
    labels: torch.Tensor
    categories: tuple[int, ...]

    def __post_init__(self) -> None:
        if not len(self.features) == len(self.labels) == len(self.categories):
            raise OcImmuneError("pool features, labels and categories must have the same length")

    def __len__(self) -> int:
        return len(self.categories)

    def candidates(self, category: int, similarity: SimilarityTable) -> np.ndarray:
        """Sorted indices of the records whose category is similar to ``category``."""
        cache = self.__dict__.setdefault("_candidates", {})
        if category not in cache:
            categories = np.asarray(self.categories)
            cache[category] = np.flatnonzero(np.isin(categories, sorted(similarity.similar[category])))
        return cache[category]


def draw_partner(
    index: int, pool: ObjectPool, similarity: SimilarityTable, dup_prob: float, rng: np.random.Generator
) -> int:
    """Partner of record ``index``: itself with probability ``dup_prob``, else a uniform similar record."""
    if not 0.0 <= dup_prob <= 1.0:
        raise OcImmuneError(f"dup_prob={dup_prob} not in [0, 1]")
    if rng.random() < dup_prob:
        return index
    candidates = pool.candidates(pool.categories[index], similarity)
    if len(candidates) < 2:
        return index
    # skip the record itself
    draw = int(rng.integers(len(candidates) - 1))
    if draw >= int(np.searchsorted(candidates, index)):
        draw += 1
    return int(candidates[draw])


def synth_sample(
    index: int,
    pool: ObjectPool,
    similarity: SimilarityTable,
    synthesizer: Synthesizer,
    dup_prob: float,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Synthesize one training sample for pool record ``index``.

    With probability ``dup_prob`` (or when no other record of a similar category exists) the
    feature is fused with itself and keeps its label. Otherwise a partner is drawn uniformly
    among the other records of similar categories; the result is ``synth(f, f')`` with label
    ``(y + y') / 2``.
    """
    partner = draw_partner(index, pool, similarity, dup_prob, rng)
    with torch.no_grad():
        fused = synthesizer(pool.features[index].unsqueeze(0), pool.features[partner].unsqueeze(0)).squeeze(0)
    return fused, (pool.labels[index] + pool.labels[partner]) / 2.0


def synthesize_epoch(
    pool: ObjectPool,
    similarity: SimilarityTable,
    synthesizer: Synthesizer,
    dup_prob: float,
    seed: int,
    epoch: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Synthesized inputs and intermediate labels of every pool record for one epoch.

    Record ``i`` draws from ``default_rng([seed, epoch, i])``, so results do not depend on
    processing order and match synth_sample row by row.
    """
    partners = torch.tensor(
        [
            draw_partner(index, pool, similarity, dup_prob, np.random.default_rng([seed, epoch, index]))
            for index in range(len(pool))
        ],
        dtype=torch.long,
    )
    with torch.no_grad():
        fused = synthesizer(pool.features, pool.features[partners])
    return fused, (pool.labels + pool.labels[partners]) / 2.0


def train_object_verb_stream(
    model: StreamNet,
    pool: ObjectPool,
    similarity: SimilarityTable,
    synthesizer: Synthesizer,
    epochs: int,
    lr: float = DEFAULT_LR,
    batch_size: int | None = 32,
    dup_prob: float = DEFAULT_DUP_PROB,
    seed: int = 0,
    on_epoch: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Train the object verb stream on freshly synthesized samples every epoch.

    Returns:
        list[float]: Mean loss of every epoch.
    """
    if len(pool) == 0:
        raise OcImmuneError("empty object pool")
    if max(pool.categories) >= len(similarity):
        raise OcImmuneError("pool contains categories missing from the similarity table")
    generator = torch.Generator().manual_seed(seed)
    history = []
    for epoch in range(epochs):
        x, y = synthesize_epoch(pool, similarity, synthesizer, dup_prob, seed, epoch)
        for index in batches(len(x), batch_size, generator):
            grads = backward(model, x[index], y[index])
            sgd_step(model, grads, lr)
        with torch.no_grad():
            s, e = model(x)
            total = stream_loss(model, s, e, y).item()
        history.append(total)
        logger.debug("Object stream epoch %d loss %.6f", epoch, total)
        if on_epoch is not None:
            on_epoch(epoch, total)
    return history


def infer_object_stream(model: StreamNet, synthesizer: Synthesizer, x: torch.Tensor) -> StreamOutput:
    """Object stream output on ``synth(f, f)``."""
    x = torch.as_tensor(x, dtype=torch.float64)
    with torch.no_grad():
        fused = synthesizer(x, x)
    return forward(model, fused)


# --------------------------------------------------------------------------- #
# Checkpoint
# --------------------------------------------------------------------------- #


@dataclass
class OcImmuneCheckpoint:
    """Frozen classifier and synthesizer plus the duplication probability used in stage 3."""

    classifier: ObjectClassifier
    synthesizer: Synthesizer
    dup_prob: float = DEFAULT_DUP_PROB

    def to_dict(self) -> dict[str, Any]:
        return {
            "dup_prob": self.dup_prob,
            "classifier": {"config": self.classifier.config(), "layers": state_rows(self.classifier)},
            "synthesizer": {
                "spec": asdict(self.synthesizer.spec) | {"hidden": list(self.synthesizer.spec.hidden)},
                "layers": state_rows(self.synthesizer),
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> OcImmuneCheckpoint:
        try:
            config = data["classifier"]["config"]
            classifier = ObjectClassifier(config["input_dim"], config["hidden"], config["n_objects"])
            spec = data["synthesizer"]["spec"]
            synthesizer = Synthesizer(SynthesizerSpec(int(spec["dim"]), tuple(spec["hidden"]), int(spec["seed"])))
            dup_prob = float(data["dup_prob"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed synthesizer checkpoint: {e}") from e
        load_state_rows(classifier, data["classifier"]["layers"])
        load_state_rows(synthesizer, data["synthesizer"]["layers"])
        return cls(freeze(classifier), freeze(synthesizer), dup_prob)

    def save(self, path: str | pathlib.Path) -> None:
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), allow_nan=False) + "\n", encoding="utf-8")
        logger.info("Saved synthesizer checkpoint to %s", path)

    @classmethod
    def load(cls, path: str | pathlib.Path) -> OcImmuneCheckpoint:
        path = pathlib.Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise FormatError(f"cannot open {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: malformed JSON: {e.msg}") from e
        return cls.from_dict(data)


def fit_oc_immune(
    features: torch.Tensor,
    categories: Sequence[int],
    n_objects: int,
    hidden: Sequence[int] = (64,),
    classifier_epochs: int = 60,
    synthesizer_epochs: int = 40,
    lr: float = 0.05,
    dup_prob: float = DEFAULT_DUP_PROB,
    seed: int = 0,
) -> OcImmuneCheckpoint:
    """Stages 1 and 2: frozen classifier plus frozen synthesizer."""
    classifier = train_object_classifier(
        features, categories, n_objects, hidden=hidden, epochs=classifier_epochs, lr=lr, seed=seed
    )
    synthesizer = train_synthesizer(
        features, categories, classifier, hidden=hidden, epochs=synthesizer_epochs, lr=lr, seed=seed
    )
    return OcImmuneCheckpoint(classifier, synthesizer, dup_prob)
