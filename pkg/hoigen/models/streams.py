"""Human, object and spatial verb streams and their SGD training loop."""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from collections.abc import Callable, Sequence

import numpy as np
import torch
from typing_extensions import override

from ..core import BBox, PairRecord, Pose2D
from .mlp import MlpSpec, StreamError, StreamNet, backward, loss, sgd_step

logger = logging.getLogger(__name__)

DEFAULT_LR = 7e-3
DEFAULT_EPOCHS = {"human": 50, "object": 40, "spatial": 40}


def encode_spatial(hbox: BBox, obox: BBox, pose: Pose2D | None, n_keypoints: int | None = None) -> np.ndarray:
    """Encode the pair layout relative to the union box.

    Box corners and keypoints are shifted by the union box's top-left corner and divided by
    its size, then flattened: ``[h.x1, h.y1, h.x2, h.y2, o.x1, ..., kp_1.x, kp_1.y, ...]``.

    Args:
        hbox: Human box.
        obox: Object box.
        pose: Human pose, or None to place ``n_keypoints`` keypoints at the human box centre.
        n_keypoints: Required when ``pose`` is None; checked against the pose otherwise.

    Returns:
        np.ndarray: Vector of length 2 * (4 + k).
    """
    hbox.validate()
    obox.validate()
    union = hbox.union(obox)
    if union.width <= 0 or union.height <= 0:
        raise StreamError(f"degenerate union box {union.to_list()}")
    if pose is None:
        if n_keypoints is None:
            raise StreamError("n_keypoints is required when the pose is missing")
        centre = ((hbox.x1 + hbox.x2) / 2.0, (hbox.y1 + hbox.y2) / 2.0)
        keypoints = [centre] * n_keypoints
    else:
        if n_keypoints is not None and len(pose) != n_keypoints:
            raise StreamError(f"pose has {len(pose)} keypoints, expected {n_keypoints}")
        keypoints = list(pose.keypoints)
    points = np.array(
        [(hbox.x1, hbox.y1), (hbox.x2, hbox.y2), (obox.x1, obox.y1), (obox.x2, obox.y2), *keypoints],
        dtype=np.float64,
    ).reshape(-1, 2)
    origin = np.array([union.x1, union.y1])
    size = np.array([union.width, union.height])
    return ((points - origin) / size).reshape(-1)


class VerbStream(ABC):
    """Maps pair records to one stream's input vectors."""

    name: str

    @abstractmethod
    def input_vector(self, record: PairRecord) -> Sequence[float]:
        pass

    def inputs(self, records: Sequence[PairRecord]) -> torch.Tensor:
        """Stack the input vectors of ``records`` into an (n, d) float64 tensor."""
        if not records:
            raise StreamError(f"no records for the {self.name} stream")
        rows = [np.asarray(self.input_vector(r), dtype=np.float64) for r in records]
        dims = {len(r) for r in rows}
        if len(dims) != 1:
            raise StreamError(f"{self.name} stream inputs have mixed dimensions {sorted(dims)}")
        return torch.from_numpy(np.stack(rows))

    def spec(self, input_dim: int, hidden: Sequence[int], n_verbs: int, seed: int, uncertainty: bool = True) -> MlpSpec:
        return MlpSpec(input_dim=input_dim, hidden=tuple(hidden), n_verbs=n_verbs, seed=seed, uncertainty=uncertainty)


class _FeatureStream(VerbStream):
    @override
    def input_vector(self, record: PairRecord) -> Sequence[float]:
        try:
            return record.features[self.name]
        except KeyError:
            raise StreamError(f"pair {record.pair_id} has no {self.name} features") from None


class HumanStream(_FeatureStream):
    """Human appearance features (precomputed)."""

    name = "human"


class ObjectStream(_FeatureStream):
    """Object appearance features (precomputed)."""

    name = "object"


class SpatialStream(VerbStream):
    """Box-and-pose layout encoded by encode_spatial.

    Args:
        n_keypoints: Keypoints per pose; poses are imputed at the human box centre when missing.
    """

    name = "spatial"

    def __init__(self, n_keypoints: int):
        self.n_keypoints = n_keypoints

    @override
    def input_vector(self, record: PairRecord) -> Sequence[float]:
        return encode_spatial(record.human_box, record.object_box, record.pose, self.n_keypoints)


def make_stream(name: str, n_keypoints: int = 0) -> VerbStream:
    match name:
        case "human":
            return HumanStream()
        case "object":
            return ObjectStream()
        case "spatial":
            return SpatialStream(n_keypoints)
    raise StreamError(f"unknown stream {name!r}, expected human, object or spatial")


def batches(n: int, batch_size: int | None, generator: torch.Generator) -> list[torch.Tensor]:
    """Shuffled index batches covering range(n) once; full batch when batch_size is None."""
    order = torch.randperm(n, generator=generator)
    size = n if not batch_size else batch_size
    return list(order.split(size))


def train_stream(
    model: StreamNet,
    x: torch.Tensor,
    y: torch.Tensor,
    epochs: int,
    lr: float = DEFAULT_LR,
    batch_size: int | None = 32,
    seed: int = 0,
    on_epoch: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Train ``model`` with deterministic minibatch SGD.

    The same seed, data and order give bit-identical weights.

    Returns:
        list[float]: Mean training loss of every epoch.
    """
    x = torch.as_tensor(x, dtype=torch.float64)
    y = torch.as_tensor(y, dtype=torch.float64)
    if len(x) == 0:
        raise StreamError("cannot train on an empty dataset")
    if len(x) != len(y):
        raise StreamError(f"{len(x)} inputs but {len(y)} label rows")
    generator = torch.Generator().manual_seed(seed)
    history = []
    for epoch in range(epochs):
        for index in batches(len(x), batch_size, generator):
            grads = backward(model, x[index], y[index])
            sgd_step(model, grads, lr)
        with torch.no_grad():
            total = loss(model, x, y).item()
        history.append(total)
        logger.debug("Epoch %d loss %.6f", epoch, total)
        if on_epoch is not None:
            on_epoch(epoch, total)
    if history:
        logger.info("Trained %d epochs, final loss %.6f", epochs, history[-1])
    return history
