import hashlib
from dataclasses import dataclass

import numpy as np
from django.conf import settings

from kv_store.layout import ModelSpec
from numerics.kernels import HalfMatrix, to_half


@dataclass(frozen=True, eq=False)
class LayerWeights:
    w_q: HalfMatrix
    w_k: HalfMatrix
    w_v: HalfMatrix
    w_o: HalfMatrix
    w_mlp1: HalfMatrix
    w_mlp2: HalfMatrix

    def matrices(self) -> tuple:
        return self.w_q, self.w_k, self.w_v, self.w_o, self.w_mlp1, self.w_mlp2


@dataclass(frozen=True, eq=False)
class ModelWeights:
    layers: tuple
    # token id -> activation row, and the final projection back to token logits
    embedding: HalfMatrix
    output: HalfMatrix

    def digest(self) -> str:
        sha = hashlib.sha256()
        for layer in self.layers:
            for matrix in layer.matrices():
                sha.update(matrix.data.tobytes())
        sha.update(self.embedding.data.tobytes())
        sha.update(self.output.data.tobytes())
        return sha.hexdigest()


def _generator(seed: int, stream: int) -> np.random.Generator:
    # PCG64 with a fixed seed sequence gives the same stream on every platform
    return np.random.Generator(np.random.PCG64([seed, stream]))


def build_weights(spec: ModelSpec, seed: int) -> ModelWeights:
    rng = _generator(seed, 0)
    limit = settings.WEIGHT_INIT_RANGE
    hidden = spec.hidden
    vocab = settings.TOY_VOCAB_SIZE

    def draw(rows, cols, bound=limit):
        return HalfMatrix.from_array(rng.uniform(-bound, bound, (rows, cols)))

    layers = tuple(
        LayerWeights(
            w_q=draw(hidden, hidden),
            w_k=draw(hidden, hidden),
            w_v=draw(hidden, hidden),
            w_o=draw(hidden, hidden),
            w_mlp1=draw(hidden, 4 * hidden),
            w_mlp2=draw(4 * hidden, hidden),
        )
        for _ in range(spec.layers)
    )
    return ModelWeights(layers=layers, embedding=draw(vocab, hidden, 1.0), output=draw(hidden, vocab))


def prompt_embeddings(spec: ModelSpec, seed: int) -> np.ndarray:
    """
    (b, s, h*d) prompt activations drawn from their own stream
    """
    rng = _generator(seed, 1)
    return to_half(rng.uniform(-1.0, 1.0, (spec.batch, spec.prompt_len, spec.hidden)))
