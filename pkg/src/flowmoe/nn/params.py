"""Named parameter sets and deterministic randomness for training."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class ParamSet:
    """Ordered, named parameter tensors of one network.

    Names are unique and shapes are fixed once added; insertion order is
    the serialization order.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name, data, trainable=True):
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=trainable)
        self._tensors[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return list(self._tensors.values())

    def freeze(self):
        for t in self._tensors.values():
            t.requires_grad = False

    def unfreeze(self):
        for t in self._tensors.values():
            t.requires_grad = True

    @property
    def frozen(self):
        return all(not t.requires_grad for t in self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._tensors.items():
            out.add(name, t.data.copy(), trainable=t.requires_grad)
        return out

    def state_dict(self):
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_state_dict(self, state):
        for name, t in self._tensors.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: "
                                 f"{arr.shape} vs {t.data.shape}")
            t.data = arr.copy()

    def to_vector(self):
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._tensors.values()])

    def load_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        offset = 0
        for t in self._tensors.values():
            n = t.data.size
            t.data = vec[offset:offset + n].reshape(t.data.shape).copy()
            offset += n
        if offset != vec.size:
            raise ValueError(f"vector length {vec.size} does not match "
                             f"parameter count {offset}")

    def bit_equal(self, other) -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n].data, other[n].data)
                   for n in self.names())


def init_linear(params, prefix, fan_in, fan_out, rng, zero_weights=False):
    """Add weight/bias for one affine layer; weights U(+-1/sqrt(fan_in))."""
    if zero_weights:
        w = np.zeros((fan_in, fan_out))
    else:
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    params.add(f"{prefix}.w", w)
    params.add(f"{prefix}.b", np.zeros(fan_out))


class DropoutStream:
    """Counter-based deterministic mask source (Philox).

    Masks come out in call order, so replaying the same call sequence from
    the same seed reproduces training bit-for-bit. `fork()` derives an
    independent stream for a sub-component.
    """

    def __init__(self, seed, stream=0):
        self._seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(key=self._seed,
                                                         counter=[0, 0, 0, stream]))

    def mask(self, shape, keep_prob):
        return (self._gen.random(shape) < keep_prob).astype(np.float64)

    def fork(self, stream):
        return DropoutStream(self._seed, stream=stream)


def seed_streams(seed, n):
    """Split one seed into n independent child seeds."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]
