"""Minimal parameter containers shared by the networks."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .ops import BatchNormState, batchnorm2d, conv2d
from .tensor import Parameter, Tensor, get_default_dtype


class Module:
    """Ordered collection of named parameters and batch-norm buffers."""

    def __init__(self):
        self._params: OrderedDict[str, Parameter] = OrderedDict()
        self._bn: OrderedDict[str, BatchNormState] = OrderedDict()

    # registration
    def add_param(self, name: str, data: np.ndarray) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, np.asarray(data, dtype=get_default_dtype()))
        self._params[name] = p
        return p

    def add_bn(self, name: str, channels: int) -> BatchNormState:
        st = BatchNormState(channels)
        self._bn[name] = st
        return st

    # access
    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def named_parameters(self) -> OrderedDict[str, Parameter]:
        return self._params

    def num_parameters(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def set_group(self, group: str) -> None:
        for p in self._params.values():
            if group not in Parameter.GROUPS:
                raise ValueError(f"unknown learning-rate group {group!r}")
            p.group = group

    def requires_grad_(self, flag: bool) -> None:
        for p in self._params.values():
            p.requires_grad = flag

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        """Parameters followed by batch-norm running statistics, in a stable order."""
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self._params.items():
            out[name] = p.data
        for name, st in self._bn.items():
            if not st.initialized:
                st.reset(get_default_dtype())
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        expected = self.state_dict()
        for name, ref in expected.items():
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing entry {key!r}")
            arr = np.asarray(state[key])
            if arr.shape != ref.shape:
                raise ValueError(f"shape mismatch for {key!r}: checkpoint {arr.shape}, "
                                 f"model {ref.shape}")
        for name, p in self._params.items():
            p.data = np.array(state[prefix + name], dtype=p.dtype)
        for name, st in self._bn.items():
            st.running_mean = np.array(state[f"{prefix}{name}.running_mean"], dtype=get_default_dtype())
            st.running_var = np.array(state[f"{prefix}{name}.running_var"], dtype=get_default_dtype())
            st.initialized = True


class ConvBNReLU:
    """conv3x3 (no bias) -> batch norm -> ReLU, registered on an owning module."""

    def __init__(self, owner: Module, name: str, cin: int, cout: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / (cin * 9))
        self.weight = owner.add_param(f"{name}.conv.weight", rng.normal(0.0, std, (cout, cin, 3, 3)))
        self.gamma = owner.add_param(f"{name}.bn.gamma", np.ones(cout))
        self.beta = owner.add_param(f"{name}.bn.beta", np.zeros(cout))
        self.bn = owner.add_bn(f"{name}.bn", cout)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batchnorm2d(conv2d(x, self.weight), self.gamma, self.beta, self.bn, train).relu()
