"""Model checkpoints: config header plus every named parameter (and optimiser moments)."""

from __future__ import annotations

import numpy as np

from . import io
from . import tensor as T
from .config import dump_model, model_from_text, parse_lines
from .model import UformerParams, build
from .train import OptimizerState

STEP_KEY = "state.step"


def save(path, params: UformerParams, state: OptimizerState | None = None) -> None:
    header = dump_model(params.config)
    tensors: dict[str, np.ndarray] = dict(params.state_dict())
    if state is not None:
        header += f"{STEP_KEY} = {state.step}\n"
        for name, m in state.m.items():
            tensors[f"optim.m.{name}"] = m
            tensors[f"optim.v.{name}"] = state.v[name]
    io.save_checkpoint(path, header, tensors)


def load(path, dtype=None) -> tuple[UformerParams, OptimizerState]:
    """Rebuild parameters from a checkpoint; every expected name must be present once."""
    header, tensors = io.load_checkpoint(path)
    cfg = model_from_text(header)
    model_state = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    if dtype is None:
        dtype = next(iter(model_state.values())).dtype if model_state else T.get_default_dtype()
    with T.default_dtype(dtype):
        params = build(cfg, seed=0)
    params.load_state_dict(model_state, strict=True)
    step = int(parse_lines(header).get(STEP_KEY, "0"))
    state = OptimizerState(step=step)
    for k, v in tensors.items():
        if k.startswith("optim.m."):
            state.m[k[len("optim.m.") :]] = v.copy()
        elif k.startswith("optim.v."):
            state.v[k[len("optim.v.") :]] = v.copy()
    return params, state
