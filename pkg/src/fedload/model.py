"""Encoder/decoder LSTM disaggregator with sparsemax attention.

Architecture, for ``L`` layers and ``H`` hidden units per direction:

* encoder: ``L`` stacked bidirectional LSTM layers over the input window;
  layer 0 reads the raw features, deeper layers read the ``2H`` concatenation
  of the layer below.
* decoder: the same stack shape, reading the same input window, with each
  (layer, direction) cell starting from the encoder's last state of the same
  (layer, direction). "Last" for the backward direction is the state after it
  has consumed input step 0.
* attention: ``score[t, s] = h_t . hbar_s`` between decoder and encoder
  final-layer states, ``alpha[t] = sparsemax(score[t])``,
  ``c_t = sum_s alpha[t, s] hbar_s`` and ``a_t = [c_t; h_t]``.
* head: ``tanh(W1 a_t + b1)`` (``4H -> H``) then ``W2 . + b2`` (``H -> A``).

Parameter names::

    {encoder,decoder}.l{layer}.{fwd,bwd}.{w_ih,w_hh,b_ih,b_hh}
    head.dense1.{weight,bias}
    head.dense2.{weight,bias}

LSTM gate rows are stacked input, forget, cell, output. The parameter count is

    sum over layers l of 2 (stacks) * 2 (directions) * (4H*in_l + 4H*H + 8H)
    + (4H*H + H) + (H*A + A),   with in_0 = F and in_l = 2H for l > 0.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tensor
from .params import GradSet, ParamSet, ShapeError

DIRECTIONS = ("fwd", "bwd")
STACKS = ("encoder", "decoder")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 5
    hidden_size: int = 128
    window_len: int = 24
    num_input_features: int = 3
    num_appliances: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_size < 1:
            raise ValueError(f"hidden_size must be >= 1, got {self.hidden_size}")
        if self.window_len < 1:
            raise ValueError(f"window_len must be >= 1, got {self.window_len}")
        if self.num_input_features < 1:
            raise ValueError(f"num_input_features must be >= 1, got {self.num_input_features}")
        if self.num_appliances < 1:
            raise ValueError(f"num_appliances must be >= 1, got {self.num_appliances}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


DESK_PROFILE = ModelConfig(num_layers=2, hidden_size=16)


def param_count(cfg: ModelConfig) -> int:
    H, F, A = cfg.hidden_size, cfg.num_input_features, cfg.num_appliances
    total = 0
    for layer in range(cfg.num_layers):
        width = F if layer == 0 else 2 * H
        total += 2 * 2 * (4 * H * width + 4 * H * H + 8 * H)
    return total + (4 * H * H + H) + (H * A + A)


def build_model(cfg: ModelConfig) -> ParamSet:
    """Freshly initialized parameters, deterministic in ``cfg.seed``.

    Weights are uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``; biases zero.
    """
    gen = rng.stream(cfg.seed, "init")
    H = cfg.hidden_size
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for stack in STACKS:
        for layer in range(cfg.num_layers):
            width = cfg.num_input_features if layer == 0 else 2 * H
            for d in DIRECTIONS:
                prefix = f"{stack}.l{layer}.{d}"
                shapes += [
                    (f"{prefix}.w_ih", (4 * H, width)),
                    (f"{prefix}.w_hh", (4 * H, H)),
                    (f"{prefix}.b_ih", (4 * H,)),
                    (f"{prefix}.b_hh", (4 * H,)),
                ]
    shapes += [
        ("head.dense1.weight", (H, 4 * H)),
        ("head.dense1.bias", (H,)),
        ("head.dense2.weight", (cfg.num_appliances, H)),
        ("head.dense2.bias", (cfg.num_appliances,)),
    ]
    entries = {}
    for name, shape in sorted(shapes):
        if len(shape) == 1:
            entries[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            entries[name] = gen.uniform(-bound, bound, size=shape)
    return ParamSet(entries)


def infer_config(params: Mapping[str, np.ndarray], seed: int = 0) -> ModelConfig:
    """Recover architecture sizes from parameter shapes."""
    layers = sum(1 for k in params if k.startswith("encoder.") and k.endswith(".fwd.w_hh"))
    w = params["encoder.l0.fwd.w_ih"]
    return ModelConfig(
        num_layers=layers,
        hidden_size=w.shape[0] // 4,
        num_input_features=w.shape[1],
        num_appliances=params["head.dense2.weight"].shape[0],
        seed=seed,
    )


# -- forward pieces -------------------------------------------------------------

@dataclass
class EncoderOutputs:
    """``H_fle`` is ``(..., T, 2H)``; ``H_lte``/``C_lte`` list ``L*2`` states
    ordered ``[l0 fwd, l0 bwd, l1 fwd, ...]``."""

    H_fle: Tensor
    H_lte: list[Tensor]
    C_lte: list[Tensor]


@dataclass
class AttentionTrace:
    scores: np.ndarray
    alpha: np.ndarray
    context: np.ndarray
    attention_vector: np.ndarray


def _as_weights(params) -> dict[str, Tensor]:
    if isinstance(params, ParamSet):
        return {k: Tensor(v, name=k) for k, v in params.items()}
    return dict(params)


def _num_layers(W: Mapping[str, Tensor], stack: str) -> int:
    return sum(1 for k in W if k.startswith(f"{stack}.") and k.endswith(".fwd.w_hh"))


def _run_stack(xs: Tensor, W: Mapping[str, Tensor], stack: str,
               init: tuple[list[Tensor], list[Tensor]] | None = None):
    """Run a stacked bidirectional LSTM over ``(..., T, in)``.

    Returns the top layer's states ``(..., T, 2H)`` and the last states of
    every (layer, direction) in order l0.fwd, l0.bwd, l1.fwd, ...
    """
    n_layers = _num_layers(W, stack)
    if n_layers == 0:
        raise ShapeError(f"no {stack} layers in parameter set")
    batch_shape = xs.data.shape[:-2]
    last_h: list[Tensor] = []
    last_c: list[Tensor] = []
    for layer in range(n_layers):
        outs = []
        for k, d in enumerate(DIRECTIONS):
            p = f"{stack}.l{layer}.{d}"
            w = (W[f"{p}.w_ih"], W[f"{p}.w_hh"], W[f"{p}.b_ih"], W[f"{p}.b_hh"])
            if init is None:
                hidden = w[1].data.shape[1]
                h = c = Tensor(np.zeros(batch_shape + (hidden,)))
            else:
                h, c = init[0][2 * layer + k], init[1][2 * layer + k]
            seq, h, c = ad.lstm_layer(xs, h, c, *w, reverse=(d == "bwd"))
            outs.append(seq)
            last_h.append(h)
            last_c.append(c)
        xs = ad.concat(outs)
    return xs, last_h, last_c


def _sequence(X) -> Tensor:
    x = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError(f"input window must be (T, F) or (B, T, F), got {x.shape}")
    return Tensor(x)


def _check_input(X, W: Mapping[str, Tensor]) -> None:
    x = X.data if isinstance(X, Tensor) else np.asarray(X)
    width = W["encoder.l0.fwd.w_ih"].data.shape[1]
    if x.ndim < 2 or x.shape[-1] != width:
        raise ShapeError(f"input has shape {x.shape}; model expects {width} features on the last axis")


def _encode(X, W) -> EncoderOutputs:
    _check_input(X, W)
    top, h, c = _run_stack(_sequence(X), W, "encoder")
    return EncoderOutputs(top, h, c)


def _decode(X, enc: EncoderOutputs, W):
    _check_input(X, W)
    n_dec = _num_layers(W, "decoder")
    if 2 * n_dec != len(enc.H_lte):
        raise ShapeError(f"decoder has {n_dec} layers but encoder supplied {len(enc.H_lte) // 2}")
    H_fld, _, _ = _run_stack(_sequence(X), W, "decoder", init=(enc.H_lte, enc.C_lte))
    if H_fld.data.shape != enc.H_fle.data.shape:
        raise ShapeError(f"decoder states {H_fld.data.shape} vs encoder states {enc.H_fle.data.shape}")
    scores = ad.matmul(H_fld, ad.transpose(enc.H_fle))
    alpha = ad.sparsemax(scores)
    context = ad.matmul(alpha, enc.H_fle)
    attn = ad.concat([context, H_fld])
    return H_fld, (scores, alpha, context, attn)


def forward(X, W: Mapping[str, Tensor]) -> Tensor:
    """Raw (unclamped) head output, ``(..., T, A)``."""
    enc = _encode(X, W)
    _, (_, _, _, attn) = _decode(X, enc, W)
    hidden = ad.tanh(ad.affine(attn, W["head.dense1.weight"], W["head.dense1.bias"]))
    return ad.affine(hidden, W["head.dense2.weight"], W["head.dense2.bias"])


# -- public API -----------------------------------------------------------------

def encode(X, params) -> EncoderOutputs:
    return _encode(X, _as_weights(params))


def decode(X, enc: EncoderOutputs, params) -> tuple[np.ndarray, AttentionTrace]:
    H_fld, parts = _decode(X, enc, _as_weights(params))
    return H_fld.data, AttentionTrace(*(p.data for p in parts))


def predict(X, params, clamp: bool = True) -> np.ndarray:
    """Per-step, per-appliance estimates in normalized units.

    ``X`` is one window ``(T, F)`` or a batch ``(B, T, F)``. Negative outputs
    are clamped to zero unless ``clamp`` is false.
    """
    out = forward(X, _as_weights(params)).data
    return np.maximum(out, 0.0) if clamp else out


def _batch_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        x, y = batch
    else:
        pairs = list(batch)
        if not pairs:
            raise ValueError("empty training batch")
        x = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
        y = np.stack([np.asarray(p[1], dtype=np.float64) for p in pairs])
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty training batch")
    return x, y


def loss_and_grad(params: ParamSet, batch) -> tuple[float, GradSet]:
    """Mean L1 loss over the batch and its gradient."""
    x, y = _batch_arrays(batch)
    tape = ad.Tape()
    W = tape.watch(params)
    loss = ad.l1_loss(forward(x, W), y)
    grads = ad.backward(loss)
    tape.release()
    return loss.item(), grads


def loss_value(params: ParamSet, batch) -> float:
    x, y = _batch_arrays(batch)
    return ad.l1_loss(forward(x, _as_weights(params)), y).item()


def train_step(batch, params: ParamSet, lr: float) -> tuple[ParamSet, float]:
    """One full-batch gradient step; returns new parameters and the pre-step loss."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    loss, grad = loss_and_grad(params, batch)
    return params.axpy(-lr, grad), loss


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: ParamSet, cfg: ModelConfig) -> None:
    path = Path(path)
    params.save(path)
    path.with_suffix(".json").write_text(cfg.to_json() + "\n")


def load_checkpoint(path: str | Path) -> tuple[ParamSet, ModelConfig]:
    path = Path(path)
    cfg = ModelConfig.from_dict(json.loads(path.with_suffix(".json").read_text()))
    params = ParamSet.load(path)
    build_model(cfg).check_compatible(params)
    return params, cfg
