"""
Learned heads for forced variational integrator networks
Potential gradient, control force, damping force, observation encoder/decoder and the residual baseline heads
"""
import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from core import diffcore as dc
from core.config.systems import SystemConfig
from core.constants import (
    DEFAULT_HIDDEN,
    HEAD_CONTROL,
    HEAD_DAMPING,
    HEAD_DECODER,
    HEAD_ENCODER,
    HEAD_POTENTIAL,
    HEAD_RESIDUAL_CONTROL,
    HEAD_RESIDUAL_STATE,
    VARIANT_RESNN,
    VARIANT_SV,
    VARIANTS,
)
from core.diffcore import Tensor
from core.exceptions import ConfigError, PersistenceError, ShapeError
from core.integrators import ConfigState

logger = logging.getLogger(__name__)


class MlpHead:
    """
    Fully connected head: input -> hidden (ReLU) -> ... -> linear output

    Hidden layers use He-uniform weights drawn from the supplied generator; biases start at zero.
    With zero_output the final layer is all zeros, so a fresh head outputs exactly 0.
    """

    def __init__(self, name: str, in_dim: int, out_dim: int, hidden: Sequence[int] = DEFAULT_HIDDEN,
                 rng: Optional[np.random.Generator] = None, zero_output: bool = False):
        if in_dim < 1 or out_dim < 1 or any(w < 1 for w in hidden):
            raise ConfigError(f"head '{name}' needs positive layer widths", field="model.hidden")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = tuple(int(w) for w in hidden)

        widths = [in_dim, *self.hidden, out_dim]
        self.weights: List[Tensor] = []
        self.biases: List[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            if last and zero_output:
                w = np.zeros((fan_in, fan_out))
            else:
                # He-uniform for ReLU inputs, LeCun-uniform on the linear output
                limit = np.sqrt((3.0 if last else 6.0) / fan_in)
                w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.weights.append(dc.parameter(w, name=f"{name}.w{i}"))
            self.biases.append(dc.parameter(np.zeros(fan_out), name=f"{name}.b{i}"))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim not in (1, 2) or x.shape[-1] != self.in_dim:
            raise ShapeError(f"head '{self.name}' expects last axis {self.in_dim}, got {x.shape}",
                             primitive=self.name, shapes=[x.shape])
        out = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out = dc.add(dc.matmul(out, w), b)
            if i < len(self.weights) - 1:
                out = dc.relu(out)
        return out

    def parameters(self) -> List[Tensor]:
        params: List[Tensor] = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict:
        return {
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "hidden": list(self.hidden),
            "layers": [
                {
                    "weight": {"shape": list(w.shape), "data": w.data.reshape(-1).tolist()},
                    "bias": {"shape": list(b.shape), "data": b.data.reshape(-1).tolist()},
                }
                for w, b in zip(self.weights, self.biases)
            ],
        }

    def load_state_dict(self, state: Dict):
        """Copy weights in place; shapes must match this head exactly"""
        layers = state.get("layers", [])
        if len(layers) != len(self.weights):
            raise PersistenceError(f"head '{self.name}' has {len(self.weights)} layers, "
                                   f"checkpoint has {len(layers)}")
        for i, layer in enumerate(layers):
            for target, key in ((self.weights[i], "weight"), (self.biases[i], "bias")):
                entry = layer[key]
                shape = tuple(entry["shape"])
                data = np.asarray(entry["data"], dtype=np.float64)
                if shape != target.shape or data.size != target.size:
                    raise PersistenceError(f"head '{self.name}' layer {i} {key}: checkpoint shape {shape} "
                                           f"does not match {target.shape}")
                if not np.all(np.isfinite(data)):
                    raise PersistenceError(f"head '{self.name}' layer {i} {key} holds non-finite values")
                target.data[...] = data.reshape(shape)

    @classmethod
    def from_state_dict(cls, name: str, state: Dict) -> "MlpHead":
        head = cls(name, int(state["in_dim"]), int(state["out_dim"]), tuple(state["hidden"]))
        head.load_state_dict(state)
        return head


class ObservationCodec:
    """
    Maps observations to configuration states and back

    Position channels go through the encoder/decoder MLPs; velocity channels pass under the identity.
    When observations already are configurations both maps are exact identities. In position-only
    mode (two-step variant) the codec sees just the position channels.
    """

    def __init__(self, system: SystemConfig, hidden: Sequence[int] = DEFAULT_HIDDEN,
                 rng: Optional[np.random.Generator] = None, position_only: bool = False):
        self.system = system
        self.identity = system.identity_codec
        self.position_only = position_only
        self.n = system.config_dim
        self.p = system.position_channels
        self.encoder: Optional[MlpHead] = None
        self.decoder: Optional[MlpHead] = None
        if not self.identity:
            self.encoder = MlpHead(HEAD_ENCODER, self.p, self.n, hidden, rng)
            self.decoder = MlpHead(HEAD_DECODER, self.n, self.p, hidden, rng)

    @property
    def input_dim(self) -> int:
        return self.p if self.position_only else self.system.obs_dim

    def heads(self) -> Dict[str, MlpHead]:
        if self.identity:
            return {}
        return {HEAD_ENCODER: self.encoder, HEAD_DECODER: self.decoder}

    def _check(self, y: Tensor, width: int):
        if y.ndim not in (1, 2) or y.shape[-1] != width:
            raise ShapeError(f"observation needs last axis {width}, got {y.shape}", primitive="codec",
                             shapes=[y.shape])

    def encode_positions(self, y_pos: Tensor) -> Tensor:
        self._check(y_pos, self.p)
        return y_pos if self.identity else self.encoder(y_pos)

    def decode_positions(self, q: Tensor) -> Tensor:
        if q.shape[-1] != self.n:
            raise ShapeError(f"configuration needs last axis {self.n}, got {q.shape}", primitive="codec",
                             shapes=[q.shape])
        return q if self.identity else self.decoder(q)

    def encode(self, y: Tensor) -> ConfigState:
        self._check(y, self.system.obs_dim)
        q = self.encode_positions(dc.columns(y, 0, self.p))
        qdot = dc.columns(y, self.p, self.system.obs_dim)
        return ConfigState(q, qdot)

    def decode(self, x: ConfigState) -> Tensor:
        return dc.concat([self.decode_positions(x.q), x.qdot])


class ModelParams:
    """
    Aggregate parameters of one dynamics model

    Each head owns its tensors, so ablating or rescaling one head never touches the others.
    Views from with_damping_scale()/without_control() share the same head objects.
    """

    def __init__(self, variant: str, system: SystemConfig, heads: Dict[str, MlpHead],
                 codec: ObservationCodec, damping_scale: float = 1.0, control_enabled: bool = True):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{variant}'", field="variant")
        self.variant = variant
        self.system = system
        self.heads = heads
        self.codec = codec
        self.damping_scale = float(damping_scale)
        self.control_enabled = control_enabled

    @classmethod
    def build(cls, variant: str, system: SystemConfig, hidden: Sequence[int] = DEFAULT_HIDDEN,
              seed: int = 0) -> "ModelParams":
        """
        Construct a freshly initialized model for a system

        Args:
            variant: vv-fvin | sv-fvin | resnn
            system: System configuration (dimensions and observation layout)
            hidden: Hidden layer widths for every head
            seed: Initialization seed

        Returns:
            ModelParams with zero-output dynamics heads
        """
        rng = np.random.default_rng(seed)
        n, m = system.config_dim, system.control_dim
        if variant == VARIANT_RESNN:
            heads = {
                HEAD_RESIDUAL_STATE: MlpHead(HEAD_RESIDUAL_STATE, 2 * n, 2 * n, hidden, rng, zero_output=True),
                HEAD_RESIDUAL_CONTROL: MlpHead(HEAD_RESIDUAL_CONTROL, 2 * n + m, 2 * n, hidden, rng,
                                               zero_output=True),
            }
        elif variant in VARIANTS:
            heads = {
                HEAD_POTENTIAL: MlpHead(HEAD_POTENTIAL, n, n, hidden, rng, zero_output=True),
                HEAD_CONTROL: MlpHead(HEAD_CONTROL, n + m, n, hidden, rng, zero_output=True),
                HEAD_DAMPING: MlpHead(HEAD_DAMPING, 2 * n, n, hidden, rng, zero_output=True),
            }
        else:
            raise ConfigError(f"unknown variant '{variant}'", field="variant")
        codec = ObservationCodec(system, hidden, rng, position_only=variant == VARIANT_SV)
        model = cls(variant, system, heads, codec)
        logger.info(f"Built {variant} for {system.name}: {model.parameter_count} parameters")
        return model

    # --- dynamics heads -------------------------------------------------

    def _head(self, name: str) -> MlpHead:
        head = self.heads.get(name)
        if head is None:
            raise ConfigError(f"variant {self.variant} has no '{name}' head", field="variant")
        return head

    def potential_grad(self, q: Tensor) -> Tensor:
        return self._head(HEAD_POTENTIAL)(q)

    def control_force(self, q: Tensor, u: Tensor) -> Tensor:
        head = self._head(HEAD_CONTROL)
        if not self.control_enabled:
            return dc.zeros(q.shape)
        return head(dc.concat([q, u]))

    def damping_force_vv(self, q: Tensor, qdot: Tensor) -> Tensor:
        out = self._head(HEAD_DAMPING)(dc.concat([q, qdot]))
        return out if self.damping_scale == 1.0 else self.damping_scale * out

    def damping_force_sv(self, q_prev: Tensor, q: Tensor) -> Tensor:
        out = self._head(HEAD_DAMPING)(dc.concat([q_prev, q]))
        return out if self.damping_scale == 1.0 else self.damping_scale * out

    def residual_state(self, x: Tensor) -> Tensor:
        return self._head(HEAD_RESIDUAL_STATE)(x)

    def residual_control(self, x: Tensor, u: Tensor) -> Tensor:
        head = self._head(HEAD_RESIDUAL_CONTROL)
        if not self.control_enabled:
            return dc.zeros(x.shape)
        return head(dc.concat([x, u]))

    # --- codec ----------------------------------------------------------

    def encode(self, y: Tensor) -> ConfigState:
        return self.codec.encode(y)

    def decode(self, x: ConfigState) -> Tensor:
        return self.codec.decode(x)

    # --- views and bookkeeping -----------------------------------------

    def with_damping_scale(self, alpha: float) -> "ModelParams":
        return ModelParams(self.variant, self.system, self.heads, self.codec, alpha, self.control_enabled)

    def without_control(self) -> "ModelParams":
        return ModelParams(self.variant, self.system, self.heads, self.codec, self.damping_scale, False)

    def named_heads(self) -> Dict[str, MlpHead]:
        return {**self.heads, **self.codec.heads()}

    def parameters(self) -> List[Tensor]:
        """Every trainable tensor, ordered by head name then layer"""
        params: List[Tensor] = []
        for name in sorted(self.named_heads()):
            params.extend(self.named_heads()[name].parameters())
        return params

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def snapshot(self) -> List[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def restore(self, values: Iterable[np.ndarray]):
        params = self.parameters()
        values = list(values)
        if len(values) != len(params):
            raise ShapeError("snapshot does not match the parameter list", primitive="restore")
        for p, v in zip(params, values):
            p.data[...] = v

    def head_shapes(self) -> Dict[str, Tuple[int, int]]:
        return {name: (head.in_dim, head.out_dim) for name, head in self.named_heads().items()}
