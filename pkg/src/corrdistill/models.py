"""Toy transformer encoders: a frozen 12-block teacher and a 2-block student.

Encoder block: pre-norm multi-head self-attention and a 2-layer GELU MLP, each
with a residual connection. There is no positional encoding, so permuting
input frames permutes output frames the same way.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import CheckpointError, DimensionError

TEACHER_LAYERS = (4, 8, 12)
_BLOCK_PARAMS = (
    "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.bo",
    "ln2.gain", "ln2.bias", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
)


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 40
    model_dim: int = 32
    n_blocks: int = 12
    n_heads: int = 4
    mlp_dim: int = 64
    seed: int = 0
    # fixed log-mel normalization applied before the input projection
    feature_mean: float = -7.0
    feature_std: float = 5.0

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise DimensionError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if min(self.input_dim, self.model_dim, self.n_blocks, self.n_heads, self.mlp_dim) < 1:
            raise DimensionError("encoder dimensions must be positive")


def _init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, m = cfg.model_dim, cfg.mlp_dim

    def dense(fan_in, fan_out, scale=1.0):
        return rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out))

    params = {
        "frontend.weight": dense(cfg.input_dim, d),
        "frontend.bias": np.zeros(d),
    }
    for i in range(1, cfg.n_blocks + 1):
        p = f"blocks.{i}."
        params.update({
            p + "ln1.gain": np.ones(d),
            p + "ln1.bias": np.zeros(d),
            p + "attn.wq": dense(d, d),
            p + "attn.wk": dense(d, d),
            p + "attn.wv": dense(d, d),
            p + "attn.wo": dense(d, d, 0.5),
            p + "attn.bo": np.zeros(d),
            p + "ln2.gain": np.ones(d),
            p + "ln2.bias": np.zeros(d),
            p + "mlp.w1": dense(d, m),
            p + "mlp.b1": np.zeros(m),
            p + "mlp.w2": dense(m, d, 0.5),
            p + "mlp.b2": np.zeros(d),
        })
    return params


def _check_features(features, cfg: EncoderConfig) -> Tensor:
    x = ad.as_tensor(features)
    if x.ndim not in (2, 3) or x.shape[-1] != cfg.input_dim:
        raise DimensionError(
            f"expected features of shape (T, {cfg.input_dim}) or (B, T, {cfg.input_dim}), got {x.shape}"
        )
    return x


def _attention(x: Tensor, p: dict, prefix: str, n_heads: int) -> Tensor:
    *lead, t, d = x.shape
    dh = d // n_heads
    nl = len(lead)
    split = (*lead, t, n_heads, dh)
    heads_first = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    def project(name):
        return ad.transpose(ad.reshape(x @ p[prefix + name], split), heads_first)

    q, k, v = project("attn.wq"), project("attn.wk"), project("attn.wv")
    scores = (q * (1.0 / np.sqrt(dh))) @ ad.swapaxes(k, -1, -2)
    mixed = ad.softmax(scores, axis=-1) @ v
    merged = ad.reshape(ad.transpose(mixed, heads_first), (*lead, t, d))
    return merged @ p[prefix + "attn.wo"] + p[prefix + "attn.bo"]


def encoder_block(x: Tensor, p: dict, index: int, n_heads: int) -> Tensor:
    prefix = f"blocks.{index}."
    h = ad.layer_norm(x, p[prefix + "ln1.gain"], p[prefix + "ln1.bias"])
    x = x + _attention(h, p, prefix, n_heads)
    h = ad.layer_norm(x, p[prefix + "ln2.gain"], p[prefix + "ln2.bias"])
    h = ad.gelu(h @ p[prefix + "mlp.w1"] + p[prefix + "mlp.b1"])
    return x + (h @ p[prefix + "mlp.w2"] + p[prefix + "mlp.b2"])


def encode(features, params: dict, cfg: EncoderConfig, n_blocks: int | None = None) -> list[Tensor]:
    """Hidden states after each block (index 0 is block 1)."""
    x = _check_features(features, cfg)
    x = (x - cfg.feature_mean) * (1.0 / cfg.feature_std)
    x = x @ params["frontend.weight"] + params["frontend.bias"]
    states = []
    for i in range(1, (n_blocks or cfg.n_blocks) + 1):
        x = encoder_block(x, params, i, cfg.n_heads)
        states.append(x)
    return states


class TeacherModel:
    """Frozen randomly initialized encoder; exposes hidden states 4, 8 and 12."""

    def __init__(self, config: EncoderConfig = EncoderConfig(), params: dict | None = None):
        if config.n_blocks < max(TEACHER_LAYERS):
            raise DimensionError(f"teacher needs at least {max(TEACHER_LAYERS)} blocks")
        self.config = config
        if params is None:
            params = _init_encoder(config, np.random.default_rng([config.seed, 1]))
        self._arrays = {}
        for name, value in params.items():
            arr = np.array(value, dtype=np.float64)
            arr.setflags(write=False)
            self._arrays[name] = arr
        self._tensors = {name: ad.constant(arr) for name, arr in self._arrays.items()}

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self._arrays

    def hidden_states(self, features) -> list[np.ndarray]:
        return [h.data for h in encode(features, self._tensors, self.config)]

    def forward(self, features) -> dict[int, np.ndarray]:
        """{4: h4, 8: h8, 12: h12}, each shaped like the input frames x model_dim."""
        states = self.hidden_states(features)
        return {layer: states[layer - 1] for layer in TEACHER_LAYERS}

    def targets(self, features) -> np.ndarray:
        """Teacher layers stacked on the head axis: (P, T, D) or (B, P, T, D)."""
        out = self.forward(features)
        return np.stack([out[layer] for layer in TEACHER_LAYERS], axis=-3)

    __call__ = forward

    def embed(self, features) -> np.ndarray:
        """Last hidden state."""
        return self.hidden_states(features)[-1]

    def save(self, path) -> None:
        save_checkpoint(path, self._arrays, {"role": "teacher", **asdict(self.config)})

    @classmethod
    def load(cls, path) -> "TeacherModel":
        meta, params = load_checkpoint(path)
        return cls(_config_from_meta(meta, "teacher"), params)


class StudentModel:
    """2-block encoder with one linear prediction head per teacher layer."""

    def __init__(
        self,
        config: EncoderConfig = EncoderConfig(n_blocks=2),
        params: dict | None = None,
        head_init: str = "uniform",
        head_seed=None,
    ):
        self.config = config
        if params is None:
            params = _init_encoder(config, np.random.default_rng([config.seed, 2]))
            params.update(_init_heads(config.model_dim, head_init, head_seed if head_seed is not None else config.seed))
        missing = [n for n in _student_param_names(config) if n not in params]
        if missing:
            raise CheckpointError(f"student parameters missing: {missing[:3]}")
        self.params = {
            name: Tensor(params[name], requires_grad=True) for name in _student_param_names(config)
        }

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def forward(self, features) -> tuple[Tensor, Tensor]:
        """(z, H_hat): last hidden state and stacked head predictions (P on axis -3)."""
        z = encode(features, self.params, self.config)[-1]
        heads = [z @ self.params[f"heads.{l}.weight"] + self.params[f"heads.{l}.bias"] for l in TEACHER_LAYERS]
        return z, ad.stack(heads, axis=-3)

    __call__ = forward

    def embed(self, features) -> np.ndarray:
        """Last hidden state as a plain array (no tape)."""
        return encode(features, {k: ad.constant(v.data) for k, v in self.params.items()}, self.config)[-1].data

    def save(self, path) -> None:
        save_checkpoint(path, self.named_arrays(), {"role": "student", **asdict(self.config)})

    @classmethod
    def load(cls, path) -> "StudentModel":
        meta, params = load_checkpoint(path)
        return cls(_config_from_meta(meta, "student"), params)


def _student_param_names(cfg: EncoderConfig) -> list[str]:
    names = ["frontend.weight", "frontend.bias"]
    for i in range(1, cfg.n_blocks + 1):
        names += [f"blocks.{i}.{n}" for n in _BLOCK_PARAMS]
    for layer in TEACHER_LAYERS:
        names += [f"heads.{layer}.weight", f"heads.{layer}.bias"]
    return names


def _init_heads(d: int, mode: str, seed) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([int(seed), 3])
    out = {}
    for layer in TEACHER_LAYERS:
        if mode == "identity":
            out[f"heads.{layer}.weight"] = np.eye(d)
            out[f"heads.{layer}.bias"] = np.zeros(d)
        elif mode == "uniform":
            bound = 1.0 / np.sqrt(d)
            out[f"heads.{layer}.weight"] = rng.uniform(-bound, bound, size=(d, d))
            out[f"heads.{layer}.bias"] = rng.uniform(-bound, bound, size=d)
        else:
            raise ValueError(f"unknown head init {mode!r}")
    return out


def init_student_from_teacher(
    teacher: TeacherModel, n_blocks: int = 2, head_init: str = "uniform", seed=0
) -> StudentModel:
    """Copy the teacher's frontend and first blocks; heads are freshly initialized."""
    cfg = replace(teacher.config, n_blocks=n_blocks, seed=int(seed))
    if n_blocks > teacher.config.n_blocks:
        raise DimensionError("student cannot have more blocks than the teacher")
    params = {name: teacher.params[name].copy() for name in _student_param_names(cfg) if not name.startswith("heads.")}
    params.update(_init_heads(cfg.model_dim, head_init, seed))
    return StudentModel(cfg, params)


# ---------------------------------------------------------------- checkpoints

MANIFEST = "manifest.txt"
BLOB = "params.bin"
_CONFIG_INT = ("input_dim", "model_dim", "n_blocks", "n_heads", "mlp_dim", "seed")
_CONFIG_FLOAT = ("feature_mean", "feature_std")


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict) -> Path:
    """Write ``manifest.txt`` (names, shapes, offsets) and ``params.bin`` (raw <f8)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = ["# corrdistill checkpoint v1"]
    lines += [f"meta {key} {value!r}" if isinstance(value, float) else f"meta {key} {value}" for key, value in meta.items()]
    offset = 0
    chunks = []
    for name, arr in params.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        shape = "x".join(str(n) for n in data.shape) or "scalar"
        lines.append(f"tensor {name} {shape} float64-le {offset} {data.nbytes}")
        chunks.append(data.tobytes())
        offset += data.nbytes
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        manifest = (path / MANIFEST).read_text().splitlines()
        blob = (path / BLOB).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint at {path}: {exc}") from None
    meta: dict = {}
    params: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(manifest, 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "meta" and len(parts) == 3:
            meta[parts[1]] = parts[2]
        elif parts[0] == "tensor" and len(parts) == 6:
            _, name, shape, dtype, offset, nbytes = parts
            if dtype != "float64-le":
                raise CheckpointError(f"{path}:{lineno}: unsupported dtype {dtype}")
            dims = () if shape == "scalar" else tuple(int(n) for n in shape.split("x"))
            offset, nbytes = int(offset), int(nbytes)
            if nbytes != 8 * int(np.prod(dims)) or offset + nbytes > len(blob):
                raise CheckpointError(f"{path}:{lineno}: tensor {name} does not fit the blob")
            params[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset).reshape(dims).copy()
        else:
            raise CheckpointError(f"{path}:{lineno}: malformed manifest line {line!r}")
    return meta, params


def _config_from_meta(meta: dict, role: str) -> EncoderConfig:
    if meta.get("role") != role:
        raise CheckpointError(f"checkpoint holds a {meta.get('role')!r} model, expected {role!r}")
    try:
        kwargs = {k: int(meta[k]) for k in _CONFIG_INT}
        kwargs.update({k: float(meta[k]) for k in _CONFIG_FLOAT})
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint manifest lacks encoder config ({exc})") from None
    return EncoderConfig(**kwargs)
