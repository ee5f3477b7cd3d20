"""Model / loss / decoding configuration and the flat `key = value` file format."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Dimensions of the encoder/decoder stack.

    num_experts == 0 means ordinary dense FFNs; otherwise every FFN slot is a
    mixture of `num_experts` expert FFNs with `topk` active per frame.
    """

    m_layers: int
    n_dec_layers: int
    d_att: int
    d_ff: int
    vocab: int
    heads: int = 8
    cnn_kernel: int = 15
    num_experts: int = 0
    topk: int = 2
    subsample_factor: int = 8  # three stride-2 convs; fixed

    def __post_init__(self):
        if min(self.m_layers, self.n_dec_layers, self.d_att, self.d_ff,
               self.vocab, self.heads, self.cnn_kernel) < 1:
            raise ConfigError("all model dimensions must be >= 1")
        if self.d_att % self.heads != 0:
            raise ConfigError(f"d_att={self.d_att} not divisible by heads={self.heads}")
        if self.num_experts != 0 and not (self.num_experts >= self.topk >= 1):
            raise ConfigError(
                f"need num_experts >= topk >= 1, got E={self.num_experts} K={self.topk}")
        if self.subsample_factor != 8:
            raise ConfigError("subsample_factor is fixed at 8")

    @property
    def is_moe(self) -> bool:
        return self.num_experts > 0

    @property
    def blank_id(self) -> int:
        return 0

    @property
    def sos_eos_id(self) -> int:
        return self.vocab - 1


@dataclass
class ChunkPolicy:
    """How the chunk size C is chosen for attention masking.

    mode "full" always uses the whole sequence; "fixed" uses `chunk_size`;
    "dynamic" samples C per batch (full with probability p_full, else uniform
    on [1, min(T', chunk_cap)]).
    """

    mode: str = "full"
    chunk_size: int = 0
    p_full: float = 0.5
    chunk_cap: int = 25

    def __post_init__(self):
        if self.mode not in ("full", "fixed", "dynamic"):
            raise ConfigError(f"unknown chunk mode {self.mode!r}")
        if self.mode == "fixed" and self.chunk_size < 1:
            raise ConfigError("fixed chunk mode needs chunk_size >= 1")
        if not 0.0 <= self.p_full <= 1.0:
            raise ConfigError("p_full must be in [0, 1]")


@dataclass
class LossWeights:
    """Mixing weights of the joint objective: lam balances CTC vs attention,
    alpha balances the right-to-left vs left-to-right decoder terms."""

    lam: float = 0.3
    alpha: float = 0.3

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0 and 0.0 <= self.alpha <= 1.0):
            raise ConfigError("loss weights must lie in [0, 1]")


@dataclass
class RescoreWeights:
    ctc_weight: float = 0.5
    reverse_weight: float = 0.3

    def __post_init__(self):
        if self.ctc_weight < 0:
            raise ConfigError("ctc_weight must be >= 0")
        if not 0.0 <= self.reverse_weight <= 1.0:
            raise ConfigError("reverse_weight must be in [0, 1]")


@dataclass
class RunConfig:
    model: ModelConfig
    loss: LossWeights = field(default_factory=LossWeights)
    rescore: RescoreWeights = field(default_factory=RescoreWeights)
    p_full_chunk: float = 0.5
    chunk_cap: int = 25

    def dynamic_policy(self) -> ChunkPolicy:
        return ChunkPolicy(mode="dynamic", p_full=self.p_full_chunk,
                           chunk_cap=self.chunk_cap)


_INT_KEYS = {"m_layers", "n_dec_layers", "d_att", "d_ff", "heads", "cnn_kernel",
             "num_experts", "topk", "vocab", "chunk_cap"}
_FLOAT_KEYS = {"p_full_chunk", "lambda", "alpha", "reverse_weight", "ctc_weight"}
_REQUIRED = {"m_layers", "n_dec_layers", "d_att", "d_ff", "vocab"}


def load_config(path) -> RunConfig:
    """Parse a flat UTF-8 `key = value` file. Unknown keys are errors; blank
    lines and `#` comments are allowed."""
    raw: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in stripped.split("=", 1))
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = val

    unknown = set(raw) - _INT_KEYS - _FLOAT_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    missing = _REQUIRED - set(raw)
    if missing:
        raise ConfigError(f"{path}: missing required keys {sorted(missing)}")

    vals: dict[str, float] = {}
    for key, sval in raw.items():
        try:
            vals[key] = int(sval) if key in _INT_KEYS else float(sval)
        except ValueError as exc:
            raise ConfigError(f"{path}: bad value for {key!r}: {sval!r}") from exc

    model_keys = {f.name for f in fields(ModelConfig)} & set(vals)
    model = ModelConfig(**{k: vals[k] for k in model_keys})
    loss = LossWeights(lam=vals.get("lambda", 0.3), alpha=vals.get("alpha", 0.3))
    rescore = RescoreWeights(ctc_weight=vals.get("ctc_weight", 0.5),
                             reverse_weight=vals.get("reverse_weight", 0.3))
    return RunConfig(model=model, loss=loss, rescore=rescore,
                     p_full_chunk=vals.get("p_full_chunk", 0.5),
                     chunk_cap=int(vals.get("chunk_cap", 25)))


def save_config(cfg: RunConfig, path) -> None:
    m = cfg.model
    lines = [
        f"m_layers = {m.m_layers}",
        f"n_dec_layers = {m.n_dec_layers}",
        f"d_att = {m.d_att}",
        f"d_ff = {m.d_ff}",
        f"heads = {m.heads}",
        f"cnn_kernel = {m.cnn_kernel}",
        f"num_experts = {m.num_experts}",
        f"topk = {m.topk}",
        f"vocab = {m.vocab}",
        f"p_full_chunk = {cfg.p_full_chunk}",
        f"chunk_cap = {cfg.chunk_cap}",
        f"lambda = {cfg.loss.lam}",
        f"alpha = {cfg.loss.alpha}",
        f"reverse_weight = {cfg.rescore.reverse_weight}",
        f"ctc_weight = {cfg.rescore.ctc_weight}",
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
