"""Model configuration and loss weights.

Configuration files are flat ``key = value`` text, one key per line, ``#``
starts a comment.  Every field of :class:`ModelConfig` and :class:`LossWeights`
is addressable by its bare name; unknown keys are a hard error.  Environment
variables ``ALIGNREC_<KEY>`` (upper-case) override file values.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

ENV_PREFIX = "ALIGNREC_"

SUMMARY_DIM = 8


@dataclass
class LossWeights:
    lambda_m: float = 0.5
    lambda_r: float = 0.1
    lambda_s: float = 0.1
    lambda_ewc: float = 0.01
    lambda_e: float = 0.0
    lambda_f: float = 1.0
    sigma_sq: float = 1.0
    delta: float = 0.05

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if v != v or v in (float("inf"), float("-inf")):
                raise ConfigError(f"{f.name} must be finite, got {v}")
        for name in ("lambda_m", "lambda_r", "lambda_s", "lambda_ewc", "lambda_e", "lambda_f"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.sigma_sq <= 0:
            raise ConfigError("sigma_sq must be positive")


@dataclass
class ModelConfig:
    # dimensions
    d: int = 256
    d_s: int = SUMMARY_DIM
    d_t: int = 256
    d_vis: int = 512
    d_aud: int = 768
    d_ell: int = 256           # must be >= d
    hidden: int = 256          # hidden width of projector/decoder/encoder MLPs
    adapter_hidden: int = 0    # 0 -> same as d (adapter is d+d_s -> d -> d)
    # prompt
    E: int = 16
    L: int = 50
    C: int = 100
    k: int = 8
    m_attr: int = 4
    # streaming
    window_mode: str = "events"   # "events" or "seconds"
    window_size: float = 500
    replay_capacity: int = 1024
    replay_sample: int = 512
    ema_decay: float = 0.99
    serve_ema: bool = True
    shared_adapter: bool = True
    fisher_samples: int = 64
    online_epochs: int = 1
    # optimisation
    lr_adapter: float = 1e-3
    lr_proj: float = 5e-4
    lr_base: float = 1e-3      # offline fusion weights
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 256
    epochs: int = 5
    tau: float = 0.1
    # components
    use_multimodal: bool = True
    use_text: bool = True
    use_evidence: bool = True
    audio_pairs: bool = True
    faith_mode: str = "prose"     # "prose" or "formula"
    modality_dropout: float = 0.0
    # evaluation
    n_negatives: int = 99
    full_catalog: bool = False
    cold_threshold: int = 5
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def adapter_width(self) -> int:
        return self.adapter_hidden or self.d

    def validate(self) -> "ModelConfig":
        # keep float fields float so serialized configs round-trip exactly
        for f in fields(self):
            if f.type in ("float", float) and isinstance(getattr(self, f.name), int):
                setattr(self, f.name, float(getattr(self, f.name)))
        for name in ("d", "d_s", "d_t", "d_vis", "d_aud", "d_ell", "hidden", "C", "k",
                     "replay_capacity", "batch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_s != SUMMARY_DIM:
            raise ConfigError(f"d_s is fixed by the window-summary schema at {SUMMARY_DIM}")
        if not 0 <= self.E <= 32:
            raise ConfigError("E must be in [0, 32]")
        if self.L < 0:
            raise ConfigError("L must be non-negative")
        if self.d_ell < self.d:
            raise ConfigError("d_ell must be >= d")
        if self.window_mode not in ("events", "seconds"):
            raise ConfigError("window_mode must be 'events' or 'seconds'")
        if self.window_size <= 0:
            raise ConfigError("window_size must be positive")
        if self.faith_mode not in ("prose", "formula"):
            raise ConfigError("faith_mode must be 'prose' or 'formula'")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must be in [0, 1]")
        if not 0.0 <= self.modality_dropout < 1.0:
            raise ConfigError("modality_dropout must be in [0, 1)")
        self.weights.validate()
        return self

    def replace(self, **changes: Any) -> "ModelConfig":
        """Copy with ``changes``; loss-weight names are routed to ``weights``."""
        wkeys = {f.name for f in fields(LossWeights)}
        wchanges = {k: changes.pop(k) for k in list(changes) if k in wkeys}
        cfg = dataclasses.replace(self, **changes)
        cfg.weights = dataclasses.replace(self.weights, **wchanges)
        return cfg.validate()

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "weights"}
        out.update(dataclasses.asdict(self.weights))
        return out

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ModelConfig":
        cfg = cls()
        known = _field_types()
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cfg.replace(**{k: _coerce(k, v, known[k]) for k, v in values.items()})

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def loads(cls, text: str) -> "ModelConfig":
        return cls.from_dict(parse_kv(text))

    @classmethod
    def load(cls, path: str | os.PathLike | None = None,
             environ: Mapping[str, str] | None = None) -> "ModelConfig":
        values: dict[str, Any] = {}
        if path is not None:
            values.update(parse_kv(Path(path).read_text(encoding="utf-8"), source=str(path)))
        values.update(env_overrides(environ if environ is not None else os.environ))
        return cls.from_dict(values)


def _field_types() -> dict[str, type]:
    types = {f.name: f.type for f in fields(ModelConfig) if f.name != "weights"}
    types.update({f.name: f.type for f in fields(LossWeights)})
    # annotations are strings under ``from __future__ import annotations``
    return {k: {"int": int, "float": float, "bool": bool, "str": str}[t] if isinstance(t, str) else t
            for k, t in types.items()}


def _coerce(key: str, value: Any, typ: type) -> Any:
    if not isinstance(value, str):
        if typ is float and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
            return value
        raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}")
    text = value.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def env_overrides(environ: Mapping[str, str]) -> dict[str, str]:
    known = _field_types()
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):]
        match = [k for k in known if k.upper() == key.upper()]
        if not match:
            raise ConfigError(f"unknown config key in environment: {name}")
        out[match[0]] = value
    return out
