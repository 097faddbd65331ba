"""Model hyperparameters and named presets."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    n_enc_blocks: int = 4
    n_heads: int = 4
    n_dec_blocks: int = 4
    n_cls_layers: int = 2
    n_cls_heads: int = 4
    patch_samples: int = 300
    max_tokens: int = 960
    spec_bins: int = 32
    dropout_rate: float = 0.1
    mlp_ratio: int = 4
    # "raw": the patch projection sees samples; "logspec": a fixed log power
    # spectrum of each patch (see nn.tokens.token_features)
    token_features: str = "raw"
    logspec_fmax_hz: float = 1.5
    logspec_bins: int = 150
    resp_hz: float = 10.0

    def __post_init__(self):
        for name in ("embed_dim", "n_heads", "n_cls_heads", "patch_samples", "max_tokens", "spec_bins"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("n_enc_blocks", "n_dec_blocks", "n_cls_layers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.embed_dim % self.n_heads or self.embed_dim % self.n_cls_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by head counts")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.token_features not in ("raw", "logspec"):
            raise ConfigError(f"unknown token_features {self.token_features!r}")

    @property
    def token_dim(self) -> int:
        """Width of the vector fed to the patch projection."""
        return self.patch_samples if self.token_features == "raw" else self.logspec_bins

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, s: str) -> "ModelConfig":
        return cls.from_dict(json.loads(s))

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


PRESETS = {
    # gradient-check scale
    "tiny": ModelConfig(embed_dim=16, n_enc_blocks=2, n_heads=2, n_dec_blocks=2, n_cls_layers=1,
                        n_cls_heads=2, patch_samples=20, max_tokens=8, spec_bins=8, dropout_rate=0.0),
    # single-CPU scale: 5 min tokens over a night, each decoding ten 30 s windows of 32 bands
    "desk": ModelConfig(embed_dim=64, n_enc_blocks=4, n_heads=4, n_dec_blocks=4, n_cls_layers=2,
                        n_cls_heads=4, patch_samples=3000, max_tokens=120, spec_bins=320,
                        dropout_rate=0.1, token_features="logspec"),
    "paper": ModelConfig(embed_dim=768, n_enc_blocks=8, n_heads=8, n_dec_blocks=8, n_cls_layers=4,
                         n_cls_heads=4, patch_samples=300, max_tokens=1200, spec_bins=32,
                         dropout_rate=0.1),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
