"""Run configuration: `key = value` files with command-line overrides.

The fully resolved config is echoed to `<outdir>/resolved_config.txt`
before any work; that echo is itself a valid config file, so a run is
reproducible from it alone.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import SegmentSpec
from .model import ModelConfig
from .synth import CouplingSpec
from .train import TrainConfig


class ConfigError(ValueError):
    """Bad key, bad value, or unreadable config file."""


@dataclass
class RunConfig:
    # run-wide
    outdir: str = "out"
    seed: int = 0
    workers: int = 0              # 0 -> available cores
    # inputs
    atlas: str = ""
    manifest: str = ""
    checkpoint: str = ""
    # segments and patches
    segment_len: int = 64
    patch_t: int = 16
    patch_c: int = 16
    segments_per_recording: int = 10
    # model
    d_emb: int = 128
    enc_layers: int = 4
    dec_layers: int = 2
    heads: int = 6
    d_mlp: int = 256
    max_tokens: int = 512
    decoder: str = "cross"
    mask_mode: str = "network"
    dropout: float = 0.0
    precision: str = "float32"
    # optimization
    epochs: int = 50
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup_frac: float = 0.1
    stable_frac: float = 0.6
    decay_frac: float = 0.3
    weight_decay: float = 0.01
    patience: int = 10
    random_mask_count: int = 0    # 0 -> mean network mask size
    finetune_epochs: int = 40
    finetune_lr: float = 5e-4
    frozen_encoder: bool = False
    # synthetic cohort
    parcels_per_network: str = "16,32,48,16,32,16,32"
    coupling_diag: float = 0.3
    coupling_default: float = 0.0
    coupling_set: str = ""        # "src:tgt:value" triples, comma-separated
    coupling_set_cn: str = ""
    coupling_set_mci: str = ""
    coupling_set_ad: str = ""
    noise_networks: str = ""      # networks with all-zero coupling rows/cols
    labels: str = "UNLABELED"
    subjects_per_class: int = 10
    sessions: int = 1
    t_total: int = 256
    noise_sd: float = 1.0
    lag: int = 1
    spectral_cap: float = 0.9
    mix_density: float = 0.5
    burn_in: int = 200
    # analysis
    top_k_heads: int = 12
    eval_split: str = "test"

    # -- parsing ----------------------------------------------------------

    @classmethod
    def field_types(cls) -> dict[str, type]:
        defaults = cls()
        return {f.name: type(getattr(defaults, f.name)) for f in fields(cls)}

    @classmethod
    def from_sources(cls, config_path: str | Path | None = None,
                     overrides: dict[str, str] | None = None) -> "RunConfig":
        cfg = cls()
        if config_path:
            path = Path(config_path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
                key, _, val = line.partition("=")
                cfg.set(key.strip(), val.strip())
        for key, val in (overrides or {}).items():
            cfg.set(key, val)
        return cfg

    def set(self, key: str, value: str) -> None:
        key = key.replace("-", "_")
        types = self.field_types()
        if key not in types:
            raise ConfigError(f"unknown config key: {key!r}")
        t = types[key]
        try:
            if t is bool:
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                parsed = value.lower() in ("true", "1")
            else:
                parsed = t(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
        setattr(self, key, parsed)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, outdir: Path) -> Path:
        outdir.mkdir(parents=True, exist_ok=True)
        path = outdir / "resolved_config.txt"
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    # -- derived module configs -------------------------------------------

    def segment_spec(self) -> SegmentSpec:
        return SegmentSpec(T=self.segment_len, P_t=self.patch_t, P_c=self.patch_c,
                           segments_per_recording=self.segments_per_recording)

    def model_config(self) -> ModelConfig:
        return ModelConfig(d_emb=self.d_emb, enc_layers=self.enc_layers,
                           dec_layers=self.dec_layers, heads=self.heads,
                           d_mlp=self.d_mlp, token_dim=self.patch_t * self.patch_c,
                           max_tokens=self.max_tokens, decoder_mode=self.decoder,
                           mask_mode=self.mask_mode, dropout=self.dropout,
                           dtype=self.precision)

    def train_config(self, seed: int, epochs: int | None = None,
                     peak_lr: float | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs if epochs is None else epochs,
            batch_size=self.batch_size,
            peak_lr=self.peak_lr if peak_lr is None else peak_lr,
            warmup_frac=self.warmup_frac, stable_frac=self.stable_frac,
            decay_frac=self.decay_frac, weight_decay=self.weight_decay,
            mask_mode=self.mask_mode,
            random_mask_count=self.random_mask_count or None,
            seed=seed, patience=self.patience)

    def parcel_list(self) -> list[int]:
        try:
            return [int(v) for v in self.parcels_per_network.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad parcels_per_network: "
                              f"{self.parcels_per_network!r}") from exc

    def label_list(self) -> list[str]:
        return [v.strip() for v in self.labels.split(",") if v.strip()]

    def _base_coupling(self, n: int) -> np.ndarray:
        g = np.full((n, n), self.coupling_default)
        np.fill_diagonal(g, self.coupling_diag)
        for net in _parse_int_list(self.noise_networks):
            if not 0 <= net < n:
                raise ConfigError(f"noise network {net} out of range")
            g[net, :] = 0.0
            g[:, net] = 0.0
        return g

    def coupling_spec(self) -> CouplingSpec:
        parcels = self.parcel_list()
        n = len(parcels)
        base = _apply_triples(self._base_coupling(n), self.coupling_set, n)
        profiles = {}
        for label, text in (("CN", self.coupling_set_cn),
                            ("MCI", self.coupling_set_mci),
                            ("AD", self.coupling_set_ad)):
            if text:
                profiles[label] = _apply_triples(base.copy(), text, n)
        return CouplingSpec(parcels_per_network=parcels, coupling=base,
                            noise_sd=self.noise_sd, lag=self.lag,
                            class_profiles=profiles or None,
                            spectral_cap=self.spectral_cap,
                            mix_density=self.mix_density, burn_in=self.burn_in)


def _parse_int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _apply_triples(g: np.ndarray, text: str, n: int) -> np.ndarray:
    for triple in text.split(","):
        triple = triple.strip()
        if not triple:
            continue
        parts = triple.split(":")
        if len(parts) != 3:
            raise ConfigError(f"bad coupling triple {triple!r}, want src:tgt:value")
        i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
        if not (0 <= i < n and 0 <= j < n):
            raise ConfigError(f"coupling triple {triple!r} out of range for {n} networks")
        g[i, j] = v
    return g
