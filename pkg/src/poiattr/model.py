"""The attribution model: stay encoder, transformer encoder and prior head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .autodiff import Module, Tensor
from .domain import CategoryVocab, PoiCatalog
from .encoder import BIDIRECTIONAL, EncoderConfig, TransformerEncoder, extract_context
from .encoding import SequenceBatch, StayEncoder, make_sequence_batch
from .priorhead import PriorHead


@dataclass
class ModelConfig:
    d_space: int = 32
    d_time: int = 16
    d_cat: int = 32
    space_levels: int = 8
    min_wavelength: float = 10.0
    max_wavelength: float = 10_000.0
    layers: int = 2
    heads: int = 4
    d_ff: int = 256
    attention: str = BIDIRECTIONAL
    dropout: float = 0.1
    #: stays per encoder window; longer trajectories are windowed around the target
    max_seq_len: int = 64
    seed: int = 0

    @property
    def d_model(self):
        return self.d_space + 2 * self.d_time + self.d_cat

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.layers, self.heads, self.d_model, self.d_ff, self.attention, self.dropout)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class AttributionModel(Module):
    def __init__(self, vocab: CategoryVocab, cfg: ModelConfig = None):
        cfg = cfg or ModelConfig()
        rng = np.random.default_rng(cfg.seed)
        self.vocab = vocab
        self.cfg = cfg
        self.stay = StayEncoder(len(vocab), rng, cfg.d_space, cfg.d_time, cfg.d_cat,
                                cfg.space_levels, cfg.min_wavelength, cfg.max_wavelength)
        self.encoder = TransformerEncoder(cfg.encoder_config(), rng)
        self.prior = PriorHead(cfg.d_model, len(vocab), rng)

    def set_attention(self, mode):
        self.cfg.attention = mode
        self.encoder.cfg = self.cfg.encoder_config()

    def hidden(self, batch: SequenceBatch, rng=None) -> Tensor:
        tokens = self.stay(batch)
        return self.encoder(tokens, batch.key_mask, rng)

    def forward_log_prior(self, batch: SequenceBatch, rng=None) -> Tensor:
        """``(B, V)`` log-prior over categories for each example's target."""
        H = self.hidden(batch, rng)
        return self.prior(extract_context(H, batch.target))

    def log_priors(self, examples: Sequence, catalog: PoiCatalog, batch_size=64) -> np.ndarray:
        """Inference log-priors for ``(trajectory, target_index)`` pairs."""
        out = np.zeros((len(examples), len(self.vocab)))
        for s in range(0, len(examples), batch_size):
            chunk = examples[s : s + batch_size]
            batch = make_sequence_batch(chunk, catalog, self.cfg.max_seq_len)
            out[s : s + len(chunk)] = self.forward_log_prior(batch).data
        return out

    def log_prior(self, traj, target_index, catalog) -> np.ndarray:
        return self.log_priors([(traj, target_index)], catalog)[0]

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict):
        params = self.named_parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ValueError(f"parameter mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, p in params.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.data.shape}")
            p.data = np.array(state[k], dtype=np.float64)
