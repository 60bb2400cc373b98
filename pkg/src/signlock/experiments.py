"""Glue between training runs and compression: evaluate a trained model after
replacing some of its weight matrices with compressed reconstructions."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .compress import CompressionPlan, compress_layer, template_for
from .errors import ConfigError
from .interventions import make_template
from .trainer.data import Dataset, make_dataset
from .trainer.loop import RunArtifacts
from .trainer.model import loss, weight_names


@dataclass
class CompressedEval:
    mode: str
    val_loss: float
    bpw_eff: float
    ranks: dict[str, int]
    rel_errors: dict[str, float]


def hidden_layers(art: RunArtifacts) -> list[str]:
    """Every weight matrix except the output head."""
    return weight_names(art.params)[:-1]


def _template_cfg(art: RunArtifacts, name: str):
    iv = art.config.interventions
    seed = art.config.seed if iv.template_seed is None else iv.template_seed
    cfg = template_for(name, art.params[name].shape, seed, iv.template_rank, iv.template_dist)
    if name in art.templates and not np.array_equal(make_template(*art.params[name].shape, cfg),
                                                    art.templates[name]):
        raise ConfigError(f"{name}: regenerated template does not match the run's")
    return cfg


def evaluate_compressed(art: RunArtifacts, mode: str, target_bpw: float = 0.25,
                        layers: list[str] | None = None, bits: int = 4,
                        precondition: str = "naive", data: Dataset | None = None) -> CompressedEval:
    """Validation loss with ``layers`` compressed; other parameters stay exact.

    ``template`` mode needs a run trained with hard projection onto its
    templates, since it stores magnitudes only.
    """
    layers = hidden_layers(art) if layers is None else list(layers)
    if mode == "template":
        missing = [k for k in layers if k not in art.templates]
        if missing or not art.config.interventions.hard_project:
            raise ConfigError(f"template mode needs hard-projected templates on {missing or layers}")
    elif mode != "raw":
        raise ConfigError(f"mode must be 'template' or 'raw', got {mode!r}")
    data = data or make_dataset(art.config.data, art.config.seed)
    plan = CompressionPlan(target_bpw=target_bpw, bits=bits, precondition=precondition)
    params = dict(art.params)
    bits_total = Fraction(0)
    count = 0
    ranks, errs = {}, {}
    for name in layers:
        W = art.params[name]
        tmpl = _template_cfg(art, name) if mode == "template" else None
        entry, W_hat = compress_layer(name, W, plan, mode, tmpl)
        params[name] = W_hat
        bits_total += entry["report"].bpw * W.size
        count += W.size
        ranks[name] = entry["factors"].rank
        errs[name] = float(np.linalg.norm(W - W_hat) / np.linalg.norm(W))
    return CompressedEval(mode, loss(params, data.X_val, data.y_val), float(bits_total / count),
                          ranks, errs)
