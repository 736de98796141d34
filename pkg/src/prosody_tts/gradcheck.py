"""End-to-end finite-difference check of the full training loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig, SyntheticSpec, TrainConfig
from .corpus import SyntheticWorld
from .model import ProsodyTTS, make_batch
from .prosody import normalize_global
from .tensor import grad_check_detailed

JITTER = 0.05


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_coordinates: int
    worst: dict
    groups: dict[str, float]     # max relative error per parameter group


def one_utterance_batch(model_config: ModelConfig, seed: int = 0):
    """A single rendered utterance sized to ``model_config``."""
    spec = SyntheticSpec(n_speakers=model_config.n_speakers, n_styles=model_config.n_styles,
                         n_phones=model_config.n_phones, n_mels=model_config.n_mels, min_phones=4,
                         max_phones=5, cells="0:0", seed=seed)
    world = SyntheticWorld(spec)
    utts = [world.make_utterance(str(i), world.sample_text(1, i), i % spec.n_speakers, i % spec.n_styles)
            for i in range(4)]
    stats, normed = normalize_global({u.utt_id: u.oracle for u in utts})
    u = utts[-1]
    return make_batch([(u.phones, u.speaker, u.style, u.mel, normed[u.utt_id])])


def model_grad_check(model_config: ModelConfig, train_config: TrainConfig | None = None,
                     n_samples: int = 240, seed: int = 0, eps: float = 1e-5,
                     dtype=np.float64) -> GradCheckResult:
    """Check d(total loss)/d(params) on one utterance, sampling every parameter tensor.

    Parameters get small Gaussian jitter first so no relu sits exactly on its
    kink (zero biases and the zero go-frame would put some there).
    """
    train_config = train_config or TrainConfig()
    model = ProsodyTTS(model_config, seed=seed)
    rng = np.random.default_rng(seed)
    for t in model.params.tensors.values():
        t.data = (t.data + rng.normal(0, JITTER, t.shape)).astype(t.data.dtype)
    batch = one_utterance_batch(model_config, seed)

    def loss():
        return model.forward_train(batch, train_config.alpha, train_config.beta)[1]

    records = grad_check_detailed(loss, model.params.tensors, eps=eps, n_samples=n_samples, seed=seed,
                                  dtype=dtype)
    groups: dict[str, float] = {}
    for r in records:
        g = model.params.group_of(r["name"])
        groups[g] = max(groups.get(g, 0.0), r["rel_error"])
    worst = max(records, key=lambda r: r["rel_error"])
    return GradCheckResult(worst["rel_error"], len(records), worst, groups)
