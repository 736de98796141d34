import numpy as np
import pytest

from prosody_tts.config import SyntheticSpec, tiny_model_config
from prosody_tts.corpus import SyntheticWorld
from prosody_tts.prosody import normalize_global


def tiny_items(model_config=None, n=4, seed=7):
    """``n`` rendered utterances as training tuples, sized to ``model_config``."""
    cfg = model_config or tiny_model_config()
    world = SyntheticWorld(SyntheticSpec(n_speakers=cfg.n_speakers, n_styles=cfg.n_styles, n_phones=cfg.n_phones,
                                         n_mels=cfg.n_mels, seed=seed))
    utts = [world.make_utterance(str(i), world.sample_text(1, i), i % 2, i % cfg.n_styles if i % 2 == 0 else 0)
            for i in range(n)]
    _, normed = normalize_global({u.utt_id: u.oracle for u in utts})
    return [(u.phones, u.speaker, u.style, u.mel, normed[u.utt_id]) for u in utts]


@pytest.fixture
def items():
    return tiny_items()


def same_params(a, b, names=None):
    names = names if names is not None else a.names()
    return all(np.array_equal(a[n].data, b[n].data) for n in names)
