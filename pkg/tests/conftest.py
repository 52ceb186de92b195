import numpy as np
import pytest

from picovlm import tensor as T
from picovlm.encoder import EncoderConfig, select_layers
from picovlm.lm import LMConfig
from picovlm.model import VisionLanguageModel


def rng_for(seed):
    return np.random.default_rng(seed)


def micro_model(seed=0, dtype=T.HIGH, vocab=13, img=8, patch=4, d_v=8, enc_depth=2,
                d_l=8, lm_depth=2, heads=2, density=1.0, strategy="uniform",
                use_class_token=False, max_seq=12):
    """Smallest model that exercises every code path; float64 by default so
    it can be finite-difference checked."""
    enc_cfg = EncoderConfig(image_h=img, image_w=img, channels=3, patch_size=patch,
                            d_v=d_v, depth=enc_depth, heads=heads,
                            use_class_token=use_class_token)
    lm_cfg = LMConfig(vocab_size=vocab, d_l=d_l, depth=lm_depth, heads=heads,
                      max_seq=max_seq)
    selection = select_layers(enc_depth, lm_depth, density, strategy)
    return VisionLanguageModel(enc_cfg, lm_cfg, selection, seed=seed, dtype=dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
