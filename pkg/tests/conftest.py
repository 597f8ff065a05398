import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_phantom_spec():
    from seqfuse.phantom import PhantomSpec
    return PhantomSpec(grid_shape=(12, 32, 32), spacing_mm=(2.0, 1.0, 1.0),
                       n_lesions_range=(1, 2), lesion_radius_range_mm=(2.5, 4.0),
                       n_distractors_range=(1, 2), n_artifacts_range=(1, 2), seed=11)


@pytest.fixture
def tiny_model_config():
    from seqfuse.fusenet import BackboneSpec, FusionConfig
    return FusionConfig(integration="input", n_seq=4, n_slices=5,
                        backbone=BackboneSpec(base_channels=4, n_stages=2,
                                              dilation_rates=(2,), split_stage=2))
