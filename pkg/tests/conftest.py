import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dualcan import datagen, trainer
from dualcan.evaluation import ExperimentConfig

REFERENCE_CONFIG = Path(__file__).parent.parent / "configs" / "reference.ini"

# The pinned reference task: 3 Gaussian classes in 2-D, 200 instances per
# class per domain, 30-degree rotation shift, 40% mixed corruption.
REFERENCE_DOMAIN = datagen.DomainSpec(
    num_classes=3,
    feature_dim=2,
    samples_per_class=200,
    class_center_scale=2.0,
    class_spread=0.5,
    shift_rotation=0.5235987755982988,
    shift_translation=(0.0, 0.0),
    seed=7,
)
REFERENCE_NOISE = datagen.NoiseSpec(
    p_noise=0.4,
    kind=datagen.MIXED,
    feature_noise_sigma=0.75,
    feature_mask_fraction=0.0,
    seed=11,
)
REFERENCE_TRAIN = trainer.TrainConfig(max_epochs=90, warmup_epochs=10, seed=3)
REFERENCE_SEEDS = [0, 1, 2, 3, 4]


def reference_experiment() -> ExperimentConfig:
    return ExperimentConfig(REFERENCE_DOMAIN, REFERENCE_NOISE, REFERENCE_TRAIN)


@pytest.fixture(scope="session")
def reference_task():
    source, target = datagen.make_domain_pair(REFERENCE_DOMAIN)
    source = datagen.corrupt(source, REFERENCE_NOISE)
    return source, target
