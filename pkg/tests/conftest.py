from __future__ import annotations

import numpy as np
import pytest

from bandsel.bench import all_combinations, build_table
from bandsel.evaluators import LiveClassificationEvaluator, LiveReconstructionEvaluator
from bandsel.synth import SynthConfig, gen_synth_classification, gen_synth_reconstruction

INFORMATIVE = (2, 9, 13)


@pytest.fixture(scope="session")
def cls_task():
    cube, labels, informative = gen_synth_classification(SynthConfig(informative=INFORMATIVE))
    return cube, labels, informative


@pytest.fixture(scope="session")
def cls_table(cls_task):
    cube, labels, _ = cls_task
    return build_table(LiveClassificationEvaluator(cube, labels), all_combinations(16, 3), [0, 1])


@pytest.fixture(scope="session")
def rec_cube():
    return gen_synth_reconstruction(SynthConfig(rank=3, noise=0.01))


@pytest.fixture(scope="session")
def rec_table(rec_cube):
    return build_table(LiveReconstructionEvaluator(rec_cube), all_combinations(16, 3), [0, 1])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
