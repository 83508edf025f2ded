import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sola.data import BlendRecipe, generate_dataset, make_source_images


@pytest.fixture(scope="session")
def micro_train_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro_train")
    sources = make_source_images(3, seed=501)
    generate_dataset(sources, BlendRecipe(), n_real=6, n_fake=6, seed=502, out_dir=out)
    return out


@pytest.fixture(scope="session")
def micro_eval_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro_eval")
    sources = make_source_images(3, seed=503)
    generate_dataset(sources, BlendRecipe(), n_real=4, n_fake=4, seed=504, out_dir=out)
    return out
