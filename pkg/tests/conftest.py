import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fmseg import synthworld
from fmseg.numerics import seeded_rng, derive_seed


@pytest.fixture(scope="session")
def tiny_world():
    return synthworld.generate_world(4, 16, 16, 0.0, seed=11)


@pytest.fixture(scope="session")
def noisy_world():
    return synthworld.generate_world(4, 16, 16, 0.1, seed=11)


def make_scenes(world, count, prefix, canvas=32, seed=11):
    rng = seeded_rng(derive_seed(seed, f"scenes:{prefix}"))
    return [
        synthworld.random_halves_scene(f"{prefix}_{i:04d}", world.num_classes, canvas, rng)
        for i in range(count)
    ]


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_world):
    """sigma=0 exported dataset: 4 train + 2 eval scenes, 4x4 patch grid."""
    root = tmp_path_factory.mktemp("tiny_dataset")
    scenes = [(s, "train") for s in make_scenes(tiny_world, 4, "train")]
    scenes += [(s, "eval") for s in make_scenes(tiny_world, 2, "eval")]
    synthworld.export_dataset(tiny_world, root, scenes, (2, 2), 2)
    return root


def write_config(path: Path, dataset_root, output_dir, *, sigma=0.0, seed=7,
                 train_scenes=20, eval_scenes=5, epochs=60, lr0=0.5,
                 loss="tsupcon", head="linear", extra=""):
    path.write_text(f"""\
seed = {seed}

[paths]
dataset_root = "{dataset_root}"
output_dir = "{output_dir}"

[backend]
kind = "synthetic"

[backend.synthetic]
classes = 4
text_dim = 16
vision_dim = 16
sigma = {sigma}
train_scenes = {train_scenes}
eval_scenes = {eval_scenes}
canvas = 32
crop_grid = [2, 2]
patches_per_crop = 2

[train]
epochs = {epochs}
batch_size = 5
lr0 = {lr0}
loss = "{loss}"

[head]
variant = "{head}"
{extra}""", encoding="utf-8")
    return path


def random_unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)
