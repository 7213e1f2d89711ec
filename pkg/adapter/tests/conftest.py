from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from regionrank_adapter import AdapterConfig


def write_png(path: Path, width: int, height: int, seed: int) -> Path:
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, (height, width, 3), dtype=np.uint8)
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")
    return path


@pytest.fixture
def small_config(tmp_path):
    """Fast settings: 4x4 grid, 16 dims, output under tmp_path/out."""
    return AdapterConfig(
        output_dir=tmp_path / "out", grid_side=4, input_side=448, dim=16
    )


@pytest.fixture
def page_images(tmp_path):
    image_dir = tmp_path / "images"
    image_dir.mkdir()
    return [
        write_png(image_dir / f"page_{i:03d}.png", 120 + 8 * i, 75 + 5 * i, seed=i)
        for i in range(3)
    ]
