"""Shared fixtures: synthetic scenes at various sizes, reused per session."""

from __future__ import annotations

import numpy as np
import pytest

from halo.core_data import load_image
from halo.synthetic import SyntheticSceneSpec, make_synthetic_scene


@pytest.fixture(scope="session")
def small_scene(tmp_path_factory):
    """8 ring views + 1 closeup per category at 96x72; no training done."""
    root = tmp_path_factory.mktemp("scene_small") / "scene"
    spec = SyntheticSceneSpec(n_ring_views=8, closeups_per_category=1, seed=0)
    manifest = make_synthetic_scene(spec, root)
    return root, spec, manifest


@pytest.fixture(scope="session")
def small_scene_images(small_scene):
    root, spec, manifest = small_scene
    return {rec.id: load_image(rec) for rec in manifest.images}


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
