import numpy as np
import pytest

from skysplat import pipeline
from skysplat.fixtures import generate_scene


@pytest.fixture(scope="session")
def small_scene_dir(tmp_path_factory):
    """Shared 12-frame 2-person scene used by stage-level tests."""
    out = tmp_path_factory.mktemp("scene")
    generate_scene(out, seed=3, n_frames=12, n_people=2)
    return out


@pytest.fixture(scope="session")
def small_scene(small_scene_dir):
    return pipeline.load_scene(small_scene_dir / "manifest.json")


@pytest.fixture(scope="session")
def small_stages(small_scene, tmp_path_factory):
    """Refined tracks + mesh + scale + placement for the shared scene."""
    wd = tmp_path_factory.mktemp("stages")
    refined = pipeline.stage_refine(small_scene, wd)
    mesh = pipeline.stage_recon(small_scene, wd)
    rep = pipeline.stage_scale(small_scene, refined, wd)
    placement = pipeline.stage_place(small_scene, refined, mesh,
                                     rep["sigma"], wd)
    return {"workdir": wd, "refined": refined, "mesh": mesh,
            "scale": rep, "placement": placement}


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
