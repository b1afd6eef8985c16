from types import SimpleNamespace

import pytest

from keymotion import repro
from keymotion import synthdata as S
from keymotion import trainer


@pytest.fixture(scope="session")
def training_cache():
    """Shared store for the full-size training runs the acceptance
    tests evaluate.  Honors KEYMOTION_CACHE; repeated sessions (and
    `python3 -m keymotion.repro`) reuse finished runs instead of
    retraining."""
    return repro.TrainingCache()


@pytest.fixture(scope="session")
def tiny_world(tmp_path_factory):
    """A 32px dataset plus a briefly trained model, shared by the
    integration-flavored tests.  Trains once per session (~20 s)."""
    root = tmp_path_factory.mktemp("world")
    spec = S.SynthSpec(seed=11, num_videos=3, frames_per_video=3, size=32)
    data_dir = root / "data"
    S.generate_dataset(spec, data_dir)
    dataset = S.Dataset(data_dir)
    config = trainer.TrainConfig(k=2, epochs=2, batch_size=8, seed=11,
                                 image_size=32, dtype="float32",
                                 checkpoint_every=1)
    epochs_seen = []
    out = root / "run"
    final = trainer.run_training(config, dataset, out,
                                 log=lambda e, s, r: epochs_seen.append(e))
    models, _ = trainer.load_models(final)
    return SimpleNamespace(root=root, data_dir=data_dir, dataset=dataset,
                           spec=spec, config=config, out=out, final=final,
                           models=models, epochs_seen=epochs_seen)
