import numpy as np
import pytest

from cagesplat.cage import bind_weights, cage_for_scene, extract_cage_labels
from cagesplat.nn import TrainConfig, build_model, cosine_lr, forward_batch, train
from cagesplat.nn.model import save_checkpoint, load_checkpoint
from cagesplat.scene import init_proxy_from_mesh, make_box_mesh
from cagesplat.sensor import DeformationState, MotionSequence, SensorFrame, generate_dataset


def toy_sequence(n_frames=24, n_nodes=27, seed=0, linear=True, sample_hz=250.0):
    """Labels are a low-rank linear map of the sensor grid (a few scalar
    drive signals times fixed node fields), the linear analogue of the
    actuation task; exactly learnable."""
    rng = np.random.default_rng(seed)
    side = round(n_nodes ** (1 / 3))
    grid_pos = np.stack(np.meshgrid(*[np.linspace(0, 1, side)] * 3,
                                    indexing="ij"), -1).reshape(-1, 3)
    # fields affine in node position, as cage fields are smooth in space
    coef = rng.normal(0, 0.4, (3, 4, 3))                # drive x (1+pos) x xyz
    basis = np.concatenate([np.ones((n_nodes, 1)), grid_pos], axis=1)
    fields = np.einsum("kpc,np->knc", coef, basis)      # [3, n_nodes, 3]
    probes = rng.normal(0, 0.3, (3, 100))               # grid functionals
    frames, states = [], []
    labels = np.zeros((n_frames, n_nodes, 3), dtype=np.float32)
    gt = np.zeros((n_frames, 8, 3), dtype=np.float32)
    for t in range(n_frames):
        grid = rng.normal(0.0, 0.2, (10, 10))
        frames.append(SensorFrame(grid=grid, timestamp=t / sample_hz,
                                  units="relative"))
        states.append(DeformationState("bend", 0.1, 0.0,
                                       t / max(n_frames - 1, 1)))
        if linear:
            drive = probes @ grid.ravel()
            labels[t] = np.einsum("k,knc->nc", drive, fields)
        else:
            labels[t] = rng.normal(0, 0.1, (n_nodes, 3))
    return MotionSequence(frames=frames, states=states, gt=gt,
                          geometry_id="toy", mode="bend", sample_hz=sample_hz,
                          labels=labels)


@pytest.fixture(scope="module")
def toy_cage():
    return cage_for_scene(
        init_proxy_from_mesh(make_box_mesh((1, 1, 1)), 100, seed=0), (3, 3, 3))


def test_cosine_schedule_endpoints():
    assert cosine_lr(1e-3, 0, 100) == pytest.approx(1e-3)
    assert cosine_lr(1e-3, 99, 100) <= 0.01 * 1e-3


def test_toy_convergence(toy_cage):
    seq = toy_sequence(n_frames=40, seed=1)
    model = build_model((10, 10), toy_cage, seed=1)
    # 200 optimizer steps: 40 frames / batch 8 = 5 steps per epoch
    cfg = TrainConfig(epochs=40, lr0=1e-3, lambda_smooth=0.0, noise_std=0.0,
                      early_stop_patience=100, batch=8, seed=1)
    history = train(model, [seq], cfg, cage=toy_cage)
    first = history.epochs[0][1]
    last = history.epochs[-1][1]
    assert last < 0.1 * first, (first, last)


def test_training_monotone_after_warmup(toy_cage):
    seq = toy_sequence(n_frames=40, seed=2)
    model = build_model((10, 10), toy_cage, seed=2)
    cfg = TrainConfig(epochs=30, lr0=1e-3, lambda_smooth=0.0, noise_std=0.0,
                      early_stop_patience=100, batch=8, seed=2)
    history = train(model, [seq], cfg, cage=toy_cage)
    losses = [row[1] for row in history.epochs][2:]      # allow warm-up
    rises = sum(1 for a, b in zip(losses, losses[1:]) if b > a * 1.0001)
    assert rises <= max(1, int(0.05 * len(losses)) + 1), losses


def test_large_smoothness_flattens_time():
    # constant target field, held actuation, advancing clock: at lambda=1e3
    # the smoothness term must silence the time-embedding pathway so the
    # predictions become temporally constant (limit behavior); the trained
    # final state is inspected, not the best-validation snapshot
    from cagesplat.cage import build_cage
    from cagesplat.nn.train import prepare_sequences, _split
    from cagesplat.nn.model import cage_scale

    cage = build_cage((0, 0, 0), (1, 1, 1), (2, 2, 2))
    rng = np.random.default_rng(1)
    base = rng.normal(0, 0.2, (8, 3)).astype(np.float32)
    grid0 = rng.normal(0, 0.2, (10, 10))
    n_frames = 8
    frames, states = [], []
    labels = np.zeros((n_frames, 8, 3), dtype=np.float32)
    for t in range(n_frames):
        frames.append(SensorFrame(grid=grid0.copy(), timestamp=t / 250.0,
                                  units="relative"))
        states.append(DeformationState("bend", 0.1, 0.0, t / (n_frames - 1)))
        labels[t] = base
    seq = MotionSequence(frames=frames, states=states,
                         gt=np.zeros((n_frames, 4, 3), dtype=np.float32),
                         geometry_id="toy", mode="bend", sample_hz=250.0,
                         labels=labels)
    model = build_model((10, 10), cage, seed=1)
    cfg = TrainConfig(epochs=600, lr0=1e-3, lambda_smooth=1e3, noise_std=0.0,
                      early_stop_patience=100000, batch=n_frames,
                      val_fraction=0.12, seed=1, restore_best=False)
    train(model, [seq], cfg, cage=cage)
    prep = prepare_sequences([seq], cage_scale(cage))[0]
    trains, _ = _split([prep], 0.12, np.random.default_rng(0))
    preds = forward_batch(model, trains[0].inputs, trains[0].t_norms,
                          cage).data.reshape(-1, 8, 3)
    deltas = np.linalg.norm(np.diff(preds, axis=0), axis=2).max()
    norm = np.linalg.norm(preds.mean(axis=0))
    assert norm > 1e-3              # the constant field was actually learned
    assert deltas < 1e-3 * norm, (deltas, norm)


def test_training_determinism(toy_cage, tmp_path):
    seq = toy_sequence(n_frames=16, seed=4)
    cfg = TrainConfig(epochs=3, lr0=1e-3, batch=8, noise_std=0.02,
                      early_stop_patience=10, seed=7)
    outs = []
    for run in range(2):
        model = build_model((10, 10), toy_cage, seed=5)
        train(model, [toy_sequence(n_frames=16, seed=4)], cfg, cage=toy_cage)
        path = tmp_path / f"run{run}.cdnn"
        save_checkpoint(model, path)
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


def test_early_stop_on_plateau(toy_cage):
    # unlearnable random labels: validation loss plateaus and patience fires
    seq = toy_sequence(n_frames=60, seed=6, linear=False)
    model = build_model((10, 10), toy_cage, seed=6)
    cfg = TrainConfig(epochs=200, lr0=3e-4, lambda_smooth=0.0, noise_std=0.0,
                      early_stop_patience=4, batch=16, seed=6)
    history = train(model, [seq], cfg, cage=toy_cage)
    assert history.stopped_early
    assert len(history.epochs) < 200


def test_missing_labels_rejected(toy_cage):
    seq = toy_sequence(n_frames=8, seed=8)
    seq.labels = None
    model = build_model((10, 10), toy_cage, seed=8)
    cfg = TrainConfig(epochs=1, batch=4)
    with pytest.raises(Exception, match="label"):
        train(model, [seq], cfg, cage=toy_cage)


def test_history_csv(tmp_path, toy_cage):
    seq = toy_sequence(n_frames=8, seed=9)
    model = build_model((10, 10), toy_cage, seed=9)
    cfg = TrainConfig(epochs=2, batch=4, seed=9)
    train(model, [seq], cfg, cage=toy_cage,
          history_path=tmp_path / "history.csv")
    rows = (tmp_path / "history.csv").read_text().strip().splitlines()
    assert rows[0] == "epoch,train_loss,val_loss,lr"
    assert len(rows) == 3
