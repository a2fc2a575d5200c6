import numpy as np
import pytest

from pnnet import data, losses, model, trainer
from pnnet import tensor as T
from pnnet.errors import ConfigError, NonFiniteError


def smoke_cfg(**kw):
    base = dict(loss="softpn", descriptor_dim=32, conv1_channels=8, conv2_channels=16,
                triplets_per_epoch=256, epochs=1, seed=0, batch_size=64)
    base.update(kw)
    return trainer.TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    c = data.make_toy_corpus(data.ToyCorpusSpec(num_points=32, patches_per_point=8))
    c.normalized()
    return c


@pytest.fixture(scope="module")
def val():
    c = data.make_toy_corpus(data.ToyCorpusSpec(num_points=16, patches_per_point=4, seed=9))
    return trainer.ValidationSet(c, data.sample_pairs(c, 300, 0, 0.5))


def test_config_defaults_and_validation():
    cfg = trainer.TrainConfig()
    assert (cfg.batch_size, cfg.learning_rate, cfg.momentum, cfg.weight_decay) == (128, 0.1, 0.9, 1e-6)
    for bad in [dict(batch_size=0), dict(learning_rate=0), dict(momentum=1.0),
                dict(weight_decay=-1), dict(triplets_per_epoch=0), dict(loss="l2"),
                dict(pair_source="x")]:
        with pytest.raises(ConfigError):
            trainer.TrainConfig(**bad)


def test_hinge_uses_three_pairs_per_triplet():
    assert smoke_cfg(loss="hinge").examples_per_epoch == 3 * 256
    assert smoke_cfg().examples_per_epoch == 256


def test_read_config(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nloss = hinge\nepochs=3  # trailing\nsingle_thread = yes\n"
                    "weight_decay = 1e-5\nunknown_key = 1\n")
    cfg = trainer.TrainConfig.from_dict(trainer.read_config(path))
    assert (cfg.loss, cfg.epochs, cfg.single_thread, cfg.weight_decay) == ("hinge", 3, True, 1e-5)
    path.write_text("epochs 3\n")
    with pytest.raises(ConfigError, match=":1"):
        trainer.read_config(path)
    with pytest.raises(ConfigError):
        trainer.TrainConfig.from_dict({"epochs": "two"})


# -- optimizer -------------------------------------------------------------------------

def _params():
    return model.init_params(1, 4, (2, 2)).astype(np.float64)


def test_sgd_zero_gradient_is_identity():
    p = _params()
    before = p.copy()
    state = trainer.OptimizerState.zeros(p)
    trainer.sgd_step(p, p.zeros_like(), state, smoke_cfg(weight_decay=0))
    assert p == before


def test_sgd_plain_descent():
    p = _params()
    g = p.map(lambda t: np.ones_like(t))
    expected = p.map(lambda t: t - 0.1)
    trainer.sgd_step(p, g, trainer.OptimizerState.zeros(p),
                     smoke_cfg(momentum=0, weight_decay=0))
    for a, b in zip(p.tensors(), expected.tensors()):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_sgd_matches_scalar_recursion():
    # loss 0.5 * p^2 per coordinate, so grad = p
    cfg = smoke_cfg(learning_rate=0.3, momentum=0.5, weight_decay=0.01)
    p = _params()
    x0 = p.flatten()
    state = trainer.OptimizerState.zeros(p)
    for _ in range(2):
        trainer.sgd_step(p, p.copy(), state, cfg)
    v1 = x0 + 0.01 * x0
    x1 = x0 - 0.3 * v1
    v2 = 0.5 * v1 + x1 + 0.01 * x1
    x2 = x1 - 0.3 * v2
    np.testing.assert_allclose(p.flatten(), x2, rtol=1e-14)
    np.testing.assert_allclose(state.velocity.flatten(), v2, rtol=1e-14)


def test_weight_decay_shrinks_magnitudes():
    p = _params()
    state = trainer.OptimizerState.zeros(p)
    cfg = smoke_cfg(weight_decay=0.05)
    prev = np.abs(p.flatten())
    for _ in range(5):
        trainer.sgd_step(p, p.zeros_like(), state, cfg)
        cur = np.abs(p.flatten())
        assert np.all(cur <= prev)
        prev = cur


def test_sgd_aborts_on_nonfinite_gradient():
    p = _params()
    before = p.copy()
    g = p.zeros_like()
    g.fc_b[0] = np.nan
    with pytest.raises(NonFiniteError, match="fc_b"):
        trainer.sgd_step(p, g, trainer.OptimizerState.zeros(p), smoke_cfg())
    assert p == before


# -- objectives ------------------------------------------------------------------------

def test_triplet_objective_matches_separate_passes(corpus):
    params = model.init_params(0, 32, model.SMOKE_CHANNELS).astype(np.float64)
    x = corpus.normalized()[:12].astype(np.float64)
    x1, x2, xn = x[:4], x[4:8], x[8:]
    values, grads = trainer.triplet_objective(params, x1, x2, xn, "softpn")
    o1, o2, o3 = model.describe_triplet(params, x1, x2, xn)
    d = T.l2_distance(o1, o2), T.l2_distance(o1, o3), T.l2_distance(o2, o3)
    np.testing.assert_allclose(values, losses.softpn_loss(*d), rtol=1e-12)
    # per-tensor directional derivatives of the batch mean; skip a tensor
    # when the stencil flips a max-pool winner
    eps = 1e-6

    def mean_loss(p):
        a, b, c = model.describe_triplet(p, x1, x2, xn)
        return losses.batch_loss(losses.softpn_loss(T.l2_distance(a, b), T.l2_distance(a, c),
                                                    T.l2_distance(b, c)))

    checked = 0
    for name, tensor in params.items():
        u = np.random.default_rng(tensor.size).standard_normal(tensor.shape)
        shifted = []
        for s in (eps, -eps):
            q = params.copy()
            setattr(q, name, tensor + s * u)
            shifted.append(q)
        sigs = [model.pool_signature(q, x) for q in shifted]
        if not np.array_equal(*sigs):
            continue
        numeric = (mean_loss(shifted[0]) - mean_loss(shifted[1])) / (2 * eps)
        analytic = float(np.sum(getattr(grads, name) * u))
        assert analytic == pytest.approx(numeric, rel=1e-6)
        checked += 1
    assert checked >= 5


def test_pair_objective_shares_patches(corpus):
    params = model.init_params(0, 32, model.SMOKE_CHANNELS).astype(np.float64)
    patches = corpus.normalized().astype(np.float64)
    pairs = data.decompose_triplets(data.sample_triplets(corpus, 5, 0))
    values, grads = trainer.pair_objective(params, patches, pairs.left, pairs.right, pairs.labels)
    dl = model.describe(params, patches[pairs.left])
    dr = model.describe(params, patches[pairs.right])
    np.testing.assert_allclose(values,
                               losses.hinge_embedding_loss(T.l2_distance(dl, dr), pairs.labels),
                               rtol=1e-12)
    assert grads.all_finite()


# -- epochs and runs -------------------------------------------------------------------

def test_epoch_requires_matching_sampler(corpus):
    p = model.init_params(0, 32, model.SMOKE_CHANNELS)
    state = trainer.OptimizerState.zeros(p)
    sampler = trainer.TripletSampler(corpus, 0)
    with pytest.raises(ConfigError):
        trainer.train_epoch(p, state, sampler, smoke_cfg(loss="hinge"))


def test_partial_final_batch(corpus):
    cfg = smoke_cfg(triplets_per_epoch=70, batch_size=32)
    p = model.init_params(0, 32, model.SMOKE_CHANNELS)
    entry = trainer.train_epoch(p, trainer.OptimizerState.zeros(p),
                                trainer.make_sampler(corpus, cfg, 1), cfg)
    assert np.isfinite(entry.mean_loss) and entry.epoch == 1


@pytest.mark.parametrize("loss", losses.LOSS_NAMES)
def test_epoch_is_deterministic(corpus, loss):
    cfg = smoke_cfg(loss=loss, triplets_per_epoch=96)
    results = []
    for _ in range(2):
        p = model.init_params(0, 32, model.SMOKE_CHANNELS)
        state = trainer.OptimizerState.zeros(p)
        entry = trainer.train_epoch(p, state, trainer.make_sampler(corpus, cfg, 1), cfg)
        results.append((entry.mean_loss, p))
    assert results[0][0] == results[1][0]
    assert results[0][1] == results[1][1]


def test_training_lowers_loss(corpus):
    cfg = smoke_cfg(epochs=20, triplets_per_epoch=512, batch_size=128)
    _, _, logs = trainer.run_training(cfg, corpus)
    assert len(logs) == 20
    assert logs[-1].mean_loss < logs[0].mean_loss


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts(corpus):
    cfg = smoke_cfg(learning_rate=1e30, triplets_per_epoch=512, batch_size=16, epochs=3)
    params = model.init_params(0, 32, model.SMOKE_CHANNELS)
    params.fc_w[...] = np.inf
    with pytest.raises(NonFiniteError):
        trainer.run_training(cfg, corpus, params=params)


def test_checkpoints_log_and_resume(tmp_path, corpus, val):
    full = smoke_cfg(epochs=3, checkpoint_dir=str(tmp_path / "full"), single_thread=True)
    p_full, _, logs = trainer.run_training(full, corpus, val)
    rows = trainer.read_log(tmp_path / "full" / trainer.LOG_NAME)
    assert [r.epoch for r in rows] == [1, 2, 3] and all(r.val_fpr95 is not None for r in rows)
    assert [r.mean_loss for r in rows] == [r.mean_loss for r in logs]
    assert trainer.latest_checkpoint(tmp_path / "full").name == "epoch0003.pnck"

    part_dir = str(tmp_path / "part")
    trainer.run_training(smoke_cfg(epochs=1, checkpoint_dir=part_dir, single_thread=True),
                         corpus, val)
    p_res, _, res_logs = trainer.run_training(
        smoke_cfg(epochs=3, checkpoint_dir=part_dir, single_thread=True), corpus, val, resume=True)
    assert p_res == p_full
    assert [r.mean_loss for r in res_logs] == [r.mean_loss for r in logs]
    a = (tmp_path / "full" / "epoch0003.pnck").read_bytes()
    b = (tmp_path / "part" / "epoch0003.pnck").read_bytes()
    assert a == b


def test_resume_rejects_other_seed(tmp_path, corpus):
    d = str(tmp_path / "run")
    trainer.run_training(smoke_cfg(epochs=1, checkpoint_dir=d), corpus)
    with pytest.raises(ConfigError):
        trainer.run_training(smoke_cfg(epochs=2, seed=5, checkpoint_dir=d), corpus, resume=True)
    with pytest.raises(ConfigError):
        trainer.run_training(smoke_cfg(epochs=2), corpus, resume=True)


def test_eval_every_controls_checkpoints(tmp_path, corpus):
    d = tmp_path / "run"
    trainer.run_training(smoke_cfg(epochs=3, eval_every=2, triplets_per_epoch=64,
                                   checkpoint_dir=str(d)), corpus)
    assert sorted(p.name for p in d.glob("*.pnck")) == ["epoch0002.pnck", "epoch0003.pnck"]
