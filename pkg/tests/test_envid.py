import numpy as np
import pytest

from painvrl import backbone, dataset, envid
from painvrl.backbone import ItemGraph, LossWeights, TrainConfig
from painvrl.dataset import InteractionSet
from painvrl.envid import EnvModels, EnvPartition


def random_set(n=100, nu=20, ni=30, seed=0):
    rng = np.random.default_rng(seed)
    pairs = rng.choice(nu * ni, size=n, replace=False)
    return InteractionSet(nu, ni, pairs // ni, pairs % ni)


def test_single_environment():
    data = random_set()
    part = envid.init_partition(data, 1, np.random.default_rng(0))
    assert part.sizes().tolist() == [100]
    part = envid.init_partition(data, 1, np.random.default_rng(0), "kmeans", np.ones((30, 2)))
    assert part.sizes().tolist() == [100]


def test_ten_environments_nonempty():
    part = envid.init_partition(random_set(), 10, np.random.default_rng(0))
    assert np.all(part.sizes() > 0)
    assert part.sizes().sum() == 100


def test_kmeans_init_nonempty_and_deterministic():
    data = random_set()
    content = np.random.default_rng(3).standard_normal((30, 4))
    a = envid.init_partition(data, 3, np.random.default_rng(5), "kmeans", content)
    b = envid.init_partition(data, 3, np.random.default_rng(5), "kmeans", content)
    assert np.array_equal(a.assignment, b.assignment)
    assert a.num_envs == 3


def test_zero_environments_rejected():
    with pytest.raises(ValueError):
        envid.init_partition(random_set(), 0, np.random.default_rng(0))


def test_unknown_init_method():
    with pytest.raises(ValueError, match="unknown"):
        envid.init_partition(random_set(), 2, np.random.default_rng(0), "spectral", np.ones((30, 2)))


def test_partition_validation():
    data = random_set(n=5)
    with pytest.raises(ValueError):
        EnvPartition(data, 2, [0, 1, 2, 0, 0])
    with pytest.raises(ValueError):
        EnvPartition(data, 2, [0, 1])


def test_repair_fills_empty_environment():
    data = random_set(n=10)
    part = EnvPartition(data, 3, np.zeros(10, dtype=np.int64))
    fixed = envid.repair_empty(part, np.random.default_rng(0))
    assert np.all(fixed.sizes() >= 1)
    assert fixed.sizes().sum() == 10


def _models(data, part, content, epochs, seed):
    g = ItemGraph.from_interactions(data)
    return envid.train_env_models(part, content, g, LossWeights(), TrainConfig(epochs=epochs),
                                  np.random.default_rng(seed), k=4)


def test_env_models_deterministic():
    data = random_set()
    part = envid.init_partition(data, 2, np.random.default_rng(0))
    content = np.random.default_rng(1).standard_normal((30, 3))
    a = _models(data, part, content, 2, 7)
    b = _models(data, part, content, 2, 7)
    assert all(x.equals(y) for x, y in zip(a.models, b.models))


def test_zero_epochs_keep_initialisation():
    data = random_set()
    part = envid.init_partition(data, 2, np.random.default_rng(0))
    content = np.random.default_rng(1).standard_normal((30, 3))
    models = _models(data, part, content, 0, 7)
    rng = np.random.default_rng(7)
    for p in models.models:
        assert p.equals(backbone.init_params(20, 30, 4, 3, rng))


def test_opposite_spurious_signs_give_opposite_models():
    spec = dataset.SyntheticSpec(num_users=120, num_items=150, num_envs_true=2, flip_strength=1.0, seed=1)
    data, feats, env = dataset.make_synthetic(spec)
    part = EnvPartition(data, 2, env)
    g = ItemGraph.from_interactions(data)
    models = envid.train_env_models(part, feats.vectors, g, LossWeights(), TrainConfig(epochs=30),
                                    np.random.default_rng(0), k=8)
    # user-averaged effective weight on the spurious block: mean_u p_f[u] W[:, spu]
    eff = [p.p_f.mean(axis=0) @ p.W[:, spec.d_inv:] for p in models.models]
    cos = eff[0] @ eff[1] / (np.linalg.norm(eff[0]) * np.linalg.norm(eff[1]))
    assert cos < 0


def _fixed_models(scores):
    # models whose score of pair (0, 0) equals the given constants
    out = []
    for s in scores:
        p = backbone.init_params(1, 1, 1, 1, np.random.default_rng(0))
        p.p_t[:] = 1.0
        p.t[:] = s
        p.p_f[:] = 0.0
        out.append(p)
    return EnvModels(out)


@pytest.mark.parametrize("scores,want", [([0.1, 0.9], 1), ([0.5, 0.5], 0), ([0.3], 0), ([0.2, 0.7, 0.7], 1)])
def test_assign_environment(scores, want):
    assert envid.assign_environment(0, 0, _fixed_models(scores), np.zeros(1)) == want


def test_one_round_only():
    data = random_set()
    content = np.random.default_rng(1).standard_normal((30, 3))
    res = envid.identify(data, content, 3, 1, np.random.default_rng(0), cfg=TrainConfig(epochs=1), k=4)
    assert len(res.reassignments) == 1


def test_stable_partition_returns_after_one_round():
    data = random_set()
    content = np.random.default_rng(1).standard_normal((30, 3))
    start = envid.init_partition(data, 2, np.random.default_rng(3))
    # zero epochs: the models are their initialisations, drawn from the same stream identify uses
    models = envid.train_env_models(start, content, ItemGraph.from_interactions(data), LossWeights(),
                                    TrainConfig(epochs=0), np.random.default_rng(0), k=4)
    stable = envid.reassign(start, models, content)
    assert np.all(stable.sizes() > 0)
    res = envid.identify(data, content, 2, 5, np.random.default_rng(0), cfg=TrainConfig(epochs=0), k=4,
                         init=stable)
    assert res.reassignments == [0]
    assert res.converged


def test_partition_file_roundtrip(tmp_path):
    data = random_set(n=30)
    part = envid.init_partition(data, 4, np.random.default_rng(2))
    envid.write_partition(part, tmp_path / "p.tsv")
    back = envid.read_partition(tmp_path / "p.tsv", data, 4)
    assert np.array_equal(back.assignment, part.assignment)
