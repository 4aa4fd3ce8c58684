import pytest

from painvrl import dataset, pipeline

TINY = dict(num_users=40, num_items=60, d_inv=2, d_spu=2, density=0.1, num_envs_true=3)
TINY_RUN = dict(T=1, k=4, num_envs=3, envid_rounds=2, epochs_him=3, iters_mask=3, epochs_final=5,
                num_neighbors=5, batch_size=128)


@pytest.fixture(scope="session")
def tiny_data():
    data, feats, _ = dataset.make_synthetic(dataset.SyntheticSpec(seed=123, **TINY))
    return data, feats


def tiny_config(run_dir=None, **kw):
    args = dict(TINY_RUN)
    args.update(kw)
    return pipeline.RunConfig(run_dir=None if run_dir is None else str(run_dir), **args)


def tiny_config_text(run_dir, data_dir=None, **kw):
    """Config file body for the CLI, synthetic or file-backed."""
    lines = [f"run_dir = {run_dir}"]
    if data_dir is None:
        lines.append("synthetic = true")
        lines += [f"{k} = {v}" for k, v in TINY.items()]
    else:
        lines.append(f"data_dir = {data_dir}")
    merged = dict(TINY_RUN)
    merged.update(kw)
    lines += [f"{k} = {v}" for k, v in merged.items()]
    return "\n".join(lines) + "\n"


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
