import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from exposome_kit.gateway import Gateway, ModelProfile  # noqa: E402
from exposome_kit.retry import RetryPolicy, no_sleep  # noqa: E402
from exposome_kit.stub import stub_transport  # noqa: E402

FAST_RETRY = RetryPolicy(sleep=no_sleep)


@pytest.fixture
def profile():
    return ModelProfile("http://stub.invalid", "stub-model", 0.0)


@pytest.fixture
def stub_gateway(tmp_path):
    with Gateway(transport=stub_transport(), retry=FAST_RETRY,
                 audit_path=tmp_path / "audit.jsonl") as gw:
        yield gw


def make_pipeline_ctx(tmp_path, gateway, profile, jobs=1, **kw):
    """Context over the engineered stub corpus, replayed from ``tmp_path/replay``."""
    from exposome_kit.epmc import EpmcClient, ReplayTransport, SearchQuery, build_query
    from exposome_kit.pipeline import PipelineContext
    from exposome_kit.stub import build_stub_corpus

    replay = tmp_path / "replay"
    if not replay.exists():
        build_stub_corpus(replay)
    epmc = EpmcClient("http://epmc.invalid", tmp_path / "epmc_cache",
                      transport=ReplayTransport(replay), retry=FAST_RETRY, page_size=7)
    profiles = {role: profile for role in ("extract", "condense", "cluster")}
    return PipelineContext(tmp_path / "literature", gateway, profiles, epmc,
                           [build_query(SearchQuery())], jobs=jobs, **kw)


RUN_TOML = """\
seed = {seed}
output_dir = "out"
stub = {stub}

[data]
ema = "data/ema.csv"
baseline = "data/baseline.csv"
photos = "data/photos"

[epmc]
replay_dir = "replay"
page_size = 7

[gateway]
retry_attempts = {attempts}

[models.extract]
model = "stub-text"
endpoint = "{endpoint}"
[models.condense]
model = "stub-text"
endpoint = "{endpoint}"
[models.cluster]
model = "stub-text"
endpoint = "{endpoint}"
[models.rater_a]
model = "vlm-a"
endpoint = "{endpoint}"
[models.rater_b]
model = "vlm-b"
endpoint = "{endpoint}"

[rating]
k_greenness = 2

[simulate]
n_participants = {n}
days = 2
alarms_per_day = 4
"""


def write_run_config(root, *, seed=3, stub=True, n=12, attempts=2, endpoint="http://stub.invalid",
                     corpus=True):
    from exposome_kit.stub import build_stub_corpus

    root.mkdir(parents=True, exist_ok=True)
    if corpus and not (root / "replay").exists():
        build_stub_corpus(root / "replay")
    path = root / "run.toml"
    path.write_text(RUN_TOML.format(seed=seed, stub=str(stub).lower(), n=n, attempts=attempts,
                                    endpoint=endpoint))
    return path


def full_run(root, seed=3, jobs=1):
    """Every CLI stage in order on a small simulated study and the stub corpus."""
    from exposome_kit.cli import main

    cfg = write_run_config(root, seed=seed)
    steps = [("simulate",), ("mine",), ("extract",), ("condense",), ("cluster",), ("assemble",),
             ("rate",), ("rate", "--features", "catalog"), ("analyze",), ("screen",)]
    for step in steps:
        code = main([*step, "--config", str(cfg), "--jobs", str(jobs)])
        assert code == 0, (step, code)
    return root


def snapshot(root):
    skip = {"ledger.jsonl", "gateway.jsonl", "progress.jsonl"}
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in skip and "epmc_cache" not in p.parts}


ACCEPTANCE: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
