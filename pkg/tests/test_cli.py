import json
import socket
from pathlib import Path

import pytest
from click.testing import CliRunner

from guidebench.cli import main
from guidebench.corpus import chunk_document, load_chunks, save_chunks
from guidebench.generation import load_items
from importlib import resources

GOLDEN_REPORT = Path(__file__).parent / "golden" / "report.json"


def data_path(name: str) -> str:
    from importlib import resources

    ref = resources.files("guidebench.data").joinpath(name)
    with resources.as_file(ref) as p:
        return str(p)


@pytest.fixture()
def runner():
    return CliRunner()


def write_model_config(tmp_path, script_path):
    config = tmp_path / "model.yaml"
    config.write_text(f"kind: mock\nscript: {script_path}\n", encoding="utf-8")
    return str(config)


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------


def test_ingest_fixture_doc(runner, tmp_path):
    out = tmp_path / "chunks.jsonl"
    result = runner.invoke(
        main, ["ingest", data_path("guideline_fixture.txt"), "--out", str(out), "--doc-id", "fx"]
    )
    assert result.exit_code == 0, result.output
    assert "chunks: 4" in result.output
    assert "I. Internal Medicine" in result.output
    assert out.exists()
    assert len(load_chunks(out)) == 4


def test_ingest_missing_file_exit_2(runner, tmp_path):
    result = runner.invoke(main, ["ingest", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "o")])
    assert result.exit_code == 2
    assert "nope.txt" in result.output


def test_ingest_malformed_markers_exit_1(runner, tmp_path):
    doc = tmp_path / "bad.txt"
    doc.write_text("#PART A\n###SUBSECTION orphan without section\ntext\n", encoding="utf-8")
    result = runner.invoke(main, ["ingest", str(doc), "--out", str(tmp_path / "o.jsonl")])
    assert result.exit_code == 1
    assert "line 2" in result.output


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


@pytest.fixture()
def chunk_store(tmp_path):
    text = Path(data_path("guideline_fixture.txt")).read_text(encoding="utf-8")
    chunks = chunk_document(text, "fx")
    path = tmp_path / "chunks.jsonl"
    save_chunks(chunks, path)
    return path


def test_generate_with_mock_backend_deterministic(runner, tmp_path, chunk_store):
    model = write_model_config(tmp_path, data_path("mock_scripts/generate_mock.json"))
    out1 = tmp_path / "items1.jsonl"
    out2 = tmp_path / "items2.jsonl"
    for out in (out1, out2):
        result = runner.invoke(
            main,
            ["generate", "--chunks", str(chunk_store), "--backend", model, "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        assert "items: 4" in result.output
    assert out1.read_bytes() == out2.read_bytes()
    items = load_items(out1)
    assert all(it.status == "audited" for it in items)
    assert all(it.citation is not None for it in items)


def test_generate_unreachable_backend_exit_3(runner, tmp_path, chunk_store):
    # allocate a port and close it so nothing is listening
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    config = tmp_path / "model.yaml"
    config.write_text(
        f"kind: http\nendpoint: http://127.0.0.1:{port}/v1\nmodel: m\ntimeout: 0.2\nbackoff: 0.0\n",
        encoding="utf-8",
    )
    result = runner.invoke(
        main,
        ["generate", "--chunks", str(chunk_store), "--backend", str(config), "--out", str(tmp_path / "i.jsonl")],
    )
    assert result.exit_code == 3


def test_generate_quota_cap_zero(runner, tmp_path, chunk_store):
    model = write_model_config(tmp_path, data_path("mock_scripts/generate_mock.json"))
    out = tmp_path / "items.jsonl"
    result = runner.invoke(
        main,
        [
            "generate",
            "--chunks", str(chunk_store),
            "--backend", model,
            "--out", str(out),
            "--total-cap", "0",
        ],
    )
    assert result.exit_code == 0
    assert "warning" in result.output
    assert load_items(out) == []


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def test_evaluate_matches_golden_report(runner, tmp_path):
    model = write_model_config(tmp_path, data_path("mock_scripts/evaluate_mock.json"))
    out = tmp_path / "run"
    result = runner.invoke(
        main,
        [
            "evaluate",
            "--scenarios", data_path("scenarios"),
            "--model", model,
            "--out", str(out),
            "--seed", "0",
        ],
    )
    assert result.exit_code == 0, result.output
    assert (out / "report.json").read_bytes() == GOLDEN_REPORT.read_bytes()
    assert (out / "report.md").exists()
    assert (out / "cases.csv").exists()
    assert len(list((out / "transcripts").glob("*.jsonl"))) == 11


def test_evaluate_single_metric_selection(runner, tmp_path):
    model = write_model_config(tmp_path, data_path("mock_scripts/evaluate_mock.json"))
    out = tmp_path / "run"
    result = runner.invoke(
        main,
        [
            "evaluate",
            "--scenarios", data_path("scenarios"),
            "--model", model,
            "--out", str(out),
            "--metrics", "needle",
        ],
    )
    assert result.exit_code == 0, result.output
    report = json.loads((out / "report.json").read_text())
    assert list(report["metrics"]) == ["needle"]


def test_evaluate_unknown_scenario_kind_exit_1(runner, tmp_path):
    scenarios = tmp_path / "scenarios"
    scenarios.mkdir()
    (scenarios / "astrology.jsonl").write_text("{}\n", encoding="utf-8")
    model = write_model_config(tmp_path, data_path("mock_scripts/evaluate_mock.json"))
    result = runner.invoke(
        main,
        ["evaluate", "--scenarios", str(scenarios), "--model", model, "--out", str(tmp_path / "o")],
    )
    assert result.exit_code == 1
    assert "astrology" in result.output


def test_evaluate_unknown_metric_exit_1(runner, tmp_path):
    model = write_model_config(tmp_path, data_path("mock_scripts/evaluate_mock.json"))
    result = runner.invoke(
        main,
        [
            "evaluate",
            "--scenarios", data_path("scenarios"),
            "--model", model,
            "--out", str(tmp_path / "o"),
            "--metrics", "vibes",
        ],
    )
    assert result.exit_code == 1


def test_evaluate_run_config_file_with_flag_override(runner, tmp_path):
    model = write_model_config(tmp_path, data_path("mock_scripts/evaluate_mock.json"))
    config = tmp_path / "run.yaml"
    config.write_text(
        "\n".join(
            [
                f"scenarios: {data_path('scenarios')}",
                f"model: {model}",
                f"out: {tmp_path / 'from-config'}",
                "metrics: needle",
                "seed: 0",
            ]
        ),
        encoding="utf-8",
    )
    out_flag = tmp_path / "from-flag"
    result = runner.invoke(
        main, ["evaluate", "--config", str(config), "--out", str(out_flag)]
    )
    assert result.exit_code == 0, result.output
    assert (out_flag / "report.json").exists()  # flag wins over file
    assert not (tmp_path / "from-config").exists()
    report = json.loads((out_flag / "report.json").read_text())
    assert list(report["metrics"]) == ["needle"]


def test_evaluate_weight_override_changes_scores(runner, tmp_path):
    model = write_model_config(tmp_path, data_path("mock_scripts/evaluate_mock.json"))
    config = tmp_path / "run.yaml"
    config.write_text(
        "\n".join(
            [
                "metrics: cbst",
                "weights:",
                "  cbst:",
                "    flex: 0.7",
                "    contradiction: 0.1",
                "    breadth: 0.1",
                "    action: 0.1",
            ]
        ),
        encoding="utf-8",
    )
    out = tmp_path / "run"
    result = runner.invoke(
        main,
        [
            "evaluate",
            "--config", str(config),
            "--scenarios", data_path("scenarios"),
            "--model", model,
            "--out", str(out),
        ],
    )
    assert result.exit_code == 0, result.output
    report = json.loads((out / "report.json").read_text())
    by_case = {c["case_id"]: c for c in report["metrics"]["cbst"]["cases"]}
    # the partial case: flex 1, contradiction 1, breadth 0.5, action 0
    assert by_case["cbst-prem-01"]["cbst10"] == pytest.approx(10 * (0.7 + 0.1 + 0.1 * 0.5))
    assert report["config"]["weights"]["cbst"]["flex"] == 0.7


def test_evaluate_bad_weight_override_exit_1(runner, tmp_path):
    model = write_model_config(tmp_path, data_path("mock_scripts/evaluate_mock.json"))
    config = tmp_path / "run.yaml"
    config.write_text(
        "weights:\n  reverse:\n    consistency: 0.9\n    completeness: 0.9\n"
        "    style_realism: 0.1\n    linguistic: 0.1\n",
        encoding="utf-8",
    )
    result = runner.invoke(
        main,
        [
            "evaluate",
            "--config", str(config),
            "--scenarios", data_path("scenarios"),
            "--model", model,
            "--out", str(tmp_path / "o"),
        ],
    )
    assert result.exit_code == 1
    assert "weight" in result.output


# ---------------------------------------------------------------------------
# diff-guideline
# ---------------------------------------------------------------------------


def make_stores(tmp_path, edit=None, disjoint=False):
    text = Path(data_path("guideline_fixture.txt")).read_text(encoding="utf-8")
    old = chunk_document(text, "fx")
    if disjoint:
        new_text = "#PART IX. Entirely new\n##SECTION Fresh\nCompletely different corpus paragraph.\n"
        new = chunk_document(new_text, "fx")
    elif edit:
        new = chunk_document(text.replace(*edit), "fx")
    else:
        new = old
    old_path = tmp_path / "old.jsonl"
    new_path = tmp_path / "new.jsonl"
    save_chunks(old, old_path)
    save_chunks(new, new_path)
    return old, old_path, new_path


def items_citing(tmp_path, chunk_ids):
    from guidebench.generation import Citation, save_items
    from tests.test_generation import make_item

    items = []
    for i, cid in enumerate(chunk_ids):
        item = make_item(item_id=f"cited-{i}")
        item.citation = Citation(cid, 1, 1)
        items.append(item)
    path = tmp_path / "items.jsonl"
    save_items(items, path)
    return path


def test_diff_identical_stores(runner, tmp_path):
    _, old_path, new_path = make_stores(tmp_path)
    result = runner.invoke(main, ["diff-guideline", "--old", str(old_path), "--new", str(new_path)])
    assert result.exit_code == 0
    assert "no changes" in result.output


def test_diff_edited_chunk_flags_citing_items(runner, tmp_path):
    old, old_path, new_path = make_stores(
        tmp_path, edit=("zinc supplements for\nten to fourteen days", "zinc supplements for\nfourteen days")
    )
    edited = old[3]
    items_path = items_citing(tmp_path, [edited.chunk_id, edited.chunk_id])
    result = runner.invoke(
        main,
        ["diff-guideline", "--old", str(old_path), "--new", str(new_path), "--items", str(items_path)],
    )
    assert result.exit_code == 0
    assert "modified: 1" in result.output
    assert "stale items: 2" in result.output


def test_diff_disjoint_stores_all_stale(runner, tmp_path):
    old, old_path, new_path = make_stores(tmp_path, disjoint=True)
    items_path = items_citing(tmp_path, [c.chunk_id for c in old])
    out = tmp_path / "changes.json"
    result = runner.invoke(
        main,
        [
            "diff-guideline",
            "--old", str(old_path),
            "--new", str(new_path),
            "--items", str(items_path),
            "--out", str(out),
        ],
    )
    assert result.exit_code == 0
    assert f"stale items: {len(old)}" in result.output
    payload = json.loads(out.read_text())
    assert len(payload["removed"]) == len(old)
    assert len(payload["affected_items"]) == len(old)


# ---------------------------------------------------------------------------
# review-serve
# ---------------------------------------------------------------------------


def test_review_serve_port_in_use_exit_4(runner, tmp_path):
    items = items_citing(tmp_path, ["c1", "c2"])
    reviewers = tmp_path / "reviewers.json"
    reviewers.write_text('["rev-a", "rev-b"]', encoding="utf-8")

    blocker = socket.socket()
    blocker.bind(("127.0.0.1", 0))
    port = blocker.getsockname()[1]
    try:
        result = runner.invoke(
            main,
            [
                "review-serve",
                "--items", str(items),
                "--reviewers", str(reviewers),
                "--port", str(port),
            ],
        )
        assert result.exit_code == 4
        assert "in use" in result.output
    finally:
        blocker.close()


def test_review_serve_missing_items_exit_2(runner, tmp_path):
    reviewers = tmp_path / "reviewers.json"
    reviewers.write_text('["rev-a"]', encoding="utf-8")
    result = runner.invoke(
        main,
        ["review-serve", "--items", str(tmp_path / "none.jsonl"), "--reviewers", str(reviewers)],
    )
    assert result.exit_code == 2
