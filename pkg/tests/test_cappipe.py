import json
import logging
from pathlib import Path

import numpy as np
import pytest

from vedit import cappipe as cp
from vedit.augment import load_frames
from vedit.dataset import read_shard
from vedit.numkit import Rng

from oracles import fnv1a64, keyframes

GOLDEN = Path(__file__).parent / "golden"
VIDEOS = Path(cp.__file__).parent / "data" / "videos"
FAST = cp.BackendEndpoint("mock://", backoff_ms=1)


def video(seed=0, T=6, C=3, H=8, W=8):
    return Rng(seed).uniform(T * C * H * W).reshape(T, C, H, W).astype(np.float32)


class Fixed:
    """Service that always returns ``value`` for ``task`` and defers to the mocks otherwise."""

    def __init__(self, stage, task, value):
        self.stage, self.task, self.value = stage, task, value

    def call(self, task, inputs):
        if task == self.task:
            return self.value
        return cp.handle_task(task, inputs)["output"]


def test_keyframe_examples():
    assert cp.keyframe_indices(40) == [0, 13, 26, 39]
    assert cp.keyframe_indices(4) == [0, 1, 2, 3]
    assert cp.keyframe_indices(5, 1) == [0]
    with pytest.raises(ValueError):
        cp.keyframe_indices(3)


def test_keyframes_match_integer_rounding():
    for k in (2, 3, 4, 7):
        for n in range(k, 300):
            assert cp.keyframe_indices(n, k) == keyframes(n, k)


def test_png_roundtrip_is_8bit():
    v = video(1)[0]
    back = cp.decode_png(cp.encode_png(v))
    assert back.shape == v.shape
    assert np.max(np.abs(back - v)) <= 0.5 / 255 + 1e-7
    gray = video(2, C=1)[0]
    assert cp.decode_png(cp.encode_png(gray)).shape == (1, 8, 8)


def test_caption_transcript_matches_golden():
    want = json.loads((GOLDEN / "captions.json").read_text())
    for d in sorted(VIDEOS.iterdir()):
        _, b, i = cp.build_openworld_triplet(cp.PipelineClients.mock(), load_frames(d))
        got = {"keyframe_captions": b.keyframe_captions, "video_caption": b.video_caption, "summary": b.summary,
               "instruction": i.instruction, "edited_caption": i.edited_caption}
        assert got == want[d.name]


def test_compose_caption_uses_keyframes():
    v = video(3, T=10)
    seen = []

    class Rec:
        stage = "frame_captioner"

        def call(self, task, inputs):
            seen.append(cp.decode_png(inputs["frame"]))
            return "x"

    m = cp.mock_client("m")
    b = cp.compose_caption(Rec(), m, m, v)
    assert b.keyframe_captions == ["x"] * 4
    for got, idx in zip(seen, [0, 3, 6, 9]):
        assert np.array_equal(got, cp.decode_png(cp.encode_png(v[idx])))


def test_empty_caption_is_malformed():
    m = cp.mock_client("m")
    with pytest.raises(cp.MalformedResponse) as ei:
        cp.compose_caption(Fixed("frame_captioner", "caption_frame", ""), m, m, video())
    assert ei.value.stage == "frame_captioner"


def test_missing_output_field_is_malformed():
    c = cp.RetryingClient("summarizer", lambda t, i: {"result": "x"}, FAST)
    with pytest.raises(cp.MalformedResponse, match="output"):
        c.call("summarize", {"captions": ["a"]})
    assert c.attempts == 1


def test_summarizer_down_names_stage():
    clients = cp.PipelineClients.mock()
    clients.summary = cp.mock_client("summarizer", fail_first=100, endpoint=FAST)
    with pytest.raises(cp.BackendUnavailable) as ei:
        cp.build_openworld_triplet(clients, video())
    assert ei.value.stage == "summarizer" and "summarizer" in str(ei.value)
    assert clients.summary.attempts == 4


def test_gen_instruction_contract():
    few = cp.load_few_shot()
    assert len(few) == 8 and all(set(e) == {"caption", "instruction", "edited_caption"} for e in few)
    r = cp.gen_instruction(cp.mock_client("instruction_generator"), "a dim scene", few)
    assert r.instruction == few[fnv1a64(b"a dim scene") % 8]["instruction"]
    with pytest.raises(ValueError, match="few_shot"):
        cp.gen_instruction(cp.mock_client("i"), "a dim scene", [])
    bad = Fixed("instruction_generator", "make_instruction", {"instruction": "invert"})
    with pytest.raises(cp.MalformedResponse, match="edited_caption"):
        cp.gen_instruction(bad, "x", few)


def test_stub_editor_invert():
    v = video(4, T=4)
    instr = cp.InstructionResult("invert the colors", "negative")
    out = cp.run_editor(cp.mock_client("editor"), v, instr)
    q = np.round(v * 255) / 255
    assert np.allclose(out, 1 - q, atol=1e-6)


def test_stub_edit_table():
    v = np.full((1, 3, 2, 2), 0.5, np.float32)
    v[0, 0] = 0.9
    assert np.allclose(cp.stub_edit(v, "make it brighter"), np.clip(v + 0.3, 0, 1))
    assert np.allclose(cp.stub_edit(v, "darken it"), v - 0.3)
    g = cp.stub_edit(v, "black and white")
    assert np.allclose(g, (0.9 + 0.5 + 0.5) / 3)
    assert np.array_equal(cp.stub_edit(v, "do nothing special"), v)


def test_triplet_from_short_video_rejected():
    with pytest.raises(ValueError, match="T >= 4"):
        cp.build_openworld_triplet(cp.PipelineClients.mock(), video(T=3))


def test_retry_then_success_in_process(caplog):
    sleeps = []
    c = cp.RetryingClient("summarizer", cp.FlakyTransport(2), cp.BackendEndpoint("mock://"), sleeps.append)
    with caplog.at_level(logging.INFO, logger="vedit.cappipe"):
        out = c.call("summarize", {"captions": ["a", "b"]})
    assert out == cp.mock_summarize({"captions": ["a", "b"]})
    assert c.attempts == 3 and sleeps == [0.5, 1.0]
    attempts = [r.getMessage() for r in caplog.records if "attempt=" in r.getMessage() and r.levelno == logging.INFO]
    assert attempts == [f"stage=summarizer task=summarize attempt={k}" for k in (1, 2, 3)]


def test_retry_budget_exhausted():
    sleeps = []
    c = cp.RetryingClient("editor", cp.FlakyTransport(10), cp.BackendEndpoint("mock://", max_retries=2),
                          sleeps.append)
    with pytest.raises(cp.BackendUnavailable, match="3 attempts"):
        c.call("edit_video", {})
    assert c.attempts == 3 and sleeps == [0.5, 1.0]


def test_http_retry_then_success(caplog):
    with cp.MockServer() as srv:
        srv.fail_next["summarize"] = 2
        c = cp.http_client("summarizer", cp.BackendEndpoint(srv.url, timeout_ms=5000), sleep=lambda s: None)
        with caplog.at_level(logging.INFO, logger="vedit.cappipe"):
            out = c.call("summarize", {"captions": ["a", "b"]})
        assert out == cp.mock_summarize({"captions": ["a", "b"]})
        assert c.attempts == 3 and srv.requests == ["summarize"] * 3
    assert sum("attempt=" in r.getMessage() and r.levelno == logging.INFO for r in caplog.records) == 3


def test_http_unreachable_is_unavailable():
    with cp.MockServer() as srv:
        url = srv.url
    c = cp.http_client("frame_captioner", cp.BackendEndpoint(url, timeout_ms=500, max_retries=1), sleep=lambda s: None)
    with pytest.raises(cp.BackendUnavailable):
        c.call("caption_frame", {"frame": cp.encode_png(video()[0])})
    assert c.attempts == 2


def test_http_pipeline_equals_in_process():
    v = load_frames(VIDEOS / "sliding_square")
    local, _, _ = cp.build_openworld_triplet(cp.PipelineClients.mock(), v, seed=5)
    with cp.MockServer() as srv:
        env = {var: srv.url for var in cp.ENV_VARS.values()}
        remote, _, _ = cp.build_openworld_triplet(cp.PipelineClients.from_env(env, sleep=lambda s: None), v, seed=5)
    assert remote == local


def test_from_env_missing_names_variables():
    with pytest.raises(cp.ConfigError) as ei:
        cp.PipelineClients.from_env({"EVD_CAPTION_URL": "http://x/"})
    msg = str(ei.value)
    assert "EVD_SUMMARY_URL" in msg and "EVD_EDITOR_URL" in msg and "EVD_CAPTION_URL" not in msg


def test_endpoint_validation_and_backoff():
    e = cp.BackendEndpoint("http://x/")
    assert (e.timeout_ms, e.max_retries) == (30000, 3)
    assert [e.delay_s(k) for k in (1, 2, 3)] == [0.5, 1.0, 2.0]
    with pytest.raises(ValueError):
        cp.BackendEndpoint("http://x/", timeout_ms=0)


def test_mock_shard_matches_golden(tmp_path):
    from vedit.cli import main
    out = tmp_path / "p.evd"
    assert main(["pipeline-videos", "--videos", str(VIDEOS), "--out", str(out), "--mock"]) == 0
    assert out.read_bytes() == (GOLDEN / "pipeline_mock.evd").read_bytes()
    recs = read_shard(out)
    assert [r.source_tag for r in recs] == ["openworld"] * 3
