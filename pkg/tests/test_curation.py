import json
import threading
import time

import pytest

from mmcot.curation import (
    CAPTION_PROMPT,
    CAPTION_QUESTION,
    VQA_PROMPT,
    EchoGenerator,
    PromptTemplate,
    SourceRecord,
    apply_review,
    collect_rationales,
    load_decisions,
    load_sources,
    read_journal,
    render_caption_prompt,
    render_vqa_prompt,
)
from mmcot.errors import (
    ContractError,
    FileFormatError,
    JournalCorruptError,
    ParameterError,
    UnknownIdError,
)


# --------------------------------------------------------------------------
# templates
# --------------------------------------------------------------------------

def test_caption_prompt_exact():
    prompt = render_caption_prompt("a dog")
    assert prompt == ("The caption of this picture reads: a dog. Based on the "
                      "content of the picture, use thinking logic to explain why "
                      "this picture is captioned as such.")
    assert "reads: a dog." in prompt


def test_caption_prompt_substitution_is_only_change():
    prompt = render_caption_prompt("a dog")
    assert prompt.replace("a dog", "[Caption]") == CAPTION_PROMPT.text


def test_caption_prompt_preserves_punctuation():
    caption = "dogs, cats; and [birds]!"
    assert caption in render_caption_prompt(caption)


def test_vqa_prompt_exact():
    prompt = render_vqa_prompt("what color", "red")
    assert "I have a question about this picture: what color." in prompt
    assert "your ANSWER is: red." in prompt
    # both placeholders substituted exactly once (tokens chosen to not
    # collide with template words)
    prompt2 = render_vqa_prompt("QQTOKEN", "AATOKEN")
    assert prompt2.count("QQTOKEN") == 1
    assert prompt2.count("AATOKEN") == 1
    restored = prompt2.replace("QQTOKEN", "[Question]").replace("AATOKEN", "[Answer]")
    assert restored == VQA_PROMPT.text


def test_vqa_prompt_unicode_survives():
    q = "qué ves aquí — 猫?"
    assert q in render_vqa_prompt(q, "sí")


def test_empty_fields_rejected():
    with pytest.raises(ContractError):
        render_caption_prompt("")
    with pytest.raises(ContractError):
        render_vqa_prompt("q", "")


def test_template_arity_validated():
    with pytest.raises(ParameterError):
        PromptTemplate(kind="caption", text="no placeholder here", placeholders=("Caption",))
    with pytest.raises(ParameterError):
        PromptTemplate(kind="vqa", text="[Question] only", placeholders=("Question", "Answer"))


# --------------------------------------------------------------------------
# collection
# --------------------------------------------------------------------------

def _sources(n, kind="vqa"):
    out = []
    for i in range(n):
        out.append(SourceRecord(id=str(i), image_ref=f"img_{i}", kind=kind,
                                caption=f"caption {i}", question=f"question {i}",
                                answer=f"answer {i}"))
    return out


class CountingClient:
    def __init__(self, fail_ids=(), fail_always=False):
        self.calls = 0
        self.fail_ids = set(fail_ids)
        self.fail_always = fail_always
        self.lock = threading.Lock()

    def generate(self, prompt, image_ref, **params):
        with self.lock:
            self.calls += 1
        rec_id = image_ref.split("_")[-1]
        if self.fail_always and rec_id in self.fail_ids:
            raise RuntimeError(f"backend refused record {rec_id}")
        return f"generated for {image_ref}"


def test_stub_client_yields_triplet_per_record(tmp_path):
    sources = _sources(5)
    result = collect_rationales(sources, EchoGenerator(), tmp_path / "journal.log")
    assert len(result.records) == 5
    assert result.failures == []
    for src, rec in zip(sources, result.records):
        assert rec.id == src.id
        assert rec.review_status == "unreviewed"
        assert rec.question == src.question
        assert rec.answer == src.answer
        assert src.question in rec.rationale  # echo stub returns the prompt


def test_caption_kind_builds_caption_triplets(tmp_path):
    sources = _sources(2, kind="caption")
    result = collect_rationales(sources, EchoGenerator(), tmp_path / "journal.log")
    assert all(r.question == CAPTION_QUESTION for r in result.records)
    assert [r.answer for r in result.records] == ["caption 0", "caption 1"]
    assert all(r.source == "caption" for r in result.records)


def test_fault_injection_single_failure(tmp_path):
    sources = _sources(6)
    client = CountingClient(fail_ids={"3"}, fail_always=True)
    result = collect_rationales(sources, client, tmp_path / "journal.log",
                                max_retries=2,
                                failure_log_path=tmp_path / "failures.csv")
    assert len(result.records) == 5
    assert [f.id for f in result.failures] == ["3"]
    assert "refused" in result.failures[0].reason
    assert "3" in (tmp_path / "failures.csv").read_text()
    # failed record is retried max_retries times, others once
    assert client.calls == 5 + 2


def test_resume_processes_only_missing(tmp_path):
    sources = _sources(6)
    journal = tmp_path / "journal.log"
    flaky = CountingClient(fail_ids={"3"}, fail_always=True)
    collect_rationales(sources, flaky, journal, max_retries=1)
    # resume with a healthy client: exactly one call, for the failed id
    healthy = CountingClient()
    result = collect_rationales(sources, healthy, journal)
    assert healthy.calls == 1
    assert [r.id for r in result.records] == ["3"]
    assert result.skipped == 5


def test_completed_job_rerun_makes_zero_calls(tmp_path):
    sources = _sources(4)
    journal = tmp_path / "journal.log"
    collect_rationales(sources, EchoGenerator(), journal)
    client = CountingClient()
    result = collect_rationales(sources, client, journal)
    assert client.calls == 0
    assert result.records == []
    assert result.skipped == 4


def test_duplicate_source_ids_rejected(tmp_path):
    sources = _sources(2) + _sources(1)
    with pytest.raises(ContractError):
        collect_rationales(sources, EchoGenerator(), tmp_path / "journal.log")


def test_journal_corruption_aborts(tmp_path):
    journal = tmp_path / "journal.log"
    journal.write_text("done\t1\ngarbage line\n")
    with pytest.raises(JournalCorruptError):
        read_journal(journal)
    with pytest.raises(JournalCorruptError):
        collect_rationales(_sources(2), EchoGenerator(), journal)


def test_concurrency_limit_respected(tmp_path):
    limit = 3
    active = 0
    peak = 0
    lock = threading.Lock()

    class SlowClient:
        def generate(self, prompt, image_ref, **params):
            nonlocal active, peak
            with lock:
                active += 1
                peak = max(peak, active)
            time.sleep(0.01)
            with lock:
                active -= 1
            return "ok"

    collect_rationales(_sources(12), SlowClient(), tmp_path / "journal.log",
                       concurrency=limit)
    assert peak <= limit


def test_gen_params_passed_through(tmp_path):
    seen = {}

    class Probe:
        def generate(self, prompt, image_ref, **params):
            seen.update(params)
            return "ok"

    collect_rationales(_sources(1), Probe(), tmp_path / "journal.log",
                       gen_params={"temperature": 0.2, "max_tokens": 64})
    assert seen == {"temperature": 0.2, "max_tokens": 64}


def test_load_sources_validation(tmp_path):
    p = tmp_path / "src.jsonl"
    p.write_text(json.dumps({"id": 1, "caption": "c", "image_ref": "x"}) + "\n")
    assert load_sources(p, "caption")[0].id == "1"
    with pytest.raises(FileFormatError):
        load_sources(p, "vqa")  # missing question/answer
    with pytest.raises(ParameterError):
        load_sources(p, "other")


# --------------------------------------------------------------------------
# review
# --------------------------------------------------------------------------

def _candidates(n, tmp_path):
    sources = _sources(n)
    return collect_rationales(sources, EchoGenerator(), tmp_path / "journal.log").records


def test_all_accept_keeps_everything(tmp_path):
    records = _candidates(4, tmp_path)
    result = apply_review(records, {str(i): "accept" for i in range(4)})
    assert len(result.accepted) == 4
    assert all(r.review_status == "accepted" for r in result.accepted)


def test_reject_subset(tmp_path):
    records = _candidates(6, tmp_path)
    decisions = {str(i): "accept" for i in range(6)}
    decisions["2"] = "reject"
    decisions["5"] = "reject"
    result = apply_review(records, decisions)
    assert len(result.accepted) == 4
    assert {r.id for r in result.accepted} == {"0", "1", "3", "4"}


def test_unknown_decision_id(tmp_path):
    records = _candidates(2, tmp_path)
    with pytest.raises(UnknownIdError):
        apply_review(records, {"99": "accept"})


def test_undecided_records_stay_unreviewed(tmp_path):
    records = _candidates(3, tmp_path)
    result = apply_review(records, {"0": "accept"})
    assert [r.review_status for r in result.records] == \
        ["accepted", "unreviewed", "unreviewed"]
    assert len(result.accepted) == 1


def test_load_decisions_csv(tmp_path):
    p = tmp_path / "decisions.csv"
    p.write_text("id,decision\n1,accept\n2,reject\n")
    assert load_decisions(p) == {"1": "accept", "2": "reject"}
    p.write_text("1,accept\n2,maybe\n")
    with pytest.raises(FileFormatError):
        load_decisions(p)
