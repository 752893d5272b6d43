"""Request corpus, editing encodings, and encoder plumbing. Full-accuracy
encoder training is exercised by the acceptance suite."""

import numpy as np
import pytest

from talkedit.language import (
    CONTEXTS,
    REQUEST_TYPES,
    EditingEncoding,
    EncoderNet,
    RequestCorpus,
    _TemplateFiller,
    corpus_from_jsonl,
    corpus_to_jsonl,
    generate_corpus,
    load_templates,
    tokenize,
    train_encoder,
    _encode_tokens,
    _label_fields,
    _decode_fields,
)


@pytest.fixture(scope="module")
def templates():
    return load_templates()


# -- encoding invariants ------------------------------------------------------


def test_encoding_validation():
    EditingEncoding("target_degree", 0, "none", 5)
    EditingEncoding("relative_change", None, "decrease", -2)
    EditingEncoding("direction_only", 3, "increase")
    EditingEncoding("reject", None, "increase")
    with pytest.raises(ValueError):
        EditingEncoding("target_degree", 0, "none", None)  # target needs degree
    with pytest.raises(ValueError):
        EditingEncoding("direction_only", 0, "increase", 2)  # direction-only has no degree
    with pytest.raises(ValueError):
        EditingEncoding("confirm", 1)  # confirm carries no attribute
    with pytest.raises(ValueError):
        EditingEncoding("relative_change", 0, "increase", -1)  # sign mismatch
    with pytest.raises(ValueError):
        EditingEncoding("nonsense")


def test_encoding_dict_roundtrip():
    enc = EditingEncoding("relative_change", 2, "increase", 2)
    assert EditingEncoding.from_dict(enc.to_dict()) == enc


# -- corpus -------------------------------------------------------------------------


def test_corpus_deterministic(templates):
    a = generate_corpus(templates, seed=9, n=500)
    b = generate_corpus(templates, seed=9, n=500)
    assert a.samples == b.samples
    c = generate_corpus(templates, seed=10, n=500)
    assert a.samples != c.samples


def test_corpus_empty_and_size(templates):
    assert len(generate_corpus(templates, seed=1, n=0)) == 0
    assert len(generate_corpus(templates, seed=1, n=257)) == 257


def test_corpus_requires_templates_per_context(templates):
    crippled = dict(templates)
    crippled["templates"] = [t for t in templates["templates"] if "after_suggestion" not in t["contexts"]]
    with pytest.raises(ValueError):
        generate_corpus(crippled, seed=1, n=10)


def test_corpus_label_coverage(templates):
    corpus = generate_corpus(templates, seed=3, n=6000)
    seen = {c: set() for c in CONTEXTS}
    for _text, label, context in corpus.samples:
        seen[context].add(label.request_type)
    # confirm/reject are structurally absent from open requests, and a bare
    # "yes" to a suggestion is an accepted edit rather than a confirm
    assert seen["open_request"] == {"target_degree", "relative_change", "direction_only", "end", "other"}
    assert seen["after_degree_check"] == set(REQUEST_TYPES)
    assert seen["after_suggestion"] == set(REQUEST_TYPES) - {"confirm"}


def test_paper_example_surfaces(templates):
    corpus = generate_corpus(templates, seed=5, n=30000)
    by_text = {}
    for text, label, context in corpus.samples:
        by_text.setdefault(text, label)
    lets_make = by_text.get("let's make the bangs longer") or by_text.get("make the bangs longer")
    assert lets_make == EditingEncoding("direction_only", 0, "increase")
    extreme = by_text.get("let's try extremely long bangs that cover the entire forehead")
    assert extreme == EditingEncoding("target_degree", 0, "none", 5)


def test_filler_produces_relative_paper_example(templates):
    template = next(t for t in templates["templates"] if t["id"] == "relative_0")
    rng = np.random.default_rng(0)
    filler = _TemplateFiller(templates, rng)
    for _ in range(5000):
        text, label = filler.fill(template)
        if text == "the bangs can be slightly longer":
            assert label == EditingEncoding("relative_change", 0, "increase", 1)
            return
    pytest.fail("paper surface not reachable from template relative_0")


def test_magnitude_lexicon_is_total(templates):
    assert set(templates["magnitude_words"].values()) <= {1, 2}
    assert len(templates["magnitude_words"]) >= 6


def test_corpus_jsonl_roundtrip(templates):
    corpus = generate_corpus(templates, seed=2, n=50)
    back = corpus_from_jsonl(corpus_to_jsonl(corpus))
    assert back.samples == corpus.samples


# -- tokenizer / codec ---------------------------------------------------------------


def test_tokenize_strips_punctuation():
    assert tokenize("Let's try IT, now!") == ["let", "s", "try", "it", "now"]


def test_unseen_tokens_map_to_oov():
    vocab = {"<pad>": 0, "<oov>": 1, "bangs": 2}
    assert _encode_tokens(vocab, "bangs xylophone") == [2, 1]
    assert _encode_tokens(vocab, "") == [1]


def test_label_field_decode_roundtrip():
    cases = [
        EditingEncoding("target_degree", 1, "none", 4),
        EditingEncoding("relative_change", None, "decrease", -1),
        EditingEncoding("direction_only", 4, "increase"),
        EditingEncoding("confirm"),
        EditingEncoding("reject", None, "increase"),
        EditingEncoding("end"),
        EditingEncoding("other"),
    ]
    for enc in cases:
        assert _decode_fields(_label_fields(enc), type_confidence=1.0) == enc


def test_low_confidence_decodes_to_other():
    fields = _label_fields(EditingEncoding("end"))
    assert _decode_fields(fields, type_confidence=0.4) == EditingEncoding("other")


# -- encoder net ------------------------------------------------------------------------


def test_encoder_net_structure():
    net = EncoderNet(vocab_size=64)
    assert net.embedding.embedding_dim == 300
    assert net.lstm.hidden_size == 1024 and net.lstm.num_layers == 2
    assert set(net.heads.keys()) == set(CONTEXTS)
    for context in CONTEXTS:
        assert set(net.heads[context].keys()) == {
            "request_type", "attribute", "direction", "target_degree", "magnitude",
        }


def test_trunk_shared_across_contexts():
    net = EncoderNet(vocab_size=16)
    # one trunk instance serves every context; only heads differ
    assert len({id(net.embedding), id(net.lstm)}) == 2
    assert id(net.heads["open_request"]) != id(net.heads["after_suggestion"])


def test_train_encoder_requires_all_contexts(templates):
    corpus = generate_corpus(templates, seed=4, n=40)
    only_open = RequestCorpus(
        samples=[s for s in corpus.samples if s[2] == "open_request"], seed=4
    )
    with pytest.raises(ValueError):
        train_encoder(only_open, seed=0, epochs=1)
