"""Request understanding: template corpus, editing encodings, and the
context-routed recurrent encoder.

The same surface string can mean different things depending on what the
system just said ("yes" after a degree check closes the edit; "yes" after a
suggestion accepts the suggested attribute), so the encoder shares one word
embedding and LSTM trunk across contexts and routes through per-context
classification heads.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import torch
from torch import nn

from .backend import ATTRIBUTE_NAMES, MAX_DEGREE
from .predictor import TrainingGateError

CONTEXTS = ("open_request", "after_degree_check", "after_suggestion")
REQUEST_TYPES = ("target_degree", "relative_change", "direction_only", "confirm", "reject", "end", "other")
DIRECTIONS = ("increase", "decrease", "none")

PAD, OOV = 0, 1
_LOW_CONFIDENCE = 0.5


@dataclass(frozen=True)
class EditingEncoding:
    request_type: str
    attribute: int | None = None
    direction: str = "none"
    degree: int | None = None

    def __post_init__(self):
        if self.request_type not in REQUEST_TYPES:
            raise ValueError(f"bad request type {self.request_type!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"bad direction {self.direction!r}")
        if self.attribute is not None and not 0 <= self.attribute < len(ATTRIBUTE_NAMES):
            raise ValueError(f"bad attribute {self.attribute!r}")
        if self.request_type == "target_degree":
            if self.degree is None or not 0 <= self.degree <= MAX_DEGREE:
                raise ValueError("target_degree requires a degree in 0..5")
        elif self.request_type == "relative_change":
            if self.degree not in (-2, -1, 1, 2):
                raise ValueError("relative_change requires a signed magnitude in {-2,-1,1,2}")
            if (self.degree > 0) != (self.direction == "increase"):
                raise ValueError("relative sign must match the direction")
        elif self.degree is not None:
            raise ValueError(f"{self.request_type} carries no degree")
        if self.request_type in ("confirm", "reject", "end") and self.attribute is not None:
            raise ValueError(f"{self.request_type} carries no attribute")
        if self.request_type in ("confirm", "end") and self.direction != "none":
            raise ValueError(f"{self.request_type} carries no direction")

    def to_dict(self) -> dict:
        return {
            "request_type": self.request_type,
            "attribute": self.attribute,
            "direction": self.direction,
            "degree": self.degree,
        }

    @staticmethod
    def from_dict(doc: dict) -> "EditingEncoding":
        return EditingEncoding(
            request_type=doc["request_type"],
            attribute=doc.get("attribute"),
            direction=doc.get("direction", "none"),
            degree=doc.get("degree"),
        )


OTHER = EditingEncoding("other")


@dataclass
class RequestCorpus:
    samples: list  # of (text, EditingEncoding, context)
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)


def load_templates(path=None) -> dict:
    if path is not None:
        return json.loads(open(path).read())
    return json.loads(resources.files("talkedit.data").joinpath("templates.json").read_text())


def tokenize(text: str) -> list:
    return re.sub(r"[^a-z0-9 ]", " ", text.lower()).split()


def _attr_index(name: str) -> int:
    return ATTRIBUTE_NAMES.index(name)


class _TemplateFiller:
    """Expands one template into (text, label) given a seeded rng."""

    def __init__(self, doc: dict, rng):
        self.doc = doc
        self.rng = rng

    def pick(self, seq):
        return seq[self.rng.integers(len(seq))]

    def fill(self, template: dict):
        doc, pattern = self.doc, template["pattern"]
        rule = template["label_rule"]
        text = pattern
        attr_name = template.get("attribute")

        if "{degree_phrase}" in text:
            attr_name = attr_name or self.pick(ATTRIBUTE_NAMES)
            degree = int(self.rng.integers(6))
            text = text.replace("{degree_phrase}", self.pick(doc["degree_phrases"][attr_name][str(degree)]))
            label = EditingEncoding("target_degree", _attr_index(attr_name), "none", degree)
        elif rule == "target_from_phrase":
            raise ValueError(f"template {template['id']} lacks a degree phrase slot")

        if "{attrless_degree}" in text:
            degree = self.pick(list(doc["attributeless_degree_phrases"]))
            text = text.replace("{attrless_degree}", self.pick(doc["attributeless_degree_phrases"][degree]))
            label = EditingEncoding("target_degree", None, "none", int(degree))

        direction = template.get("direction")
        if "{attr}" in text:
            attr_name = attr_name or self.pick(ATTRIBUTE_NAMES)
            text = text.replace("{attr}", self.pick(doc["attribute_nouns"][attr_name]))
        if "{dir}" in text:
            direction = self.pick(("increase", "decrease"))
            text = text.replace("{dir}", self.pick(doc["direction_words"][attr_name][direction]))
        if "{generic_dir}" in text:
            direction = self.pick(("increase", "decrease"))
            text = text.replace("{generic_dir}", self.pick(doc["generic_direction_words"][direction]))
        if "{generic_dir_inc}" in text:
            direction = "increase"
            text = text.replace("{generic_dir_inc}", self.pick(doc["generic_direction_words"]["increase"]))

        magnitude = None
        if "{mag}" in text:
            word = self.pick(list(doc["magnitude_words"]))
            magnitude = doc["magnitude_words"][word]
            text = text.replace("{mag}", word)

        if "{pron}" in text:
            text = text.replace("{pron}", self.pick(doc["pronouns"]))
        if "{polite}" in text:
            text = text.replace("{polite}", self.pick(doc["polite"]))
        text = " ".join(text.split())

        attr = _attr_index(attr_name) if attr_name else None
        if rule == "relative":
            label = EditingEncoding("relative_change", attr, direction, magnitude if direction == "increase" else -magnitude)
        elif rule == "direction":
            label = EditingEncoding("direction_only", attr, direction)
        elif rule == "direction_fixed":
            label = EditingEncoding("direction_only", attr, template["direction"])
        elif rule == "confirm":
            label = EditingEncoding("confirm")
        elif rule == "reject":
            label = EditingEncoding("reject")
        elif rule == "reject_directed":
            label = EditingEncoding("reject", None, direction)
        elif rule == "relative_refine":
            label = EditingEncoding("relative_change", None, direction, magnitude if direction == "increase" else -magnitude)
        elif rule == "direction_refine":
            label = EditingEncoding("direction_only", None, direction)
        elif rule == "accept_suggestion":
            # "yes" to a suggestion accepts an edit of the suggested attribute
            label = EditingEncoding("direction_only", None, "increase")
        elif rule == "accept_suggestion_relative":
            label = EditingEncoding("relative_change", None, "increase", magnitude)
        elif rule == "end":
            label = EditingEncoding("end")
        elif rule == "other":
            label = EditingEncoding("other")
        elif rule in ("target_from_phrase", "accept_suggestion_degree"):
            pass  # label already bound by the phrase slot
        else:
            raise ValueError(f"unknown label rule {rule!r}")
        return text, label


_CONTEXT_WEIGHTS = {"open_request": 0.5, "after_degree_check": 0.3, "after_suggestion": 0.2}


def generate_corpus(templates: dict, seed: int, n: int) -> RequestCorpus:
    """Sample (text, label, context) triples uniformly over each context's
    template pool; labels are exact by construction."""
    by_context = {c: [t for t in templates["templates"] if c in t["contexts"]] for c in CONTEXTS}
    for c, pool in by_context.items():
        if not pool:
            raise ValueError(f"no templates available for context {c}")
    rng = np.random.default_rng(seed)
    filler = _TemplateFiller(templates, rng)
    names = list(_CONTEXT_WEIGHTS)
    weights = np.array([_CONTEXT_WEIGHTS[c] for c in names])
    samples = []
    for _ in range(n):
        context = names[rng.choice(len(names), p=weights)]
        template = by_context[context][rng.integers(len(by_context[context]))]
        text, label = filler.fill(template)
        samples.append((text, label, context))
    meta = {
        "seed": seed,
        "n": n,
        "template_count": len(templates["templates"]),
        "context_weights": _CONTEXT_WEIGHTS,
    }
    return RequestCorpus(samples=samples, seed=seed, meta=meta)


def corpus_to_jsonl(corpus: RequestCorpus) -> str:
    lines = [json.dumps({"meta": corpus.meta})]
    for text, label, context in corpus.samples:
        lines.append(json.dumps({"text": text, "label": label.to_dict(), "context": context}))
    return "\n".join(lines) + "\n"


def corpus_from_jsonl(text: str) -> RequestCorpus:
    lines = text.strip().splitlines()
    meta = json.loads(lines[0])["meta"]
    samples = []
    for line in lines[1:]:
        doc = json.loads(line)
        samples.append((doc["text"], EditingEncoding.from_dict(doc["label"]), doc["context"]))
    return RequestCorpus(samples=samples, seed=meta.get("seed", -1), meta=meta)


# -- label codec -------------------------------------------------------------

_HEAD_SIZES = {
    "request_type": len(REQUEST_TYPES),
    "attribute": len(ATTRIBUTE_NAMES) + 1,
    "direction": len(DIRECTIONS),
    "target_degree": MAX_DEGREE + 2,
    "magnitude": 3,
}


def _label_fields(enc: EditingEncoding) -> dict:
    return {
        "request_type": REQUEST_TYPES.index(enc.request_type),
        "attribute": len(ATTRIBUTE_NAMES) if enc.attribute is None else enc.attribute,
        "direction": DIRECTIONS.index(enc.direction),
        "target_degree": enc.degree if enc.request_type == "target_degree" else MAX_DEGREE + 1,
        "magnitude": abs(enc.degree) if enc.request_type == "relative_change" else 0,
    }


def _decode_fields(fields: dict, type_confidence: float) -> EditingEncoding:
    rt = REQUEST_TYPES[fields["request_type"]]
    if type_confidence < _LOW_CONFIDENCE:
        return OTHER
    attr = None if fields["attribute"] == len(ATTRIBUTE_NAMES) else int(fields["attribute"])
    direction = DIRECTIONS[fields["direction"]]
    tdeg = None if fields["target_degree"] == MAX_DEGREE + 1 else int(fields["target_degree"])
    mag = int(fields["magnitude"])
    try:
        if rt == "target_degree":
            return EditingEncoding(rt, attr, "none", tdeg)
        if rt == "relative_change":
            degree = mag if direction == "increase" else -mag
            return EditingEncoding(rt, attr, direction, degree)
        if rt == "direction_only":
            return EditingEncoding(rt, attr, direction)
        if rt == "reject":
            return EditingEncoding(rt, None, direction)
        if rt in ("confirm", "end"):
            return EditingEncoding(rt)
    except ValueError:
        return OTHER
    return OTHER


# -- encoder model --------------------------------------------------------------


class EncoderNet(nn.Module):
    def __init__(self, vocab_size: int, emb_dim: int = 300, hidden: int = 1024, layers: int = 2):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, emb_dim, padding_idx=PAD)
        self.lstm = nn.LSTM(emb_dim, hidden, num_layers=layers, batch_first=True)
        self.heads = nn.ModuleDict(
            {
                context: nn.ModuleDict({name: nn.Linear(hidden, size) for name, size in _HEAD_SIZES.items()})
                for context in CONTEXTS
            }
        )

    def trunk(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        emb = self.embedding(tokens)
        packed = nn.utils.rnn.pack_padded_sequence(
            emb, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        _, (h, _) = self.lstm(packed)
        return h[-1]

    def head_logits(self, context: str, hidden: torch.Tensor) -> dict:
        return {name: head(hidden) for name, head in self.heads[context].items()}


@dataclass
class EncoderModel:
    net: EncoderNet
    vocab: dict
    seed: int
    meta: dict = field(default_factory=dict)


def _encode_tokens(vocab: dict, text: str, max_len: int = 16):
    ids = [vocab.get(tok, OOV) for tok in tokenize(text)][:max_len]
    if not ids:
        ids = [OOV]
    return ids


def _batch_tensors(vocab, texts):
    seqs = [_encode_tokens(vocab, t) for t in texts]
    lengths = torch.as_tensor([len(s) for s in seqs])
    width = int(lengths.max())
    out = torch.full((len(seqs), width), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s)
    return out, lengths


def train_encoder(
    corpus: RequestCorpus,
    seed: int,
    epochs: int = 6,
    batch_size: int = 2048,
    lr: float = 1e-3,
    target_exact: float = 0.97,
) -> EncoderModel:
    """Joint training of the shared trunk and per-context heads; stops early
    once held-out exact-match accuracy is comfortable."""
    contexts_present = {c for _, _, c in corpus.samples}
    if contexts_present != set(CONTEXTS):
        raise ValueError(f"corpus must cover all contexts, has {sorted(contexts_present)}")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)

    order = rng.permutation(len(corpus.samples))
    n_holdout = max(1, len(order) // 10)
    hold_idx, train_idx = order[:n_holdout], order[n_holdout:]

    vocab = {"<pad>": PAD, "<oov>": OOV}
    for i in train_idx:
        for tok in tokenize(corpus.samples[i][0]):
            vocab.setdefault(tok, len(vocab))

    net = EncoderNet(len(vocab))
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    ce = nn.CrossEntropyLoss()

    def eval_split(idx):
        exact = 0
        head_hits = {name: 0 for name in _HEAD_SIZES}
        with torch.no_grad():
            for context in CONTEXTS:
                sub = [i for i in idx if corpus.samples[i][2] == context]
                if not sub:
                    continue
                texts = [corpus.samples[i][0] for i in sub]
                tokens, lengths = _batch_tensors(vocab, texts)
                hidden = net.trunk(tokens, lengths)
                logits = net.head_logits(context, hidden)
                fields = {name: lg.argmax(dim=1).numpy() for name, lg in logits.items()}
                conf = torch.softmax(logits["request_type"], dim=1).max(dim=1).values.numpy()
                for row, i in enumerate(sub):
                    truth = corpus.samples[i][1]
                    truth_fields = _label_fields(truth)
                    for name in _HEAD_SIZES:
                        head_hits[name] += int(fields[name][row] == truth_fields[name])
                    decoded = _decode_fields({n: int(fields[n][row]) for n in _HEAD_SIZES}, conf[row])
                    exact += decoded == truth
        total = len(idx)
        return exact / total, {name: hits / total for name, hits in head_hits.items()}

    history = []
    for epoch in range(epochs):
        perm = rng.permutation(train_idx)
        for start in range(0, len(perm), batch_size):
            batch = perm[start : start + batch_size]
            texts = [corpus.samples[i][0] for i in batch]
            tokens, lengths = _batch_tensors(vocab, texts)
            hidden = net.trunk(tokens, lengths)
            loss = hidden.new_zeros(())
            for context in CONTEXTS:
                rows = [r for r, i in enumerate(batch) if corpus.samples[i][2] == context]
                if not rows:
                    continue
                sel = torch.as_tensor(rows)
                logits = net.head_logits(context, hidden[sel])
                for name in _HEAD_SIZES:
                    targets = torch.as_tensor(
                        [_label_fields(corpus.samples[batch[r]][1])[name] for r in rows]
                    )
                    loss = loss + ce(logits[name], targets)
            opt.zero_grad()
            loss.backward()
            opt.step()
        exact, heads = eval_split(hold_idx)
        history.append({"epoch": epoch, "exact": exact, "heads": heads})
        if exact >= target_exact:
            break

    exact, heads = eval_split(hold_idx)
    if min(heads.values()) < 0.90:
        raise TrainingGateError(f"encoder head accuracy below 0.90: {heads}")
    net.eval()
    net.requires_grad_(False)
    meta = {
        "seed": seed,
        "epochs_run": len(history),
        "embedding_dim": 300,
        "lstm_cells": 1024,
        "lstm_layers": 2,
        "batch_size": batch_size,
        "lr": lr,
        "vocab_size": len(vocab),
        "holdout_exact_match": exact,
        "holdout_head_accuracy": heads,
        "history": history,
    }
    return EncoderModel(net=net, vocab=vocab, seed=seed, meta=meta)


def encode_request(model: EncoderModel, text: str, context: str) -> EditingEncoding:
    """Parse one utterance in the given dialog context."""
    if context not in CONTEXTS:
        raise ValueError(f"unknown context {context!r}")
    tokens, lengths = _batch_tensors(model.vocab, [text])
    with torch.no_grad():
        hidden = model.net.trunk(tokens, lengths)
        logits = model.net.head_logits(context, hidden)
    fields = {name: int(lg[0].argmax()) for name, lg in logits.items()}
    confidence = float(torch.softmax(logits["request_type"][0], dim=0).max())
    return _decode_fields(fields, confidence)


def save_encoder(model: EncoderModel, path) -> None:
    blob = {
        "format": "talkedit-encoder-v1",
        "meta": model.meta,
        "vocab": model.vocab,
        "seed": model.seed,
        "state": model.net.state_dict(),
    }
    torch.save(blob, path)


def load_encoder(path) -> EncoderModel:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != "talkedit-encoder-v1":
        raise ValueError(f"not an encoder checkpoint: {path}")
    net = EncoderNet(len(blob["vocab"]))
    net.load_state_dict(blob["state"])
    net.eval()
    net.requires_grad_(False)
    return EncoderModel(net=net, vocab=blob["vocab"], seed=blob["seed"], meta=blob["meta"])
