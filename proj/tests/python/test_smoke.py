import json
import math

import numpy as np
import pytest

import clipcap


def test_normalize_and_caption():
    assert clipcap.normalize("  A Red,  CAR! ") == "a red car"
    c = clipcap.Caption.parse("A red car.")
    assert c.tokens == ["a", "red", "car"]
    assert len(c) == 3


def test_vocabulary_round_trip():
    corpus = [clipcap.Caption.parse(s) for s in ["a red car", "a blue car"]]
    vocab = clipcap.Vocabulary.build(corpus, 1)
    ids = vocab.encode(corpus[0])
    assert vocab.decode(ids) == "a red car"
    assert "car" in vocab


def test_negative_generation_is_seeded():
    corpus = [clipcap.Caption.parse("the red cube is left of the blue ball")]
    vocab = clipcap.Vocabulary.build(corpus, 1)
    cfg = clipcap.NegativeGenConfig()
    a = clipcap.generate_negative(corpus[0], vocab, cfg, clipcap.Rng(3))
    b = clipcap.generate_negative(corpus[0], vocab, cfg, clipcap.Rng(3))
    assert a[0] == b[0] and a[1] == b[1]
    assert a[1] in {"repeat", "remove", "insert", "swap", "shuffle"}


def test_short_caption_raises():
    c = clipcap.Caption.parse("a cube")
    vocab = clipcap.Vocabulary.build([clipcap.Caption.parse("a red cube")], 1)
    with pytest.raises(clipcap.Error):
        clipcap.generate_negative(c, vocab, clipcap.NegativeGenConfig(), clipcap.Rng(0))


def test_clip_s():
    v = np.array([1.0, 2.0, 3.0])
    assert clipcap.clip_s(v, 4 * v) == pytest.approx(2.5)
    assert clipcap.clip_s(v, -v) == 0.0


def test_metrics_identity():
    refs = {"1": ["a man rides a brown horse"], "2": ["two dogs play in the park"]}
    cands = {k: v[0] for k, v in refs.items()}
    assert clipcap.bleu4(cands, refs) == pytest.approx(100.0)
    assert clipcap.rouge_l(cands, refs) == pytest.approx(100.0)
    assert clipcap.cider_d(cands, refs) == pytest.approx(10.0)
    assert clipcap.word_recall({"1": "a blue car"}, {"1": ["blue car", "red"]}) == pytest.approx(50.0)
    assert clipcap.repetition_rate("a cube a cube") == pytest.approx(1 - 2 / 3)


def test_retrieval_identity():
    e = np.eye(4)
    r = clipcap.retrieval_recall(e, e, [1])
    assert r[1] == pytest.approx(100.0)


def test_cli_generate_world(tmp_path):
    out = tmp_path / "world"
    assert clipcap.run_cli(["generate-world", "--n", "12", "--seed", "1", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["outputs"]
    assert clipcap.run_cli(["no-such-command"]) == 2
