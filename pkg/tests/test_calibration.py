import pytest

from core.calibration import (
    Corpus,
    byte_histogram,
    chi_squared_distance,
    decode,
    encode,
    generate_corpus,
    load_calibration,
    load_corpus,
    sample_calibration,
    save_calibration,
    save_corpus,
    split_corpus,
)
from core.errors import ArgumentError, InputError
from core.metrics import corpus_perplexity


def test_byte_tokenizer():
    assert encode("Hi!") == [72, 105, 33]
    assert decode(encode("café")) == "café".encode("utf-8")
    with pytest.raises(InputError):
        decode([256])


@pytest.mark.parametrize("kind", ["markov", "template"])
def test_generated_corpora(kind):
    corpus = generate_corpus(kind, seed=3, size=50)
    assert len(corpus) == 50
    assert all(doc for doc in corpus.documents)
    assert corpus.fingerprint == generate_corpus(kind, seed=3, size=50).fingerprint
    assert corpus.fingerprint != generate_corpus(kind, seed=4, size=50).fingerprint
    assert len(generate_corpus(kind, seed=3, size=1)) == 1


def test_corpus_kinds_and_tags():
    assert generate_corpus("markov", 0, 5).source_tag == "general"
    assert generate_corpus("template", 0, 5).source_tag == "task_a"
    with pytest.raises(ArgumentError):
        generate_corpus("wiki", 0, 5)
    with pytest.raises(ArgumentError):
        generate_corpus("markov", 0, 0)
    with pytest.raises(InputError):
        Corpus([b"ok", b""])


def test_task_corpus_is_distinguishable_from_general():
    general_a = byte_histogram(generate_corpus("markov", 1, 300))
    general_b = byte_histogram(generate_corpus("markov", 2, 300))
    task = byte_histogram(generate_corpus("template", 1, 300))
    assert chi_squared_distance(general_a, task) > 5 * chi_squared_distance(general_a, general_b)
    assert chi_squared_distance(general_a, task) == pytest.approx(
        chi_squared_distance(task, general_a)
    )


def test_split_corpus():
    corpus = generate_corpus("markov", 5, 40)
    train, held = split_corpus(corpus, 0.25, seed=1)
    assert (len(train), len(held)) == (30, 10)
    assert sorted(train.documents + held.documents) == sorted(corpus.documents)
    again = split_corpus(corpus, 0.25, seed=1)
    assert again[1].documents == held.documents
    with pytest.raises(ArgumentError):
        split_corpus(corpus, 1.0, seed=1)


def test_corpus_file_round_trip(tmp_path):
    corpus = Corpus([b"plain", b"two\nlines", b"back\\slash\r"], "task_b")
    save_corpus(corpus, tmp_path / "corpus.txt")
    loaded = load_corpus(tmp_path / "corpus.txt", "task_b")
    assert loaded.documents == corpus.documents
    assert loaded.fingerprint == corpus.fingerprint


def test_calibration_sampling():
    corpus = generate_corpus("markov", 7, 20)
    calibration = sample_calibration(corpus, 8, 32, seed=2)
    assert len(calibration.sequences) == 8
    assert all(1 <= len(seq) <= 32 for seq in calibration.sequences)
    assert not calibration.with_replacement
    assert len(set(calibration.document_indices)) == 8
    assert calibration.fingerprint == sample_calibration(corpus, 8, 32, seed=2).fingerprint
    assert calibration.fingerprint != sample_calibration(corpus, 8, 32, seed=3).fingerprint


def test_calibration_larger_than_corpus(caplog):
    corpus = generate_corpus("template", 0, 3)
    calibration = sample_calibration(corpus, 10, 64, seed=0)
    assert calibration.with_replacement
    assert len(calibration.sequences) == 10
    assert "with replacement" in caplog.text


def test_calibration_argument_checks():
    corpus = generate_corpus("template", 0, 3)
    with pytest.raises(ArgumentError):
        sample_calibration(corpus, 0, 16, seed=0)
    with pytest.raises(ArgumentError):
        sample_calibration(corpus, 2, 0, seed=0)


def test_single_token_calibration_cannot_be_scored(make_model):
    calibration = sample_calibration(generate_corpus("markov", 0, 10), 4, 1, seed=0)
    assert all(len(seq) == 1 for seq in calibration.sequences)
    with pytest.raises(ArgumentError):
        corpus_perplexity(calibration, make_model())


def test_calibration_file_round_trip(tmp_path):
    corpus = generate_corpus("markov", 9, 30)
    calibration = sample_calibration(corpus, 6, 24, seed=5)
    save_calibration(calibration, tmp_path / "calibration.json")
    loaded = load_calibration(tmp_path / "calibration.json", corpus)
    assert loaded.sequences == calibration.sequences
    assert loaded.fingerprint == calibration.fingerprint
    with pytest.raises(InputError):
        load_calibration(tmp_path / "calibration.json", generate_corpus("markov", 10, 30))
