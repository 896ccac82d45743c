"""Text autoencoder: tokenizer, vocabulary, encoding, decoding, training."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmodal import autodiff as ad
from xmodal.autodiff import ShapeError, Tensor
from xmodal.errors import FormatError
from xmodal.layers import bilstm_encode
from xmodal.text_ae import (TextAutoencoder, Vocabulary, decode_text, decoder_loss, detokenize,
                            encode_text, roundtrip, tokenize, train_text_autoencoder)

CORPUS = [
    (0, tokenize("a red circle on a white background")),
    (1, tokenize("there is a red square")),
    (2, tokenize("the triangle is red")),
    (5, tokenize("a green square on a white background")),
    (10, tokenize("the triangle is blue")),
]


def make_model(vocab, seed=0, max_len=24):
    return TextAutoencoder(len(vocab), 100, 50, np.random.default_rng(seed), max_len=max_len)


class TestTokenizer:
    def test_lowercase_and_punctuation(self):
        assert tokenize("A Red Circle, on a WHITE background!") == \
            ["a", "red", "circle", "on", "a", "white", "background"]

    def test_roundtrip(self):
        sentence = "a red circle on a white background"
        assert detokenize(tokenize(sentence)) == sentence

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.text(alphabet="abcz019", min_size=1, max_size=6), min_size=1, max_size=8))
    def test_roundtrip_property(self, words):
        sentence = " ".join(words)
        assert detokenize(tokenize(sentence)) == sentence


class TestVocabulary:
    def test_special_ids(self):
        vocab = Vocabulary.from_corpus(CORPUS)
        assert (vocab.PAD, vocab.BOS, vocab.EOS, vocab.UNK) == (0, 1, 2, 3)
        assert vocab.decode([0, 1, 2, 3]) == list(Vocabulary.SPECIALS)

    def test_bijective_over_words(self):
        vocab = Vocabulary.from_corpus(CORPUS)
        words = sorted({t for _, toks in CORPUS for t in toks})
        ids = vocab.encode(words)
        assert len(set(ids.tolist())) == len(words)
        assert vocab.decode(ids) == words

    def test_oov_maps_to_unk(self):
        vocab = Vocabulary.from_corpus(CORPUS)
        assert vocab.encode(["zeppelin"]).tolist() == [Vocabulary.UNK]

    def test_save_load_roundtrip(self, tmp_path):
        vocab = Vocabulary.from_corpus(CORPUS)
        vocab.save(tmp_path / "vocab.txt")
        loaded = Vocabulary.load(tmp_path / "vocab.txt")
        assert len(loaded) == len(vocab)
        words = ["red", "circle", "background"]
        assert loaded.encode(words).tolist() == vocab.encode(words).tolist()

    def test_load_rejects_bad_specials(self, tmp_path):
        (tmp_path / "bad.txt").write_text("<pad>\n<bos>\nwrong\n<unk>\nred\n")
        with pytest.raises(FormatError):
            Vocabulary.load(tmp_path / "bad.txt")


class TestEncode:
    def test_single_token_equals_concat_hidden(self):
        vocab = Vocabulary.from_corpus(CORPUS)
        model = make_model(vocab, seed=1)
        ids = vocab.encode(["red"])
        s = encode_text(model, ids)
        hidden = bilstm_encode(model.enc_fwd, model.enc_bwd, model.embed(ids[:, None]))
        np.testing.assert_allclose(s, hidden.data[0, 0], atol=1e-14)
        assert s.shape == (100,)

    def test_deterministic(self):
        vocab = Vocabulary.from_corpus(CORPUS)
        model = make_model(vocab, seed=2)
        ids = vocab.encode(CORPUS[0][1])
        assert np.array_equal(encode_text(model, ids), encode_text(model, ids))

    def test_empty_rejected(self):
        vocab = Vocabulary.from_corpus(CORPUS)
        model = make_model(vocab)
        with pytest.raises(ShapeError):
            encode_text(model, np.array([], dtype=np.int64))

    def test_too_long_rejected(self):
        vocab = Vocabulary.from_corpus(CORPUS)
        model = make_model(vocab, max_len=4)
        with pytest.raises(ShapeError):
            encode_text(model, vocab.encode(CORPUS[0][1]))

    def test_pooling_monotone_in_sequence_extension(self):
        # recorded hidden sequences: pooling over a prefix never exceeds
        # pooling over the full sequence
        vocab = Vocabulary.from_corpus(CORPUS)
        model = make_model(vocab, seed=3)
        ids = vocab.encode(CORPUS[0][1])
        from xmodal.layers import max_over_time
        hidden = bilstm_encode(model.enc_fwd, model.enc_bwd, model.embed(ids[:, None])).data
        for t in range(1, len(ids) + 1):
            prefix = max_over_time(Tensor(hidden[:t])).data
            full = max_over_time(Tensor(hidden)).data
            assert np.all(prefix <= full + 1e-15)


class TestDecode:
    def test_deterministic(self):
        vocab = Vocabulary.from_corpus(CORPUS)
        model = make_model(vocab, seed=4)
        s = np.random.default_rng(0).normal(size=100)
        assert decode_text(model, s) == decode_text(model, s)

    def test_no_pad_or_bos_and_truncation(self):
        vocab = Vocabulary.from_corpus(CORPUS)
        model = make_model(vocab, seed=5)
        for seed in range(10):
            s = np.random.default_rng(seed).normal(size=100) * 3.0
            out = decode_text(model, s, max_len=6)
            assert len(out) <= 6
            assert Vocabulary.PAD not in out
            assert Vocabulary.BOS not in out
            assert Vocabulary.EOS not in out

    def test_wrong_dimension_rejected(self):
        vocab = Vocabulary.from_corpus(CORPUS)
        model = make_model(vocab)
        with pytest.raises(ShapeError):
            decode_text(model, np.zeros(64))


class TestDecoderLoss:
    def test_uniform_predictor_gives_log_vocab(self):
        vocab = Vocabulary.from_corpus(CORPUS)
        model = make_model(vocab, seed=6)
        model.out.weight.data[...] = 0.0
        model.out.bias.data[...] = 0.0  # uniform logits
        ids = vocab.encode(CORPUS[0][1])[:, None]
        s = model.encode_ids(ids)
        bos = np.full((1, 1), Vocabulary.BOS, dtype=np.int64)
        eos = np.full((1, 1), Vocabulary.EOS, dtype=np.int64)
        loss = decoder_loss(model, s, np.concatenate([bos, ids]), np.concatenate([ids, eos]))
        assert loss.item() == pytest.approx(np.log(len(vocab)), abs=1e-12)

    def test_pad_targets_do_not_change_loss(self):
        vocab = Vocabulary.from_corpus(CORPUS)
        model = make_model(vocab, seed=7)
        ids = vocab.encode(CORPUS[1][1])[:, None]
        s = model.encode_ids(ids)
        bos = np.full((1, 1), Vocabulary.BOS, dtype=np.int64)
        eos = np.full((1, 1), Vocabulary.EOS, dtype=np.int64)
        inputs = np.concatenate([bos, ids])
        targets = np.concatenate([ids, eos])
        base = decoder_loss(model, s, inputs, targets).item()

        pad_in = np.concatenate([inputs, np.full((3, 1), Vocabulary.EOS, dtype=np.int64)])
        pad_tg = np.concatenate([targets, np.full((3, 1), Vocabulary.PAD, dtype=np.int64)])
        s2 = model.encode_ids(ids)
        padded = decoder_loss(model, s2, pad_in, pad_tg).item()
        assert padded == pytest.approx(base, abs=1e-12)

    def test_all_pad_rejected(self):
        vocab = Vocabulary.from_corpus(CORPUS)
        model = make_model(vocab)
        s = Tensor(np.zeros((1, 100)))
        with pytest.raises(ShapeError):
            decoder_loss(model, s, np.full((2, 1), 1), np.full((2, 1), Vocabulary.PAD))


class TestTraining:
    def test_loss_decreases(self):
        vocab = Vocabulary.from_corpus(CORPUS)
        model = make_model(vocab, seed=8)
        rng = np.random.default_rng(8)
        metrics = train_text_autoencoder(CORPUS, vocab, model, epochs=10, batch_size=1,
                                         lr=3e-3, rng=rng)
        values = [m["value"] for m in metrics]
        assert values[-1] < values[0]

    @pytest.mark.slow
    def test_small_corpus_overfits(self):
        vocab = Vocabulary.from_corpus(CORPUS)
        model = make_model(vocab, seed=9)
        rng = np.random.default_rng(9)
        train_text_autoencoder(CORPUS, vocab, model, epochs=40, batch_size=1, lr=3e-3, rng=rng)
        exact = sum(list(roundtrip(model, vocab.encode(toks))) == vocab.encode(toks).tolist()
                    for _, toks in CORPUS)
        assert exact >= 4

    def test_empty_corpus_rejected(self):
        vocab = Vocabulary.from_corpus(CORPUS)
        model = make_model(vocab)
        with pytest.raises(FormatError):
            train_text_autoencoder([], vocab, model, 1, 1, 1e-3, np.random.default_rng(0))
