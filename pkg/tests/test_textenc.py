"""Tests for the tokenizer and the contrastive dual encoder."""

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

import toyearth.data as D
from toyearth.textenc import (
    ContrastiveTrainConfig,
    DualEncoder,
    TextEncConfig,
    Tokenizer,
    argmax_lowest,
    build_vocabulary,
    contrastive_loss,
    embed_image,
    embed_text,
    load_textenc,
    retrieval_top1,
    train_contrastive,
    zero_shot_classify,
)


@pytest.fixture(scope="module")
def tokenizer():
    return Tokenizer(build_vocabulary())


@pytest.fixture(scope="module")
def model(tokenizer):
    return DualEncoder(len(tokenizer.vocab), TextEncConfig(), seed=5).eval()


class TestTokenizer:
    def test_empty_text_is_all_padding(self, tokenizer):
        seq = tokenizer.tokenize("")
        assert seq.ids == [0] * 32
        assert seq.attention_mask == [0] * 32

    def test_deterministic(self, tokenizer):
        assert tokenizer.tokenize("forest") == tokenizer.tokenize("forest")

    def test_long_caption_truncates_with_full_mask(self, tokenizer):
        text = " ".join(["forest"] * 40)
        seq = tokenizer.tokenize(text)
        assert len(seq.ids) == 32
        assert seq.attention_mask == [1] * 32

    def test_grammar_words_hit_vocabulary_not_bytes(self, tokenizer):
        seq = tokenizer.tokenize("three white storage tanks")
        assert sum(seq.attention_mask) == 4

    def test_unknown_words_fall_back_to_bytes(self, tokenizer):
        seq = tokenizer.tokenize("zq")
        assert sum(seq.attention_mask) == 2
        assert all(1 <= i <= 256 for i in seq.ids[:2])

    def test_ids_below_vocab_size(self, tokenizer):
        for i in range(50):
            seq = tokenizer.tokenize(D.caption(D.sample_spec(i)))
            assert max(seq.ids) < len(tokenizer.vocab)

    def test_save_load_roundtrip(self, tokenizer, tmp_path):
        tokenizer.save(tmp_path / "vocab.txt")
        again = Tokenizer.load(tmp_path / "vocab.txt")
        assert again.vocab == tokenizer.vocab


class TestEmbeddings:
    def test_text_embedding_shapes_and_norm(self, model, tokenizer):
        emb = embed_text(model, tokenizer.tokenize("a dense forest"))
        assert emb.tokenwise.shape == (32, 128)
        assert np.linalg.norm(emb.pooled) == pytest.approx(1.0, abs=1e-5)

    def test_text_embedding_deterministic(self, model, tokenizer):
        seq = tokenizer.tokenize("wide open blue water")
        a, b = embed_text(model, seq), embed_text(model, seq)
        assert np.array_equal(a.tokenwise, b.tokenwise)
        assert np.array_equal(a.pooled, b.pooled)

    def test_image_embedding_norm_and_determinism(self, model):
        img = D.render_tile(D.sample_spec(3))
        a, b = embed_image(model, img), embed_image(model, img)
        assert np.array_equal(a, b)
        assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-5)

    def test_length_mismatch_rejected(self, model):
        from toyearth.textenc import TokenSeq

        with pytest.raises(ValueError, match="length"):
            embed_text(model, TokenSeq(ids=[1, 2], attention_mask=[1, 1]))

    def test_empty_text_still_embeds(self, model, tokenizer):
        emb = embed_text(model, tokenizer.tokenize(""))
        assert np.isfinite(emb.pooled).all()
        assert np.linalg.norm(emb.pooled) == pytest.approx(1.0, abs=1e-5)


class TestContrastiveLoss:
    def test_initial_loss_near_log_batch(self):
        gen = torch.Generator().manual_seed(0)
        b = 64
        t = torch.nn.functional.normalize(torch.randn(b, 128, generator=gen), dim=-1)
        i = torch.nn.functional.normalize(torch.randn(b, 128, generator=gen), dim=-1)
        loss = contrastive_loss(t, i, torch.tensor(0.0)).item()
        assert abs(loss - np.log(b)) < 0.2 * np.log(b)

    def test_batch_below_two_rejected(self):
        one = torch.randn(1, 8)
        with pytest.raises(ValueError, match="batch"):
            contrastive_loss(one, one, torch.tensor(0.0))

    def test_retrieval_matches_brute_force(self):
        rng = np.random.default_rng(0)
        sim = rng.normal(size=(16, 16))
        t2i, i2t = retrieval_top1(sim)
        brute_t2i = np.mean([int(np.argmax(sim[r]) == r) for r in range(16)])
        brute_i2t = np.mean([int(np.argmax(sim[:, c]) == c) for c in range(16)])
        assert t2i == pytest.approx(brute_t2i)
        assert i2t == pytest.approx(brute_i2t)


class TestZeroShot:
    def test_single_prompt_always_index_zero(self, model, tokenizer):
        img = D.render_tile(D.sample_spec(1))
        idx, scores = zero_shot_classify(model, tokenizer, img, ["a forest"])
        assert idx == 0 and scores.shape == (1,)

    def test_duplicate_prompts_get_identical_scores(self, model, tokenizer):
        img = D.render_tile(D.sample_spec(2))
        _, scores = zero_shot_classify(model, tokenizer, img, ["water", "water"])
        assert scores[0] == scores[1]

    def test_empty_prompt_list_rejected(self, model, tokenizer):
        with pytest.raises(ValueError, match="non-empty"):
            zero_shot_classify(model, tokenizer, D.render_tile(D.sample_spec(0)), [])

    @given(
        st.lists(st.floats(-1, 1), min_size=1, max_size=12),
        st.floats(min_value=1e-3, max_value=1e3),
    )
    def test_scale_invariance_of_argmax(self, scores, scale):
        scores = np.array(scores)
        assert argmax_lowest(scores) == argmax_lowest(scores * scale)


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("clipdata")
    return D.build_dataset(D.BuildConfig(96, 24, 24, 21, str(out / "ds")))


class TestTraining:
    def test_smoke_epoch_and_temperature_clamp(self, tiny_manifest, tmp_path):
        cfg = TextEncConfig(embed_dim=32, layers=1, heads=2, image_width=8)
        cp = train_contrastive(
            tiny_manifest, cfg, ContrastiveTrainConfig(epochs=1, batch_size=32), tmp_path / "te"
        )
        assert cfg.temperature_min <= cp.metrics["temperature"] <= cfg.temperature_max
        model, tokenizer, manifest2 = load_textenc(tmp_path / "te")
        assert manifest2.content_hash == cp.content_hash
        emb = embed_text(model, tokenizer.tokenize("a forest"))
        assert np.isfinite(emb.pooled).all()

    def test_retrieval_above_chance_after_training(self, tiny_manifest, tmp_path):
        cfg = TextEncConfig(embed_dim=32, layers=1, heads=2, image_width=8)
        cp = train_contrastive(
            tiny_manifest, cfg, ContrastiveTrainConfig(epochs=6, batch_size=32), tmp_path / "te"
        )
        assert cp.metrics["val_retrieval_t2i"] > 1 / 24

    def test_batch_size_one_rejected(self, tiny_manifest, tmp_path):
        with pytest.raises(ValueError, match="batch"):
            train_contrastive(
                tiny_manifest, TextEncConfig(), ContrastiveTrainConfig(batch_size=1), tmp_path / "x"
            )
