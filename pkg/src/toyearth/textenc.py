"""Tokenizer and contrastive dual text/image encoder.

One small transformer tower produces both the tokenwise embeddings used to
condition the denoiser and a pooled unit-norm vector used for contrastive
retrieval, zero-shot classification and similarity scoring. The word-level
vocabulary is derived from the caption grammar with a byte fallback, so
tokenization never fails on unseen text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import data as toydata
from .checkpoints import CheckpointManifest, load_manifest, load_state, save_checkpoint
from .seeding import seeded_init, torch_generator
from .vae import images_from_manifest, to_bchw

PAD_TOKEN = "<pad>"
VOCAB_FILE = "vocab.txt"


def build_vocabulary() -> list[str]:
    """Pad token, 256 byte-fallback tokens, then the grammar's words."""
    words: set[str] = set(toydata.COUNT_WORDS)
    for templates in toydata._TEMPLATES.values():
        for t in templates:
            words.update(re.sub(r"\{[a-z_]+\}", " ", t).split())
    for color in toydata.PALETTE:
        words.update(color.split("_"))
    words.update(["tank", "tanks", "building", "buildings", "field", "fields"])
    vocab = [PAD_TOKEN] + [f"<0x{i:02x}>" for i in range(256)]
    vocab += sorted(words)
    return vocab


@dataclass
class TokenSeq:
    ids: list[int]
    attention_mask: list[int]


class Tokenizer:
    def __init__(self, vocab: list[str], max_len: int = 32):
        self.vocab = vocab
        self.max_len = max_len
        self.index = {tok: i for i, tok in enumerate(vocab)}

    def tokenize(self, text: str) -> TokenSeq:
        """Lowercased word lookup with per-byte fallback, padded to max_len."""
        ids: list[int] = []
        for word in re.sub(r"[^\w\s]", " ", text.lower()).split():
            if word in self.index:
                ids.append(self.index[word])
            else:
                ids.extend(self.index[f"<0x{b:02x}>"] for b in word.encode("utf-8"))
        ids = ids[: self.max_len]
        mask = [1] * len(ids)
        pad = self.max_len - len(ids)
        return TokenSeq(ids=ids + [0] * pad, attention_mask=mask + [0] * pad)

    def save(self, path: Path) -> None:
        path.write_text("\n".join(self.vocab) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path, max_len: int = 32) -> "Tokenizer":
        return cls(path.read_text(encoding="utf-8").splitlines(), max_len=max_len)


@dataclass
class TextEncConfig:
    embed_dim: int = 128
    max_len: int = 32
    layers: int = 2
    heads: int = 4
    image_width: int = 16
    temperature_min: float = 0.01
    temperature_max: float = 1.0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")


@dataclass
class TextEmbedding:
    tokenwise: np.ndarray
    pooled: np.ndarray


class SelfAttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.norm1(x)).reshape(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / (d // h) ** 0.5
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(out)
        return x + self.mlp(self.norm2(x))


class TextTower(nn.Module):
    def __init__(self, vocab_size: int, config: TextEncConfig, seed: int = 0):
        super().__init__()
        d = config.embed_dim
        with seeded_init(seed, "text-tower"):
            self.token_embed = nn.Embedding(vocab_size, d)
            self.pos_embed = nn.Parameter(torch.randn(config.max_len, d) * 0.02)
            self.blocks = nn.ModuleList(
                SelfAttentionBlock(d, config.heads) for _ in range(config.layers)
            )
            self.norm = nn.LayerNorm(d)
            self.pool_proj = nn.Linear(d, d)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """ids, mask: [B, L] -> (tokenwise [B, L, d], pooled unit-norm [B, d])."""
        x = self.token_embed(ids) + self.pos_embed
        # all-padding rows would make softmax undefined; let them attend to
        # the pad positions instead (output is discarded by the pooling mask)
        valid = mask.any(dim=1, keepdim=True)
        key_mask = torch.where(valid, mask.bool(), torch.ones_like(mask, dtype=torch.bool))
        for block in self.blocks:
            x = block(x, key_mask)
        tokenwise = self.norm(x)
        weights = mask.float()
        denom = weights.sum(dim=1, keepdim=True).clamp(min=1.0)
        pooled = self.pool_proj((tokenwise * weights[..., None]).sum(dim=1) / denom)
        return tokenwise, F.normalize(pooled, dim=-1, eps=1e-8)


class ImageTower(nn.Module):
    def __init__(self, config: TextEncConfig, seed: int = 0):
        super().__init__()
        w = config.image_width
        with seeded_init(seed, "image-tower"):
            self.net = nn.Sequential(
                nn.Conv2d(3, w, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.SiLU(),
            )
            self.proj = nn.Linear(4 * w, config.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.net(x).mean(dim=(2, 3))
        return F.normalize(self.proj(h), dim=-1, eps=1e-8)


class DualEncoder(nn.Module):
    def __init__(self, vocab_size: int, config: TextEncConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.text = TextTower(vocab_size, config, seed)
        self.image = ImageTower(config, seed)
        self.log_scale = nn.Parameter(torch.tensor(float(np.log(1 / 0.07))))

    def clamp_temperature(self) -> None:
        lo = float(np.log(1.0 / self.config.temperature_max))
        hi = float(np.log(1.0 / self.config.temperature_min))
        with torch.no_grad():
            self.log_scale.clamp_(lo, hi)

    @property
    def temperature(self) -> float:
        return float(torch.exp(-self.log_scale.detach()))


def _to_tensor_tokens(tokens: TokenSeq, max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    if len(tokens.ids) != max_len or len(tokens.attention_mask) != max_len:
        raise ValueError(
            f"token sequence length {len(tokens.ids)} does not match configured {max_len}"
        )
    ids = torch.tensor([tokens.ids], dtype=torch.long)
    mask = torch.tensor([tokens.attention_mask], dtype=torch.long)
    return ids, mask


@torch.no_grad()
def embed_text(model: DualEncoder, tokens: TokenSeq) -> TextEmbedding:
    ids, mask = _to_tensor_tokens(tokens, model.config.max_len)
    tokenwise, pooled = model.text(ids, mask)
    return TextEmbedding(tokenwise=tokenwise[0].numpy(), pooled=pooled[0].numpy())


@torch.no_grad()
def embed_image(model: DualEncoder, image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3] image, got {image.shape}")
    x = to_bchw(image[None])
    return model.image(x)[0].numpy()


def contrastive_loss(
    text_emb: torch.Tensor, image_emb: torch.Tensor, log_scale: torch.Tensor
) -> torch.Tensor:
    """Symmetric InfoNCE over in-batch pairs."""
    if text_emb.shape[0] < 2:
        raise ValueError("contrastive loss needs batch size >= 2")
    logits = log_scale.exp() * text_emb @ image_emb.T
    labels = torch.arange(text_emb.shape[0])
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def retrieval_top1(similarity: np.ndarray) -> tuple[float, float]:
    """(text->image, image->text) top-1 accuracy on a pairwise matrix."""
    n = similarity.shape[0]
    t2i = float(np.mean(similarity.argmax(axis=1) == np.arange(n)))
    i2t = float(np.mean(similarity.argmax(axis=0) == np.arange(n)))
    return t2i, i2t


def argmax_lowest(scores: np.ndarray) -> int:
    """Index of the maximum score; ties resolve to the lowest index."""
    return int(np.argmax(scores))


@torch.no_grad()
def zero_shot_classify(
    model: DualEncoder, tokenizer: Tokenizer, image: np.ndarray, class_prompts: list[str]
) -> tuple[int, np.ndarray]:
    if not class_prompts:
        raise ValueError("class_prompts must be non-empty")
    img_emb = embed_image(model, image)
    scores = np.array(
        [float(img_emb @ embed_text(model, tokenizer.tokenize(p)).pooled) for p in class_prompts]
    )
    return argmax_lowest(scores), scores


@dataclass
class ContrastiveTrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 8
    seed: int = 0


def train_contrastive(
    manifest: toydata.Manifest,
    config: TextEncConfig,
    train_config: ContrastiveTrainConfig,
    out_dir: Path | str,
) -> CheckpointManifest:
    """Contrastively align caption and image embeddings; write a checkpoint."""
    if train_config.batch_size < 2:
        raise ValueError("contrastive training needs batch size >= 2")
    records = manifest.select(split="train", modality="RGB")
    if not records:
        raise ValueError("manifest has no RGB records in split 'train'")
    images = to_bchw(images_from_manifest(manifest, "train"))
    tokenizer = Tokenizer(build_vocabulary(), max_len=config.max_len)
    token_ids, masks = _tokenize_all(tokenizer, [r.caption for r in records])

    model = DualEncoder(len(tokenizer.vocab), config, seed=train_config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=train_config.lr)
    gen = torch_generator(train_config.seed, "clip-train")
    n = images.shape[0]
    history = []
    for epoch in range(train_config.epochs):
        perm = torch.randperm(n, generator=gen)
        total, batches = 0.0, 0
        for start in range(0, n - 1, train_config.batch_size):
            sel = perm[start : start + train_config.batch_size]
            if sel.shape[0] < 2:
                continue
            _, pooled = model.text(token_ids[sel], masks[sel])
            img_emb = model.image(images[sel])
            loss = contrastive_loss(pooled, img_emb, model.log_scale)
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.clamp_temperature()
            total += loss.item()
            batches += 1
        history.append({"epoch": epoch, "train_loss": total / batches})

    val = _retrieval_eval(model, tokenizer, manifest, split="val", limit=64)
    metrics = {
        "history": history,
        "val_retrieval_t2i": val[0],
        "val_retrieval_i2t": val[1],
        "temperature": model.temperature,
        "vocab_size": len(tokenizer.vocab),
    }
    out_dir = Path(out_dir)
    checkpoint = save_checkpoint(
        out_dir, "textenc", model.state_dict(),
        config={"model": asdict(config), "train": asdict(train_config)},
        metrics=metrics,
    )
    tokenizer.save(out_dir / VOCAB_FILE)
    return checkpoint


def _tokenize_all(tokenizer: Tokenizer, texts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
    seqs = [tokenizer.tokenize(t) for t in texts]
    ids = torch.tensor([s.ids for s in seqs], dtype=torch.long)
    masks = torch.tensor([s.attention_mask for s in seqs], dtype=torch.long)
    return ids, masks


@torch.no_grad()
def _retrieval_eval(
    model: DualEncoder, tokenizer: Tokenizer, manifest: toydata.Manifest,
    split: str, limit: int,
) -> tuple[float, float]:
    records = manifest.select(split=split, modality="RGB")[:limit]
    images = to_bchw(np.stack([toydata.load_image(manifest.path_of(r)) for r in records]))
    ids, masks = _tokenize_all(tokenizer, [r.caption for r in records])
    _, pooled = model.text(ids, masks)
    sim = (pooled @ model.image(images).T).numpy()
    return retrieval_top1(sim)


def load_textenc(path: Path | str) -> tuple[DualEncoder, Tokenizer, CheckpointManifest]:
    manifest = load_manifest(path, produced_by="toyearth train clip")
    config = TextEncConfig(**manifest.config["model"])
    tokenizer = Tokenizer.load(Path(path) / VOCAB_FILE, max_len=config.max_len)
    model = DualEncoder(len(tokenizer.vocab), config)
    model.load_state_dict(load_state(path, produced_by="toyearth train clip"))
    model.eval()
    return model, tokenizer, manifest
