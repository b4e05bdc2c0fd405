"""CLIP embedder adapter on top of ``transformers`` (optional plug-in).

Only one CLIP model is wrapped per embedder. How two models (e.g. ViT-B/16
and ViT-B/32) should be combined in the losses is left to the caller.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from difa.backbones.base import Embedder
from difa.core import RangeError, ShapeError

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

HF_NAMES = {
    "clip-vit-b16": "openai/clip-vit-base-patch16",
    "clip-vit-b32": "openai/clip-vit-base-patch32",
}


def _features(out) -> torch.Tensor:
    # transformers < 5 returns a tensor, >= 5 a model output whose pooler_output is projected
    return out if isinstance(out, torch.Tensor) else out.pooler_output


class CLIPEmbedder(Embedder):
    """Wraps a ``transformers.CLIPModel``; images in [-1, 1] of any size.

    ``tokenize`` maps a list of strings to the keyword arguments of
    ``get_text_features`` (``input_ids``, ``attention_mask``).
    """

    def __init__(self, model, tokenize: Callable[[list[str]], dict], vocabulary: Sequence[str] = ()):
        super().__init__()
        self.model = model.eval().requires_grad_(False)
        self.tokenize = tokenize
        self.vocabulary = tuple(vocabulary)
        vision = model.config.vision_config
        self.embed_dim = model.config.projection_dim
        self.depth = vision.num_hidden_layers
        self.image_size = self.input_size = vision.image_size
        dtype = next(model.parameters()).dtype
        self.register_buffer("mean", torch.tensor(CLIP_MEAN, dtype=dtype)[None, :, None, None])
        self.register_buffer("std", torch.tensor(CLIP_STD, dtype=dtype)[None, :, None, None])

    @classmethod
    def from_pretrained(cls, name: str) -> CLIPEmbedder:
        from transformers import CLIPModel, CLIPTokenizer

        hf_name = HF_NAMES.get(name, name)
        model = CLIPModel.from_pretrained(hf_name)
        tokenizer = CLIPTokenizer.from_pretrained(hf_name)
        vocab = sorted(
            w[:-4] for w in tokenizer.get_vocab() if w.endswith("</w>") and w[:-4].isalpha()
        )

        def tokenize(texts):
            enc = tokenizer(texts, padding=True, return_tensors="pt")
            return {"input_ids": enc["input_ids"], "attention_mask": enc["attention_mask"]}

        return cls(model, tokenize, vocab)

    def _pixels(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected images (B, 3, H, W), got {tuple(images.shape)}")
        x = (images.to(self.mean.dtype) + 1.0) / 2.0
        if x.shape[-1] != self.image_size or x.shape[-2] != self.image_size:
            x = F.interpolate(x, size=(self.image_size, self.image_size), mode="bicubic", align_corners=False)
        return (x - self.mean) / self.std

    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        feats = _features(self.model.get_image_features(pixel_values=self._pixels(images)))
        return F.normalize(feats, dim=-1)

    def extract_tokens(self, images: torch.Tensor, k: int) -> torch.Tensor:
        if not 1 <= k <= self.depth:
            raise RangeError(f"token layer must be in [1, {self.depth}], got {k}")
        out = self.model.vision_model(pixel_values=self._pixels(images), output_hidden_states=True)
        # hidden_states[0] is the patch embedding; drop the class token
        return out.hidden_states[k][:, 1:, :]

    def embed_text(self, texts: Sequence[str]) -> torch.Tensor:
        texts = list(texts)
        if any(not t.strip() for t in texts):
            raise ValueError("cannot embed an empty text")
        feats = _features(self.model.get_text_features(**self.tokenize(texts)))
        return F.normalize(feats, dim=-1)
