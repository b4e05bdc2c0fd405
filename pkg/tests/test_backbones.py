import numpy as np
import pytest
import torch

from difa.backbones import (
    BackboneUnavailable,
    clone_generator,
    generator_from_checkpoint,
    load_backbones,
    load_generator,
    parameter_hash,
)
from difa.backbones.toy import TOY_VOCABULARY, ToyEmbedder
from difa.core import Checkpoint, RangeError, ShapeError, fingerprint
from difa.trainer import sample_z
from helpers import FD_RTOL, check_directional, param_directional, rel_err, unit

N_PROBES = 50


class TestGenerator:
    def test_deterministic_range(self, toy):
        g = toy.generator
        z = sample_z(0, 2, g.z_dim)
        with torch.no_grad():
            a, b = g.generate(z), g.generate(z.clone())
        assert a.shape == (2, 3, 32, 32)
        assert torch.equal(a, b)
        assert a.min() >= -1 and a.max() <= 1
        assert not torch.equal(a[0], a[1])

    def test_same_seed_same_weights(self):
        assert parameter_hash(load_generator("toy", 3)) == parameter_hash(load_generator("toy", 3))
        assert parameter_hash(load_generator("toy", 3)) != parameter_hash(load_generator("toy", 4))

    def test_layer_layout(self, toy):
        g = toy.generator
        assert g.num_layers == 4 and g.w_dim == 8
        assert list(g.layer_resolutions) == [4, 8, 16, 32]
        assert g.mapping(sample_z(0, 3, g.z_dim)).shape == (3, 4, 8)

    def test_bad_shapes(self, toy):
        g = toy.generator
        with pytest.raises(ShapeError):
            g.generate(torch.zeros(2, g.z_dim + 1, dtype=torch.float64))
        with pytest.raises(ShapeError):
            g.synthesis(torch.zeros(2, 3, 8, dtype=torch.float64))

    def test_single_coordinate_jvp(self, toy):
        g = toy.generator
        z = sample_z(5, 1, g.z_dim)
        eps = 1e-3
        for i in range(g.z_dim):
            e = torch.zeros_like(z)
            e[0, i] = 1.0
            with torch.no_grad():
                fd = ((g.generate(z + eps * e) - g.generate(z - eps * e)) / (2 * eps)).norm()
            _, jvp = torch.func.jvp(g.generate, (z,), (e,))
            assert rel_err(float(fd), float(jvp.norm())) < FD_RTOL

    def test_fd_wrt_latent(self, toy):
        g = toy.generator
        rng = torch.Generator().manual_seed(0)
        for _ in range(N_PROBES):
            z = torch.randn(2, g.z_dim, generator=rng, dtype=torch.float64)
            r = torch.randn(2, 3, 32, 32, generator=rng, dtype=torch.float64)
            u = unit(torch.randn(z.shape, generator=rng, dtype=torch.float64))
            err, fd, an = check_directional(lambda x: (g.generate(x) * r).sum(), z, u)
            assert err < FD_RTOL, (fd, an)

    def test_fd_wrt_parameters(self, toy):
        g = clone_generator(toy.generator)
        rng = torch.Generator().manual_seed(1)
        z = sample_z(9, 2, g.z_dim)
        for _ in range(20):
            r = torch.randn(2, 3, 32, 32, generator=rng, dtype=torch.float64)
            direction = {k: torch.randn(p.shape, generator=rng, dtype=torch.float64) for k, p in g.named_parameters()}
            norm = sum(float((d**2).sum()) for d in direction.values()) ** 0.5
            direction = {k: d / norm for k, d in direction.items()}
            err, fd, an = param_directional(g, lambda call: (call(z) * r).sum(), direction)
            assert err < FD_RTOL, (fd, an)


class TestClone:
    def test_copy_semantics(self, toy):
        g = toy.generator
        c = clone_generator(g)
        for (na, pa), (nb, pb) in zip(g.named_parameters(), c.named_parameters()):
            assert na == nb and torch.equal(pa, pb)
        z = sample_z(1, 2, g.z_dim)
        with torch.no_grad():
            assert torch.equal(g.generate(z), c.generate(z))

    def test_independence(self, toy):
        g = toy.generator
        before = parameter_hash(g)
        c = clone_generator(g)
        with torch.no_grad():
            next(c.parameters()).add_(1.0)
        assert parameter_hash(g) == before
        opt = torch.optim.Adam(c.parameters(), lr=0.1)
        c.generate(sample_z(2, 2, g.z_dim)).square().sum().backward()
        opt.step()
        assert parameter_hash(g) == before
        assert all(p.grad is None for p in g.parameters())

    def test_clone_is_trainable(self, toy):
        assert all(not p.requires_grad for p in toy.generator.parameters())
        assert all(p.requires_grad for p in clone_generator(toy.generator).parameters())


class TestEncoder:
    def test_zero_image_gives_bias(self, toy):
        enc = toy.encoder
        code = enc.invert(torch.zeros(1, 3, 32, 32, dtype=torch.float64))
        assert torch.equal(code.reshape(-1), enc.bias)

    def test_single_pixel_fd(self, toy, toy_images):
        enc = toy.encoder
        rng = np.random.default_rng(0)
        for _ in range(N_PROBES):
            u = torch.zeros(1, 3, 32, 32, dtype=torch.float64)
            u[0, rng.integers(3), rng.integers(32), rng.integers(32)] = 1.0
            err, fd, an = check_directional(lambda x: enc.invert(x).sum(), toy_images[:1], u)
            assert err < FD_RTOL, (fd, an)

    def test_random_direction_fd(self, toy, toy_images):
        enc = toy.encoder
        rng = torch.Generator().manual_seed(2)
        for _ in range(N_PROBES):
            r = torch.randn(4, 4, 8, generator=rng, dtype=torch.float64)
            u = unit(torch.randn(toy_images.shape, generator=rng, dtype=torch.float64))
            err, _, _ = check_directional(lambda x: (enc.invert(x) * r).sum(), toy_images, u)
            assert err < FD_RTOL

    def test_injective_on_distinct_images(self, toy, toy_images):
        codes = toy.encoder.invert(toy_images[:2])
        assert codes.shape == (2, 4, 8)
        assert not torch.allclose(codes[0], codes[1])

    def test_approximate_inverse(self, toy):
        g = toy.generator
        z = sample_z(77, 64, g.z_dim)
        with torch.no_grad():
            w = g.mapping(z)
            rec = toy.encoder.invert(g.synthesis(w))
        rel = float((rec - w).norm() / w.norm())
        # lossy by construction, but far better than predicting the mean code
        assert 0 < rel < 0.5

    def test_wrong_shape(self, toy):
        with pytest.raises(ShapeError):
            toy.encoder.invert(torch.zeros(1, 3, 16, 16, dtype=torch.float64))


class TestEmbedder:
    def test_unit_norm_random_inputs(self, toy):
        rng = torch.Generator().manual_seed(3)
        x = torch.rand(1000, 3, 32, 32, generator=rng, dtype=torch.float64) * 2 - 1
        norms = toy.embedder.embed_image(x).norm(dim=1)
        assert torch.all((norms - 1).abs() <= 1e-5)

    def test_duplicate_in_batch(self, toy, toy_images):
        v = toy.embedder.embed_image(torch.stack([toy_images[0], toy_images[0]]))
        assert torch.equal(v[0], v[1])

    def test_cosine_gradient_fd(self, toy, toy_images):
        emb = toy.embedder
        e0 = torch.zeros(emb.embed_dim, dtype=torch.float64)
        e0[0] = 1.0
        rng = torch.Generator().manual_seed(4)
        for i in range(N_PROBES):
            x = toy_images[i % 4][None]
            u = unit(torch.randn(x.shape, generator=rng, dtype=torch.float64))
            err, fd, an = check_directional(lambda y: emb.embed_image(y)[0] @ e0, x, u)
            assert err < FD_RTOL, (fd, an)

    def test_token_gradient_fd(self, toy, toy_images):
        emb = toy.embedder
        rng = torch.Generator().manual_seed(5)
        for k in (1, 2, 3, 4):
            for _ in range(5):
                r = torch.randn(emb.extract_tokens(toy_images[:1], k).shape, generator=rng, dtype=torch.float64)
                u = unit(torch.randn(1, 3, 32, 32, generator=rng, dtype=torch.float64))
                err, _, _ = check_directional(lambda y: (emb.extract_tokens(y, k) * r).sum(), toy_images[:1], u)
                assert err < FD_RTOL

    def test_token_counts(self, toy, toy_images):
        emb = toy.embedder
        counts = [emb.extract_tokens(toy_images, k).shape[1] for k in range(1, emb.depth + 1)]
        assert counts == [16, 16, 4, 4]
        assert emb.extract_tokens(toy_images, 1).shape == (4, 16, emb.token_dim)

    def test_tokens_deterministic(self, toy, toy_images):
        a = toy.embedder.extract_tokens(toy_images, 2)
        b = toy.embedder.extract_tokens(toy_images.clone(), 2)
        assert torch.equal(a, b)

    @pytest.mark.parametrize("k", [0, 5])
    def test_token_layer_range(self, toy, toy_images, k):
        with pytest.raises(RangeError):
            toy.embedder.extract_tokens(toy_images, k)

    def test_text_deterministic_unit(self, toy):
        emb = toy.embedder
        texts = ["a red shape", "a red shape", "unseen words here", "tiger"]
        v = emb.embed_text(texts)
        assert torch.equal(v[0], v[1])
        assert torch.all((v.norm(dim=1) - 1).abs() <= 1e-5)
        assert torch.equal(emb.embed_text(["unseen"]), emb.embed_text(["unseen"]))

    def test_text_lookup_table(self):
        vectors = torch.eye(3, 16, dtype=torch.float64)
        emb = ToyEmbedder(0, vocabulary=("a", "b", "c"), word_vectors=vectors)
        assert torch.equal(emb.embed_text(["a"])[0], vectors[0])
        assert torch.equal(emb.vocabulary_embeddings(), vectors)

    def test_empty_text(self, toy):
        with pytest.raises(ValueError):
            toy.embedder.embed_text(["   "])

    def test_vocabulary(self, toy):
        assert len(TOY_VOCABULARY) == 64 == len(set(TOY_VOCABULARY))
        assert toy.embedder.vocabulary_embeddings().shape == (64, 16)

    def test_frozen(self, toy):
        for module in (toy.encoder, toy.embedder, toy.generator):
            assert not any(p.requires_grad for p in module.parameters())


class TestRegistry:
    def test_toy_bundle(self):
        b = load_backbones("toy", 0)
        assert b.name == "toy" and b.seed == 0
        assert b.generator.w_dim == b.encoder.w_dim

    @pytest.mark.parametrize("name", ["stylegan2", "nope"])
    def test_unavailable_generator(self, name):
        with pytest.raises(BackboneUnavailable, match=name):
            load_backbones(name)

    @pytest.mark.parametrize("role", ["e4e", "pSp"])
    def test_unavailable_encoder(self, role):
        with pytest.raises(BackboneUnavailable):
            load_backbones("toy", 0, encoder=role)

    def test_generator_from_checkpoint(self, toy):
        g = clone_generator(toy.generator)
        with torch.no_grad():
            for p in g.parameters():
                p.mul_(1.5)
        ckpt = Checkpoint(g.weights(), __import__("difa").AdaptConfig(), 0, fingerprint(toy.generator.weights()))
        restored = generator_from_checkpoint(ckpt)
        z = sample_z(0, 2, g.z_dim)
        with torch.no_grad():
            assert torch.equal(restored.generate(z), g.generate(z))
        assert not any(p.requires_grad for p in restored.parameters())


@pytest.fixture(scope="module")
def clip():
    transformers = pytest.importorskip("transformers")
    from difa.backbones.clip import CLIPEmbedder

    cfg = transformers.CLIPConfig(
        text_config=dict(vocab_size=32, hidden_size=16, intermediate_size=32, num_hidden_layers=2,
                         num_attention_heads=2, max_position_embeddings=8),
        vision_config=dict(hidden_size=16, intermediate_size=32, num_hidden_layers=3, num_attention_heads=2,
                           image_size=32, patch_size=8),
        projection_dim=12,
    )
    torch.manual_seed(0)
    model = transformers.CLIPModel(cfg).double()
    words = ["a", "red", "shape", "tiger"]

    def tokenize(texts):
        ids = [[1 + words.index(w) % 30 if w in words else 31 for w in t.split()] for t in texts]
        width = max(map(len, ids))
        return {
            "input_ids": torch.tensor([i + [0] * (width - len(i)) for i in ids]),
            "attention_mask": torch.tensor([[1] * len(i) + [0] * (width - len(i)) for i in ids]),
        }

    return CLIPEmbedder(model, tokenize, words)


class TestCLIPAdapter:
    """A tiny randomly initialized CLIP model; no pretrained download."""

    def test_contract(self, clip, toy_images):
        v = clip.embed_image(toy_images)
        assert v.shape == (4, 12)
        assert torch.all((v.norm(dim=1) - 1).abs() <= 1e-5)
        assert clip.extract_tokens(toy_images, 2).shape == (4, 16, 16)
        with pytest.raises(RangeError):
            clip.extract_tokens(toy_images, clip.depth + 1)
        t = clip.embed_text(["a red shape", "tiger"])
        assert t.shape == (2, 12)
        assert clip.vocabulary_embeddings().shape == (4, 12)

    def test_resizes_input(self, clip):
        x = torch.zeros(1, 3, 48, 40, dtype=torch.float64)
        assert clip.embed_image(x).shape == (1, 12)
