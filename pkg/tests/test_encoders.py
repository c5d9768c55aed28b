import copy

import pytest
import torch

from mmenergy.encoders import (
    ToyTowerConfig,
    Vocabulary,
    as_image_batch,
    encode_image,
    encode_text,
    export_adapter_manifest,
    import_adapter_manifest,
    load_checkpoint,
    make_toy_towers,
    save_checkpoint,
)
from mmenergy.errors import CheckpointError, ConfigError, InputError
from mmenergy.seeding import make_generator


def _images(batch, resolution, seed=0):
    return torch.rand((batch, 3, resolution, resolution), generator=make_generator(seed, "imgs"))


# ---------------------------------------------------------------------------
# embeddings


def test_image_embeddings_unit_norm(toy_pair):
    emb = encode_image(toy_pair, _images(6, 32))
    norms = emb.norm(dim=1)
    assert torch.all((norms - 1).abs() <= 1e-6)
    assert emb.shape == (6, toy_pair.embed_dim)


def test_text_embeddings_unit_norm(toy_pair):
    tokens = toy_pair.vocab.encode(["a red circle", "a blue square", "a white cross"])
    emb = encode_text(toy_pair, tokens)
    assert torch.all((emb.norm(dim=1) - 1).abs() <= 1e-6)


def test_identical_inputs_identical_rows(toy_pair):
    img = _images(1, 32)
    batch = torch.cat([img, img], dim=0)
    emb = encode_image(toy_pair, batch)
    assert torch.equal(emb[0], emb[1])
    tokens = toy_pair.vocab.encode(["a red circle", "a red circle"])
    txt = encode_text(toy_pair, tokens)
    assert torch.equal(txt[0], txt[1])


def test_encoding_deterministic(toy_pair):
    img = _images(3, 32)
    assert torch.equal(encode_image(toy_pair, img), encode_image(toy_pair, img))


def test_trained_embeddings_distinct(quick_state):
    state, _, _ = quick_state
    tokens = state.pair.vocab.encode(["a red circle", "a blue square"])
    emb = encode_text(state.pair, tokens)
    assert float(emb[0] @ emb[1]) < 1 - 1e-4


def test_resolution_mismatch_rejected(toy_pair):
    with pytest.raises(ConfigError, match="resolution"):
        encode_image(toy_pair, _images(2, 16))


# ---------------------------------------------------------------------------
# input validation


def test_image_batch_validation():
    as_image_batch(torch.rand(2, 3, 8, 8))
    with pytest.raises(InputError):
        as_image_batch(torch.rand(3, 8, 8))  # missing batch dim
    with pytest.raises(InputError):
        as_image_batch(torch.rand(2, 1, 8, 8))  # wrong channels
    with pytest.raises(InputError):
        as_image_batch(torch.rand(2, 3, 8, 8) + 1.0)  # above box
    with pytest.raises(InputError):
        as_image_batch(torch.full((1, 3, 8, 8), float("nan")))
    with pytest.raises(InputError):
        as_image_batch((255 * torch.rand(2, 3, 8, 8)).to(torch.uint8))


def test_tokenizer_contract(toy_pair):
    vocab = toy_pair.vocab
    tokens = vocab.encode(["a red circle"])
    assert tokens.lengths.tolist() == [3]
    assert tokens.ids.shape[1] >= 3
    assert (tokens.ids[0, 3:] == 0).all()  # padded with the reserved id

    with pytest.raises(InputError, match="unknown word"):
        vocab.encode(["a mauve circle"])
    with pytest.raises(InputError):
        vocab.encode([""])
    with pytest.raises(InputError, match="exceeds"):
        vocab.encode(["a " * 20 + "circle"])
    with pytest.raises(InputError):
        vocab.encode([])


def test_vocabulary_construction():
    with pytest.raises(ConfigError):
        Vocabulary(["red", "red"])
    with pytest.raises(ConfigError):
        Vocabulary(["<pad>"])


def test_out_of_range_token_rejected(toy_pair):
    tokens = toy_pair.vocab.encode(["a red circle"])
    tokens.ids[0, 0] = len(toy_pair.vocab) + 5
    with pytest.raises(InputError, match="vocabulary"):
        encode_text(toy_pair, tokens)


# ---------------------------------------------------------------------------
# freezing


def test_text_tower_frozen(toy_pair):
    tokens = toy_pair.vocab.encode(["a red circle", "a blue square"])
    emb = encode_text(toy_pair, tokens)
    assert not emb.requires_grad
    for p in toy_pair.text_tower.parameters():
        assert p.grad is None
        assert not p.requires_grad


def test_vision_tower_trains_text_does_not(toy_pair):
    pair = copy.deepcopy(toy_pair)
    img = _images(2, 32)
    tokens = pair.vocab.encode(["a red circle", "a blue square"])
    loss = (encode_image(pair, img) * encode_text(pair, tokens)).sum()
    loss.backward()
    vision_grads = [p.grad for p in pair.vision_tower.parameters()]
    assert any(g is not None and g.abs().sum() > 0 for g in vision_grads)
    assert all(p.grad is None for p in pair.text_tower.parameters())


# ---------------------------------------------------------------------------
# construction determinism


def test_toy_towers_seeded():
    a = make_toy_towers(ToyTowerConfig(seed=1))
    b = make_toy_towers(ToyTowerConfig(seed=1))
    c = make_toy_towers(ToyTowerConfig(seed=2))
    for pa, pb in zip(a.vision_tower.parameters(), b.vision_tower.parameters()):
        assert torch.equal(pa, pb)
    assert any(
        not torch.equal(pa, pc)
        for pa, pc in zip(a.vision_tower.parameters(), c.vision_tower.parameters())
    )


def test_logit_scale_positive_required(toy_pair):
    with pytest.raises(ConfigError):
        make_toy_towers(ToyTowerConfig(logit_scale=0.0))


# ---------------------------------------------------------------------------
# finite differences (unit-scale; the full 100-probe run lives in acceptance)


def test_pixel_gradients_match_finite_differences():
    pair = make_toy_towers(ToyTowerConfig(resolution=16, embed_dim=32, seed=2))
    pair.vision_tower.double()
    pair.text_tower.double()
    # probes stay clear of the pixel box edges so the step never clips
    images = 0.1 + 0.8 * torch.rand(
        (2, 3, 16, 16), generator=make_generator(0, "fd"), dtype=torch.float64
    )
    tokens = pair.vocab.encode(["a red circle", "a blue square"])
    txt = encode_text(pair, tokens)

    leaf = images.clone().requires_grad_(True)
    cosine = (encode_image(pair, leaf) * txt).sum()
    grad = torch.autograd.grad(cosine, leaf)[0]

    gen = make_generator(1, "fd-probes")
    h = 1e-3
    for _ in range(10):
        b = int(torch.randint(2, (1,), generator=gen))
        c = int(torch.randint(3, (1,), generator=gen))
        i = int(torch.randint(16, (1,), generator=gen))
        j = int(torch.randint(16, (1,), generator=gen))
        plus = images.clone()
        minus = images.clone()
        plus[b, c, i, j] += h
        minus[b, c, i, j] -= h
        with torch.no_grad():
            f_plus = (encode_image(pair, plus) * txt).sum()
            f_minus = (encode_image(pair, minus) * txt).sum()
        fd = float(f_plus - f_minus) / float(plus[b, c, i, j] - minus[b, c, i, j])
        analytic = float(grad[b, c, i, j])
        assert abs(fd - analytic) / max(abs(analytic), 1e-6) < 1e-3


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_exact(toy_pair, tmp_path):
    path = tmp_path / "towers.ckpt"
    save_checkpoint(toy_pair, path)
    loaded = load_checkpoint(path)
    for (na, pa), (nb, pb) in zip(
        toy_pair.vision_tower.state_dict().items(), loaded.vision_tower.state_dict().items()
    ):
        assert na == nb and torch.equal(pa, pb)
    for (na, pa), (nb, pb) in zip(
        toy_pair.text_tower.state_dict().items(), loaded.text_tower.state_dict().items()
    ):
        assert na == nb and torch.equal(pa, pb)
    assert torch.equal(loaded.logit_scale, toy_pair.logit_scale)
    assert loaded.vocab.words == toy_pair.vocab.words

    img = _images(2, 32)
    assert torch.equal(encode_image(loaded, img), encode_image(toy_pair, img))
    tokens = toy_pair.vocab.encode(["a red circle"])
    assert torch.equal(encode_text(loaded, tokens), encode_text(toy_pair, tokens))


def test_checkpoint_bad_magic(toy_pair, tmp_path):
    path = tmp_path / "towers.ckpt"
    save_checkpoint(toy_pair, path)
    data = bytearray(path.read_bytes())
    data[:4] = b"ELF\x7f"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_loaded_text_still_frozen(toy_pair, tmp_path):
    path = tmp_path / "towers.ckpt"
    save_checkpoint(toy_pair, path)
    loaded = load_checkpoint(path)
    assert all(not p.requires_grad for p in loaded.text_tower.parameters())


# ---------------------------------------------------------------------------
# adapter manifest


def test_adapter_manifest_roundtrip(toy_pair, tmp_path):
    manifest = export_adapter_manifest(toy_pair, tmp_path / "export")
    loaded = import_adapter_manifest(manifest)
    img = _images(2, 32)
    assert torch.equal(encode_image(loaded, img), encode_image(toy_pair, img))


def test_adapter_unknown_architecture(toy_pair, tmp_path):
    manifest = export_adapter_manifest(toy_pair, tmp_path / "export")
    text = manifest.read_text().replace('"toy"', '"resnet50"')
    manifest.write_text(text)
    with pytest.raises(ConfigError, match="architecture"):
        import_adapter_manifest(manifest)
