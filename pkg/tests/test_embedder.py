import numpy as np
import pytest
import torch
from PIL import Image

from conftest import save_png
from dfacon.detector import build_index, query_vector
from dfacon.embedder import (
    IMAGENET_MEAN,
    INPUT_SIZE,
    EncoderConfig,
    ProbePoint,
    ProjectionHead,
    ProjectionHeadConfig,
    load_rgb,
    make_encoder,
    preprocess,
    preprocess_paths,
)
from dfacon.errors import ConfigurationError, ContractError, DecodeError, NumericError, ResourceError, ShapeError


def images(rng, n, size=32):
    return torch.stack([preprocess(rng.integers(0, 256, (size, size, 3), dtype=np.uint8)) for _ in range(n)])


def test_preprocess_downscales():
    x = preprocess(np.zeros((448, 448, 3), np.uint8))
    assert tuple(x.shape) == (3, INPUT_SIZE, INPUT_SIZE)


def test_mean_image_normalizes_to_zero():
    img = np.broadcast_to(np.array(IMAGENET_MEAN, np.float32), (17, 23, 3))
    assert torch.allclose(preprocess(img), torch.zeros(3, INPUT_SIZE, INPUT_SIZE), atol=1e-6)


def test_single_pixel_image_becomes_constant():
    x = preprocess(np.array([[[200, 10, 90]]], np.uint8))
    assert tuple(x.shape) == (3, INPUT_SIZE, INPUT_SIZE)
    for c in range(3):
        assert torch.allclose(x[c], x[c, 0, 0].expand(INPUT_SIZE, INPUT_SIZE))


def test_preprocess_accepts_pil_and_rejects_bad_input():
    assert preprocess(Image.new("L", (5, 5))).shape == (3, INPUT_SIZE, INPUT_SIZE)
    with pytest.raises(DecodeError):
        preprocess(np.zeros((4, 4), np.uint8))
    with pytest.raises(DecodeError):
        preprocess(Image.new("CMYK", (4, 4)))


def test_corrupt_file_is_decode_error(tmp_path):
    (tmp_path / "x.png").write_bytes(b"\x89PNG garbage")
    with pytest.raises(DecodeError, match="x.png"):
        load_rgb(tmp_path / "x.png")


def test_toy_unit_vectors_at_both_probes(rng):
    h = make_encoder("toy_cnn", dim=64, seed=7)
    x = images(rng, 4)
    enc = h.embed(x, ProbePoint.ENCODER_OUTPUT)
    proj = h.embed(x, ProbePoint.PROJECTION_OUTPUT)
    assert enc.shape == (4, 64) and proj.shape == (4, 128)
    assert np.allclose(np.linalg.norm(enc, axis=1), 1, atol=1e-6)
    assert np.allclose(np.linalg.norm(proj, axis=1), 1, atol=1e-6)
    assert h.dim(ProbePoint.ENCODER_OUTPUT) != h.dim(ProbePoint.PROJECTION_OUTPUT)


def test_same_image_twice_gives_identical_vectors(toy_handle, rng):
    x = images(rng, 1)
    e = toy_handle.embed(torch.cat([x, x]))
    assert float(e[0] @ e[1]) == pytest.approx(1.0, abs=1e-6)


def test_batch_order_equivariance(toy_handle, rng):
    x = images(rng, 5)
    perm = [3, 0, 4, 1, 2]
    assert np.allclose(toy_handle.embed(x)[perm], toy_handle.embed(x[perm]), atol=1e-6)


def test_seeded_construction_is_deterministic(rng):
    x = images(rng, 2)
    a = make_encoder("toy_cnn", dim=32, seed=3).embed(x)
    b = make_encoder("toy_cnn", dim=32, seed=3).embed(x)
    assert np.array_equal(a, b)
    assert make_encoder("toy_cnn", seed=3).fingerprint() != make_encoder("toy_cnn", seed=4).fingerprint()


def test_construction_leaves_global_rng_alone():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    make_encoder("toy_cnn", seed=99)
    assert torch.equal(torch.rand(3), expected)


def test_wrong_spatial_size_is_shape_error(toy_handle):
    with pytest.raises(ShapeError):
        toy_handle.embed(torch.zeros(1, 3, 64, 64))


def test_nonfinite_activation_names_layer(rng):
    h = make_encoder("toy_cnn", seed=0)
    with torch.no_grad():
        h.model.encoder.features[1][0].weight.fill_(float("inf"))
    with pytest.raises(NumericError, match="encoder"):
        h.embed(images(rng, 1))


def test_head_variants():
    mlp = ProjectionHead(ProjectionHeadConfig("mlp", 64, 64, 128))
    lin = ProjectionHead(ProjectionHeadConfig("linear", 64, 64, 128))
    assert sum(isinstance(m, torch.nn.Linear) for m in mlp.modules()) == 2
    assert any(isinstance(m, torch.nn.ReLU) for m in mlp.modules())
    assert sum(isinstance(m, torch.nn.Linear) for m in lin.modules()) == 1
    assert not any(isinstance(m, torch.nn.ReLU) for m in lin.modules())
    with pytest.raises(ConfigurationError):
        ProjectionHeadConfig("deep")


def test_reference_cnn_shapes_and_determinism(rng):
    h = make_encoder("reference_cnn", EncoderConfig(weights="random", seed=5))
    x = images(rng, 1)
    a = h.embed(x, ProbePoint.ENCODER_OUTPUT)
    assert a.shape == (1, 2048)
    assert np.allclose(np.linalg.norm(a), 1.0, atol=1e-6)
    assert np.array_equal(a, h.embed(x, ProbePoint.ENCODER_OUTPUT))
    p = h.embed(torch.cat([x] * 4), ProbePoint.PROJECTION_OUTPUT)
    assert p.shape == (4, 128)
    assert h.head_config == ProjectionHeadConfig("mlp", 2048, 2048, 128)


def test_unknown_weight_source():
    with pytest.raises(ResourceError):
        make_encoder("toy_cnn", EncoderConfig(weights="pretrained"))
    with pytest.raises(ResourceError):
        make_encoder("reference_cnn", EncoderConfig(weights="somewhere"))


# -- external provider -----------------------------------------------------------

def _provider(table, dim=None):
    def provide(paths):
        return [(p, table[p], dim or len(table[p])) for p in paths]
    return provide


def test_external_round_trip_through_detector(tmp_path):
    table = {}
    originals = []
    for k, v in enumerate(np.eye(3)):
        p = save_png(tmp_path / f"{k}.png", np.full((4, 4, 3), k * 50))
        table[p] = v * (k + 1)
        originals.append((f"art{k}", p))
    enc = make_encoder("external", provider=_provider(table), dim=3)
    assert not enc.trainable
    index = build_index(originals, enc)
    v = query_vector(index, table[originals[1][1]], threshold=0.9, k=3)
    assert v.best_match == "art1" and v.infringing
    assert v.topk[0][1] == pytest.approx(1.0)


def test_external_contract_violations(tmp_path):
    p = save_png(tmp_path / "a.png", np.zeros((2, 2, 3)))
    bad_dim = make_encoder("external", provider=_provider({p: [1.0, 0.0]}, dim=2), dim=3)
    with pytest.raises(ContractError):
        bad_dim.embed_paths([p])
    ok = make_encoder("external", provider=_provider({p: [1.0, 0.0, 0.0]}), dim=3)
    with pytest.raises(ContractError):
        ok.embed_paths([p], ProbePoint.PROJECTION_OUTPUT)
    with pytest.raises(ConfigurationError):
        make_encoder("external")


def test_embed_paths_matches_embed(toy_handle, synth_dir):
    paths = sorted(str(p) for p in (synth_dir / "originals").iterdir())[:3]
    assert np.allclose(toy_handle.embed_paths(paths, batch_size=2), toy_handle.embed(preprocess_paths(paths)))
