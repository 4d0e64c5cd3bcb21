import numpy as np
import pytest
import torch

from divert.bench import generate_dataset
from divert.detector import (DTYPE, DetectorError, ToyDetector, ToyDetectorConfig, evaluate_detector,
                             forward, image_batch, load_checkpoint, load_split, save_checkpoint,
                             train_toy_detector)
from divert.losses import detection_loss
from divert.types import ImageTensor


def _images(rng, n, size=32):
    return torch.from_numpy(rng.uniform(0, 1, (n, 3, size, size))).to(DTYPE)


def test_forward_is_deterministic(tiny_detector):
    x = _images(np.random.default_rng(0), 2)
    e = tiny_detector.default_prompt()
    a, b = tiny_detector(x, e), tiny_detector(x, e)
    assert torch.equal(a.class_logits, b.class_logits) and torch.equal(a.mask_logits, b.mask_logits)
    assert a.class_logits.shape == (2, 2) and a.mask_logits.shape == (2, 32, 32)
    assert len(a.head_maps) == 2 and a.head_maps[0].shape == (2, 2, 4, 4)


def test_single_pixel_gradient_matches_central_difference(tiny_detector):
    rng = np.random.default_rng(1)
    e = tiny_detector.default_prompt()
    for _ in range(5):
        x = _images(rng, 1).requires_grad_(True)
        (g,) = torch.autograd.grad(tiny_detector(x, e).class_logits[0, 1], x)
        c, i, j = rng.integers(0, 3), rng.integers(0, 32), rng.integers(0, 32)
        h = 1e-5
        xp, xm = x.detach().clone(), x.detach().clone()
        xp[0, c, i, j] += h
        xm[0, c, i, j] -= h
        with torch.no_grad():
            fd = (tiny_detector(xp, e).class_logits[0, 1] - tiny_detector(xm, e).class_logits[0, 1]).item() / (2 * h)
        an = g[0, c, i, j].item()
        assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-8)


def test_head_maps_lie_on_the_logit_graph(tiny_detector):
    x = _images(np.random.default_rng(2), 1).requires_grad_(True)
    out = tiny_detector(x, tiny_detector.default_prompt())
    grads = torch.autograd.grad(out.class_logits[:, 1].sum(), out.head_maps, allow_unused=True)
    assert all(g is not None and g.abs().sum() > 0 for g in grads)


def test_input_contract_errors(tiny_detector):
    e = tiny_detector.default_prompt()
    with pytest.raises(DetectorError):
        tiny_detector(torch.zeros(1, 3, 64, 64, dtype=DTYPE), e)
    with pytest.raises(DetectorError):
        tiny_detector(torch.zeros(1, 1, 32, 32, dtype=DTYPE), e)
    with pytest.raises(DetectorError):
        tiny_detector(torch.zeros(1, 3, 32, 32, dtype=DTYPE), torch.zeros(4, 7, dtype=DTYPE))


def test_checkpoint_round_trip(tiny_detector, tmp_path):
    save_checkpoint(tiny_detector, tmp_path / "d.pt")
    back = load_checkpoint(tmp_path / "d.pt")
    x = _images(np.random.default_rng(3), 2)
    e = tiny_detector.default_prompt()
    assert torch.equal(back(x, e).class_logits, tiny_detector(x, e).class_logits)
    with pytest.raises((DetectorError, FileNotFoundError, OSError)):
        load_checkpoint(tmp_path / "missing.pt")


def test_training_is_deterministic(tmp_path):
    root = generate_dataset(tmp_path / "d", n_train=24, n_test=8, size=32, master_seed=1)
    cfg = ToyDetectorConfig(image_size=32, dim=16, layers=2, heads=2)
    a = train_toy_detector(root, epochs=1, seed=5, model_config=cfg, check=False)
    b = train_toy_detector(root, epochs=1, seed=5, model_config=cfg, check=False)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    with pytest.raises(DetectorError):
        train_toy_detector(root, epochs=1, seed=5, model_config=cfg)


def test_trained_detector_meets_floors(trained_detector, bench_dir):
    xt, yt, mt, _ = load_split(bench_dir, "test")
    stats = evaluate_detector(trained_detector, xt, yt, mt)
    assert stats["accuracy"] >= 0.90
    assert stats["iou"] >= 0.40


def test_prompt_pathway_is_live(trained_detector, test_fakes):
    _, images, _ = test_fakes
    x = image_batch(images[:16])
    e = trained_detector.default_prompt()
    with torch.no_grad():
        a = trained_detector(x, e).class_logits
        b = trained_detector(x, torch.zeros_like(e)).class_logits
    assert not torch.allclose(a, b)


def test_detection_gradient_flows_on_test_fakes(trained_detector, test_fakes):
    _, images, _ = test_fakes
    e = trained_detector.default_prompt()
    nonzero = 0
    for i in range(0, len(images), 100):
        x = image_batch(images[i:i + 100]).requires_grad_(True)
        (g,) = torch.autograd.grad(detection_loss(trained_detector(x, e).class_logits).sum(), x)
        nonzero += int((g.flatten(1).abs().max(1).values > 0).sum())
    assert nonzero / len(images) >= 0.99


def test_forward_wrapper_matches_batch_call(tiny_detector):
    img = ImageTensor(np.random.default_rng(4).uniform(0, 1, (32, 32, 3)))
    out = forward(tiny_detector, img)
    direct = tiny_detector(image_batch([img]), tiny_detector.default_prompt())
    assert torch.equal(out.class_logits, direct.class_logits)
