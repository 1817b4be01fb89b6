import inspect

import numpy as np
import pytest

from knockoff_saliency import infill
from knockoff_saliency.infill import (
    FlipInfiller, KnockoffInfiller, VaeInfiller, corruption_masks, exchangeability_check, export_knockoffs,
    flip_reference, generate_knockoff, generate_knockoffs, knockoff_quality_sweep, read_pgm, vae_reference,
    write_pgm,
)
from knockoff_saliency.models import Vae, decoder_output
from knockoff_saliency.rng import Rng
from stubs import LinearStub


class RecordingVae(Vae):
    """Small real VAE that records every encoder input."""

    def __init__(self, latent=5, seed=0):
        super().__init__(latent, seed)
        self.set_trainable(False)
        self.calls = []

    def encode(self, x):
        self.calls.append(np.array(getattr(x, "data", x)))
        return super().encode(x)


def _digits(n=3, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.random((n, 28, 28)) < 0.2).astype(np.float32)


def test_flip_reference_is_background():
    x = _digits(1)[0]
    assert not flip_reference(x).any()
    assert FlipInfiller().reference(x, np.ones((4, 28, 28)), Rng(0)).shape == (4, 28, 28)


def test_vae_reference_batches_and_checks():
    vae = Vae(5)
    vae.set_trainable(False)
    x = _digits(1)[0]
    refs = vae_reference(vae, x, np.ones((3, 28, 28)), Rng(0))
    assert refs.shape == (3, 28, 28) and np.all((refs > 0) & (refs < 1))
    with pytest.raises(ValueError):
        vae_reference(vae, x, np.ones((3, 27, 28)), Rng(0))
    with pytest.raises(TypeError):
        vae_reference(object(), x, np.ones((1, 28, 28)), Rng(0))
    assert VaeInfiller(vae).reference(x, np.ones((2, 28, 28)), Rng(1)).shape == (2, 28, 28)


def _loop_knockoff(model, x, order, noise):
    """Direct per-pixel oracle for the sequential generation rule."""
    w = x.reshape(-1).copy()
    for step, j in enumerate(order):
        w[j] = 0.0
        mu, logvar = model.encode(w.reshape(1, 28, 28))
        z = mu.data + np.exp(0.5 * logvar.data) * noise[step]
        w[j] = decoder_output(model.decode_logits(z).data).reshape(-1)[j]
    return w.reshape(28, 28)


def test_knockoff_matches_loop_oracle():
    vae = Vae(5, seed=1)
    vae.set_trainable(False)
    x = _digits(1, 2)[0]
    order = np.random.default_rng(0).permutation(784)
    ko = generate_knockoff(vae, x, Rng(3, 9), order=order)
    noise = Rng(3, 9).normal((784, 5))
    np.testing.assert_allclose(ko.pixels, _loop_knockoff(vae, x, order, noise), atol=1e-6)
    assert ko.pixels.shape == (28, 28) and np.all((ko.pixels > 0) & (ko.pixels < 1))


def test_knockoff_batch_independent_of_composition():
    vae = Vae(5)
    vae.set_trainable(False)
    xs = _digits(3)
    batch = generate_knockoffs(vae, xs, [Rng(0, i) for i in range(3)])
    for i in range(3):
        np.testing.assert_allclose(batch[i], generate_knockoff(vae, xs[i], Rng(0, i)).pixels, atol=1e-6)


def test_generator_never_sees_labels():
    for fn in (generate_knockoff, generate_knockoffs, Vae.encode, Vae.decode_logits, Vae.reconstruct):
        names = set(inspect.signature(fn).parameters)
        assert not names & {"label", "labels", "y", "target", "c", "classes"}, fn.__name__
    vae = RecordingVae()
    xs = _digits(2)
    generate_knockoffs(vae, xs, [Rng(0, 0), Rng(0, 1)], order=np.arange(784), reencode_every=98)
    assert len(vae.calls) == 8
    assert all(c.shape == (2, 28, 28) for c in vae.calls)


def test_knockoff_order_validation():
    vae = Vae(5)
    with pytest.raises(ValueError):
        generate_knockoffs(vae, _digits(1), [Rng(0)], order=np.arange(10))
    with pytest.raises(ValueError):
        generate_knockoffs(vae, _digits(2), [Rng(0)])


def test_knockoff_infiller_broadcasts():
    ko = np.random.default_rng(0).random((28, 28))
    refs = KnockoffInfiller(ko).reference(ko, np.ones((5, 28, 28)), Rng(0))
    assert refs.shape == (5, 28, 28)
    np.testing.assert_allclose(refs[3], ko.astype(np.float32))


def test_pgm_round_trip_and_export(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (28, 28)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n28 28\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)
    kos = [infill.KnockoffImage(np.full((28, 28), 0.5, np.float32), i, 5, 0) for i in range(3)]
    manifest = export_knockoffs(kos, tmp_path / "out")
    lines = manifest.read_text().splitlines()
    assert lines[0] == "sample_id,seed,latent,path" and len(lines) == 4
    assert read_pgm(tmp_path / "out" / "knockoffs" / "00002.pgm")[0, 0] == 128


def test_corruption_masks_exact_count():
    m = corruption_masks(Rng(0), 7, 0.25)
    assert m.shape == (7, 28, 28)
    assert np.all((m == 0).reshape(7, -1).sum(axis=1) == 196)


def test_sweep_no_op_fraction():
    rng = np.random.default_rng(4)
    clf = LinearStub(rng.normal(0, 0.1, (784, 10)))
    xs = _digits(10)
    labels = clf.predict(xs)
    refs = {"flip": lambda im, m, r: np.zeros_like(im)}
    rows = knockoff_quality_sweep(clf, refs, xs, labels, [0.0, 0.5])
    clean = clf.predict_proba(xs)[np.arange(10), labels].mean()
    zero = [r for r in rows if r["fraction"] == 0.0]
    assert {r["method"] for r in zero} == {"none", "flip"}
    for r in zero:
        assert r["ms_ssim"] == pytest.approx(1.0)
        assert r["target_probability"] == pytest.approx(clean, abs=1e-6)
    half = next(r for r in rows if r["method"] == "flip" and r["fraction"] == 0.5)
    assert half["ms_ssim"] < 1.0
    with pytest.raises(ValueError):
        knockoff_quality_sweep(clf, refs, xs[:0], labels[:0], [0.1])


def test_exchangeability_check_separates_valid_and_invalid():
    rng = np.random.default_rng(5)
    n, p = 2000, 30
    indep = rng.normal(size=(n, p))
    copy = rng.normal(size=(n, p))
    ok = exchangeability_check(indep, copy, Rng(0), n_pairs=60, n_boot=100)
    assert ok.pass_rate >= 0.9
    shared = rng.normal(size=(n, 1))
    corr = 0.9 * shared + 0.3 * rng.normal(size=(n, p))
    bad = exchangeability_check(corr, rng.normal(size=(n, p)), Rng(0), n_pairs=60, n_boot=100)
    assert bad.pass_rate < 0.2
    same = exchangeability_check(indep, indep, Rng(0), n_pairs=20, n_boot=20)
    assert same.pass_rate == 1.0
    with pytest.raises(ValueError):
        exchangeability_check(indep, copy[:, :5], Rng(0))


class IndependentPixelStub:
    """Idealised generator for images with independent Bernoulli(q) pixels.

    The posterior ignores the input (pixels carry no information about each
    other) and the decoder turns the latent draw into a near-binary sample of
    every pixel with the right marginal.
    """

    def __init__(self, q):
        from statistics import NormalDist

        self.q = np.asarray(q, np.float64).reshape(-1)
        self.cut = np.array([NormalDist().inv_cdf(v) for v in self.q])
        self.latent = 1
        self.encoded = []

    def encode(self, x):
        from knockoff_saliency.tensor import Tensor

        n = np.shape(x)[0]
        self.encoded.append(np.shape(x))
        return Tensor(np.zeros((n, 1), np.float32)), Tensor(np.zeros((n, 1), np.float32))

    def reparameterize(self, mu, logvar, noise):
        return Vae.reparameterize(self, mu, logvar, noise)

    def decode_logits(self, z):
        from knockoff_saliency.tensor import Tensor

        side = int(np.sqrt(self.q.size))
        logits = np.where(z.data[:, :1] < self.cut[None, :], 30.0, -30.0).astype(np.float32)
        return Tensor(logits.reshape(-1, side, side))


class ConstantDecoderStub(IndependentPixelStub):
    def __init__(self, value):
        super().__init__(np.full(16, 0.5))
        self.value = value

    def decode_logits(self, z):
        from knockoff_saliency.tensor import Tensor

        lg = np.log(self.value / (1 - self.value))
        return Tensor(np.full((z.shape[0], 4, 4), lg, np.float32))


def test_constant_decoder_gives_constant_knockoff():
    xs = _digits(3)[:, :4, :4]
    ko = generate_knockoffs(ConstantDecoderStub(0.3), xs, [Rng(0, i) for i in range(3)])
    np.testing.assert_allclose(ko, 0.3, atol=1e-6)


def test_raster_and_reverse_order_agree_on_symmetric_blank():
    blank = np.zeros((1, 4, 4), np.float32)
    stub = ConstantDecoderStub(0.2)
    a = generate_knockoffs(stub, blank, [Rng(0)], order=np.arange(16))
    b = generate_knockoffs(stub, blank, [Rng(0)], order=np.arange(16)[::-1])
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_knockoff_marginals_match_known_law():
    q = np.linspace(0.1, 0.8, 16).reshape(4, 4)
    runs = 10_000
    rng = np.random.default_rng(8)
    xs = (rng.random((runs, 4, 4)) < q).astype(np.float32)
    ko = generate_knockoffs(IndependentPixelStub(q), xs, [Rng(1, i) for i in range(runs)])
    se = np.sqrt(q * (1 - q) / runs)
    assert np.all(np.abs(ko.mean(axis=0) - q) < 4 * se)
