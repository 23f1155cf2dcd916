import hashlib

import numpy as np
import pytest

from dvp.errors import ConfigError, FormatError
from dvp.synth import (
    SynthSpec,
    bayes_oracle_accuracy,
    bayes_predict,
    generate_task,
    load_task,
    render,
    save_task,
)

# default spec, 10^4 fresh test draws
DEFAULT_BAYES_ACCURACY = 1.0


def gaussian_loglik_predict(means, noise, images):
    """Class with the highest isotropic Gaussian log-density, written out per class."""
    out = []
    for x in images:
        scores = [-0.5 * np.sum((x - mu) ** 2) / noise**2 - x.size * np.log(noise) for mu in means]
        out.append(int(np.argmax(scores)))
    return np.array(out)


def _digest(d):
    h = hashlib.sha256()
    for p in sorted(d.iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_noise_free_images_repeat():
    t = generate_task(SynthSpec(noise_std=0.0, test_per_class=3))
    for q in range(t.spec.num_classes):
        imgs = t.train.images[t.train.labels == q]
        assert np.all(imgs == imgs[0])


def test_cause_zero_only_difference():
    spec = SynthSpec(num_classes=2, description_jitter=0.0, weak_fraction=0.0)
    f = generate_task(spec).factors.copy()
    f[1, 1:] = f[0, 1:]
    t = generate_task(spec, factors=f)
    d = t.descriptions
    for i in range(spec.num_causes):
        a = d.embeddings[[k for k, c in enumerate(d.descriptions) if c.class_id == 0 and c.cause == i]]
        b = d.embeddings[[k for k, c in enumerate(d.descriptions) if c.class_id == 1 and c.cause == i]]
        assert np.array_equal(a, b) == (i != 0)


def test_render_stripes():
    spec = SynthSpec()
    f = np.arange(spec.num_causes, dtype=float)[:, None, None, None] + np.zeros(
        (spec.num_causes, spec.stripe_height, spec.width, spec.channels))
    img = render(f, spec, only=1)
    assert np.all(img[6:12] == 1) and np.all(img[:6] == 0) and np.all(img[12:] == 0)


def test_seeded_save_is_byte_identical(tmp_path):
    spec = SynthSpec(num_classes=3, test_per_class=5, seed=11)
    a = save_task(generate_task(spec), tmp_path / "a")
    b = save_task(generate_task(spec), tmp_path / "b")
    assert _digest(a) == _digest(b)


def test_load_round_trip(tmp_path):
    t = generate_task(SynthSpec(num_classes=3, test_per_class=5))
    back = load_task(save_task(t, tmp_path / "t"))
    assert back.descriptions.ids == t.descriptions.ids
    np.testing.assert_allclose(back.train.images, t.train.images, atol=1e-6)
    x = np.random.default_rng(0).standard_normal(t.spec.source_dims)
    assert np.array_equal(back.encoder.encode(x), t.encoder.encode(x))


def test_load_errors(tmp_path):
    with pytest.raises(FormatError):
        load_task(tmp_path)


@pytest.mark.parametrize("bad", [dict(num_classes=1), dict(noise_std=-1.0), dict(source_size=18),
                                 dict(weak_fraction=1.5), dict(receptive="conv"),
                                 dict(embed_dim=2)])
def test_invalid_specs(bad):
    with pytest.raises(ConfigError):
        SynthSpec(**bad)


def test_factor_override_shape():
    with pytest.raises(ConfigError):
        generate_task(SynthSpec(), factors=np.zeros((2, 2)))


def test_bayes_noise_free():
    assert bayes_oracle_accuracy(generate_task(SynthSpec(noise_std=0.0))) == 1.0


def test_bayes_chance_under_huge_noise():
    acc = bayes_oracle_accuracy(generate_task(SynthSpec(noise_std=100.0)), draws=10_000)
    assert abs(acc - 1 / 6) <= 4 * np.sqrt((1 / 6) * (5 / 6) / 10_000)


def test_bayes_default_constant():
    t = generate_task(SynthSpec())
    assert bayes_oracle_accuracy(t, draws=10_000) == DEFAULT_BAYES_ACCURACY


def test_bayes_predict_matches_loglik():
    t = generate_task(SynthSpec(noise_std=3.0, test_per_class=30))
    got = bayes_predict(t, t.test.images)
    assert np.array_equal(got, gaussian_loglik_predict(t.means, 3.0, t.test.images))
    assert 1 / 6 < np.mean(got == t.test.labels) < 1.0


def test_default_frame_width():
    assert SynthSpec().default_frame_width == 2
