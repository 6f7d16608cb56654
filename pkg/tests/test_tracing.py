import json

import numpy as np
import pytest

from xedit.errors import ConfigError
from xedit.model import HookSite, embed_tokens, forward
from xedit.tracing import (TraceConfig, corrupt_embedding, indirect_effects, load_traces, save_traces,
                           select_layers)


def test_corrupt_embedding_leaves_cls(rng):
    h = rng.normal(size=(2, 5, 4))
    c = corrupt_embedding(h, 0.5, seed=0)
    np.testing.assert_array_equal(c[:, 0], h[:, 0])
    assert not np.allclose(c[:, 1:], h[:, 1:])
    np.testing.assert_array_equal(corrupt_embedding(h, 0.0, 3), h)
    np.testing.assert_array_equal(corrupt_embedding(h, 0.5, 7), corrupt_embedding(h, 0.5, 7))


def test_select_layers():
    assert select_layers([0.1, 0.5, 0.3, 0.5], 2) == [1, 3]
    assert select_layers([0.2, 0.2, 0.2], 2) == [0, 1]
    assert select_layers([3.0, -1.0, 2.0, 0.0], 3) == [0, 2, 3]
    with pytest.raises(ConfigError):
        select_layers([1.0], 2)


def test_zero_noise_gives_zero_effect(tiny_model64, tiny_images):
    r = indirect_effects(tiny_model64, tiny_images[0], 1, TraceConfig(noise_sigma=0.0, n_runs=3, top_k=1))
    assert np.all(r.ie_per_layer == 0.0)
    assert r.p_corrupt_mean == pytest.approx(r.p_clean, abs=1e-15)
    assert r.corruption_failed


def test_full_restoration_recovers_clean(tiny_model64, tiny_images):
    cfg = TraceConfig(noise_sigma=0.5, n_runs=4, top_k=1, restore_site="block_out")
    r = indirect_effects(tiny_model64, tiny_images[1], 2, cfg)
    last = tiny_model64.config.n_layers - 1
    assert r.ie_per_layer[last] == pytest.approx(r.p_clean - r.p_corrupt_mean, abs=1e-12)


def test_self_patch_contributes_nothing(tiny_model64, tiny_images):
    # restoring a corrupted run's own activation changes nothing
    h = corrupt_embedding(embed_tokens(tiny_model64, tiny_images[:1]), 0.5, 0)
    site = HookSite(0, "mlp_out")
    logits, trace = forward(tiny_model64, embed=h, capture={site})
    again, _ = forward(tiny_model64, embed=h, patches={site: trace[site]})
    np.testing.assert_array_equal(logits, again)


def test_traces_are_reproducible_and_serialise(tmp_path, tiny_model64, tiny_images):
    cfg = TraceConfig(noise_sigma=0.3, n_runs=5, top_k=2, seed=11)
    a = indirect_effects(tiny_model64, tiny_images[2], 0, cfg)
    b = indirect_effects(tiny_model64, tiny_images[2], 0, cfg)
    assert a.to_dict() == b.to_dict()
    assert a.ie_per_layer.tobytes() == b.ie_per_layer.tobytes()
    c = indirect_effects(tiny_model64, tiny_images[2], 0, TraceConfig(noise_sigma=0.3, n_runs=5, top_k=2, seed=12))
    assert c.p_corrupt_mean != a.p_corrupt_mean
    save_traces(tmp_path / "t.json", [a], {"k": 1})
    assert json.loads((tmp_path / "t.json").read_text())["schema"] == "xedit.trace/1"
    back = load_traces(tmp_path / "t.json")[0]
    assert back.to_dict() == a.to_dict()


def test_trace_config_validation(tiny_model64, tiny_images):
    with pytest.raises(ConfigError):
        TraceConfig(noise_sigma=-1)
    with pytest.raises(ConfigError):
        indirect_effects(tiny_model64, tiny_images[0], 0, TraceConfig(top_k=5))
