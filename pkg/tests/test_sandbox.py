import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from envsim.sandbox import (ColdCostRanges, InvalidState, OverlayPool, RepurposeParams, Sandbox,
                            SandboxKind, SandboxState, clean, create_cold, finish_clean, repurpose,
                            transition_allowed)

S = SandboxState
# expected lifecycle, written out independently of the implementation
LEGAL = {
    (S.CREATING, S.ACTIVE), (S.ACTIVE, S.CLEANING), (S.CLEANING, S.POOLED), (S.POOLED, S.ACTIVE),
    (S.CREATING, S.DESTROYED), (S.ACTIVE, S.DESTROYED), (S.CLEANING, S.DESTROYED),
    (S.POOLED, S.DESTROYED),
}


def rng(seed=0):
    return np.random.default_rng(seed)


def pooled(fid="py-fn"):
    sb, _, _ = create_cold("container", fid, 1, rng())
    clean(sb)
    finish_clean(sb)
    return sb


@pytest.mark.parametrize("src,dst", list(itertools.product(S, S)))
def test_state_machine_exhaustive(src, dst):
    sb = Sandbox(1, SandboxKind.CONTAINER, state=src)
    assert transition_allowed(src, dst) == ((src, dst) in LEGAL)
    if (src, dst) in LEGAL:
        sb._move(dst)
        assert sb.state is dst
    else:
        with pytest.raises(InvalidState):
            sb._move(dst)
        assert sb.state is src


def test_cold_low_ends_near_120_ms():
    # every band at its floor; the sum is the cheapest sandbox a node can build
    r = ColdCostRanges(network_spread=0.0, rootfs_spread=0.0, cgroup_create_spread=0.0, thread_jitter=0.0,
                       other_ns_ms=(0.0, 0.0))
    _, ms, bd = create_cold("container", "CR", 1, rng(), r, threads=14)
    expected = 80 + 10 + 16 + (9.232 + 0.2835 * 14)
    assert ms == pytest.approx(expected)
    assert 115 <= ms <= 150


def test_fifteen_concurrent_network_near_400_ms():
    nets = [create_cold("container", "CR", 15, rng(s))[2]["network"] for s in range(200)]
    assert min(nets) >= 400 - 1e-9
    assert np.median(nets) < 460


def test_concurrency_scale_one_is_identity():
    r = ColdCostRanges()
    assert r.concurrency_scale(1) == 1.0
    a = create_cold("container", "f", 1, rng(5), r)[2]
    b = create_cold("container", "f", 1, rng(5), r)[2]
    assert a == b


def test_combined_cgroup_model():
    r = ColdCostRanges(cgroup_model="combined")
    bd = create_cold("container", "f", 1, rng(), r)[2]
    assert "cgroup" in bd and 30 <= bd["cgroup"] <= 400


def test_vm_sandbox_pays_hypervisor():
    bd = create_cold("vm", "f", 1, rng())[2]
    assert bd["hypervisor"] == ColdCostRanges().hypervisor_spawn_ms


def test_clean_removes_previous_tenant_artifacts():
    sb, _, _ = create_cold("container", "f", 1, rng())
    sb.run_instance("inst-a", files=5, connections=3)
    assert sb.artifacts_of("inst-a")
    clean(sb)
    finish_clean(sb)
    repurpose(sb, "g", rng())
    assert sb.artifacts_of("inst-a") == []
    assert not sb.components.rootfs.upper_dirty


def test_clean_pooled_is_invalid():
    with pytest.raises(InvalidState):
        clean(pooled())


def test_finish_clean_requires_cleaning():
    sb, _, _ = create_cold("container", "f", 1, rng())
    with pytest.raises(InvalidState):
        finish_clean(sb)


def test_repurpose_across_languages():
    sb = pooled("python-fn")
    ms, bd = repurpose(sb, "node-fn", rng())
    assert sb.state is S.ACTIVE and sb.last_function == "node-fn"
    assert sb.components.rootfs.function_overlay_id == "node-fn"
    assert "network" not in bd


def test_cgroup_clone_cost_band():
    for s in range(200):
        _, bd = repurpose(pooled(), "g", rng(s))
        assert 0.1 <= bd["cgroup_clone"] <= 0.3


def test_repurpose_active_is_invalid():
    sb, _, _ = create_cold("container", "f", 1, rng())
    with pytest.raises(InvalidState):
        repurpose(sb, "g", rng())


def test_overlay_hit_is_cheaper():
    overlays = OverlayPool()
    overlays.prepare("g")
    hit, _ = repurpose(pooled(), "g", rng(1), RepurposeParams(cgroup_clone_ms=(0.2, 0.2)), overlays)
    miss, _ = repurpose(pooled(), "g", rng(1), RepurposeParams(cgroup_clone_ms=(0.2, 0.2)), overlays)
    assert hit < miss


def test_purge_time_grows_with_dirty_files():
    a, _, _ = create_cold("container", "f", 1, rng())
    b, _, _ = create_cold("container", "f", 1, rng())
    b.run_instance("x", files=500)
    assert clean(b) > clean(a)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_repurpose_much_cheaper_than_cold(seed):
    r = rng(seed)
    sb, cold_ms, _ = create_cold("container", "f", 1, r)
    clean(sb)
    finish_clean(sb)
    rep_ms, _ = repurpose(sb, "g", r)
    assert rep_ms < 0.05 * cold_ms


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["f", "g", "h"]), min_size=1, max_size=20))
def test_network_configured_once_per_lifetime(functions):
    sb, _, _ = create_cold("container", functions[0], 1, rng())
    for fid in functions[1:]:
        clean(sb)
        finish_clean(sb)
        _, bd = repurpose(sb, fid, rng())
        assert "network" not in bd
    assert sb.network_setups == 1
