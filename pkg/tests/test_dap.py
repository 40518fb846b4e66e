import numpy as np
import pytest

from evoplan.commcost import predict_block_ledger
from evoplan.dap_block import dap_evoformer_block
from evoplan.errors import ShardError
from evoplan.evoformer import EvoConfig, evoformer_block, init_block_params
from evoplan.sharding import CommLedger, DeviceMesh

CFG = EvoConfig(n_seq=8, n_res=16, h_msa=8, h_pair=4,
                n_head_msa=2, n_head_pair=2)


def _case(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(CFG.n_seq, CFG.n_res, CFG.h_msa))
    z = rng.normal(size=(CFG.n_res, CFG.n_res, CFG.h_pair))
    return m, z, init_block_params(CFG, seed)


@pytest.mark.parametrize("n", [1, 2, 4])
@pytest.mark.parametrize("seed", [7, 31, 101])
def test_sharded_block_matches_reference(n, seed):
    m, z, p = _case(seed)
    m_ref, z_ref = evoformer_block(m, z, p, CFG)
    m_dap, z_dap = dap_evoformer_block(m, z, p, CFG, DeviceMesh(n))
    assert np.max(np.abs(m_dap - m_ref)) <= 1e-9
    assert np.max(np.abs(z_dap - z_ref)) <= 1e-9


@pytest.mark.parametrize("n", [2, 4])
def test_collective_counts_per_block(n):
    m, z, p = _case(7)
    ledger = CommLedger(n)
    dap_evoformer_block(m, z, p, CFG, DeviceMesh(n), ledger)
    assert ledger.counts["all_to_all"] == 6
    assert ledger.counts["all_gather"] == 3
    assert ledger.counts["bias_gather"] == 1


@pytest.mark.parametrize("n", [2, 4])
def test_ledger_matches_analytic_prediction_exactly(n):
    m, z, p = _case(31)
    ledger = CommLedger(n, element_size=2)
    dap_evoformer_block(m, z, p, CFG, DeviceMesh(n), ledger)
    measured = {cat: {"count": ledger.counts[cat],
                      "bytes": sum(ledger.bytes[cat])}
                for cat in ledger.counts}
    assert measured == predict_block_ledger(CFG, n, element_size=2)


def test_single_device_is_bit_identical_and_silent():
    m, z, p = _case(101)
    ledger = CommLedger(1)
    m_ref, z_ref = evoformer_block(m, z, p, CFG)
    m_dap, z_dap = dap_evoformer_block(m, z, p, CFG, DeviceMesh(1), ledger)
    assert np.array_equal(m_dap, m_ref)
    assert np.array_equal(z_dap, z_ref)
    assert ledger.total_bytes() == 0
    assert not ledger.counts


def test_device_order_invariance():
    m, z, p = _case(7)
    m_a, z_a = dap_evoformer_block(m, z, p, CFG, DeviceMesh(4))
    m_b, z_b = dap_evoformer_block(m, z, p, CFG, DeviceMesh(4, (2, 0, 3, 1)))
    assert np.array_equal(m_a, m_b)
    assert np.array_equal(z_a, z_b)


def test_indivisible_extent_raises():
    m, z, p = _case(0)
    with pytest.raises(ShardError):
        dap_evoformer_block(m, z, p, CFG, DeviceMesh(3))
