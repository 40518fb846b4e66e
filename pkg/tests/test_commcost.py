import json

import numpy as np
import pytest

from evoplan.commcost import CommModel, activation_memory, predict_block_ledger
from evoplan.dap_block import dap_evoformer_block
from evoplan.errors import DomainError, HeadLimitError
from evoplan.evoformer import EvoConfig, init_block_params
from evoplan.sharding import CommLedger, DeviceMesh


def test_reference_point_values():
    model = CommModel(n_heads=4)
    assert model.tp_volume(1.0, 4) == 18.0
    assert model.dap_volume(1.0, 4) == 4.5
    report = model.compare(1.0, 4)
    assert report.tp_volume == 18.0
    assert report.dap_volume == 4.5
    assert report.ratio == 4.0


def test_breakdown_components():
    model = CommModel(n_heads=4)
    bd = model.dap_breakdown(1.0, 4)
    assert bd["opm_gather"] == 0.75
    assert bd["triangle_gather"] == 1.5
    assert bd["axis_switch"] == 2.25
    assert sum(bd.values()) == 4.5


def test_single_device_volumes_are_zero():
    model = CommModel(n_heads=4)
    assert model.tp_volume(5.0, 1) == 0.0
    assert model.dap_volume(5.0, 1) == 0.0


def test_dap_always_cheaper_property():
    model = CommModel(n_heads=10 ** 9)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = float(rng.uniform(0.01, 1e9))
        n = int(rng.integers(2, 1025))
        assert model.dap_volume(k, n) < model.tp_volume(k, n)


def test_head_limit_error():
    model = CommModel(n_heads=4)
    with pytest.raises(HeadLimitError) as exc_info:
        model.tp_volume(1.0, 8)
    assert exc_info.value.n_devices == 8
    assert exc_info.value.n_heads == 4


def test_domain_validation():
    model = CommModel()
    with pytest.raises(DomainError):
        model.tp_volume(-1.0, 2)
    with pytest.raises(DomainError):
        model.dap_volume(1.0, 0)
    with pytest.raises(DomainError):
        activation_memory(0, 4, 48)


def test_activation_memory_closed_form():
    assert activation_memory(384, 4, 48, 2) == 21_743_271_936
    assert activation_memory(384, 4, 48, 2) > 20 * 1024 ** 3
    assert activation_memory(384, 4, 1, 2) == 384 ** 3 * 4 * 2
    assert activation_memory(2, 1, 1, 1) == 8


def test_report_json_shape():
    doc = json.loads(CommModel(n_heads=4).compare(2.0, 2).to_json())
    assert doc["schema"] == "evoplan-commvolume-v1"
    assert doc["tp_volume"] == 24.0
    assert doc["dap_volume"] == doc["dap_breakdown"]["opm_gather"] + \
        doc["dap_breakdown"]["triangle_gather"] + \
        doc["dap_breakdown"]["axis_switch"]


@pytest.mark.parametrize("n", [2, 4])
def test_forward_breakdown_matches_simulated_ledger(n):
    """Cross-module oracle: the analytic forward-only volumes, fed with the
    exact per-tensor sizes, must equal the simulated per-device ledger."""
    cfg = EvoConfig(n_seq=8, n_res=16, h_msa=8, h_pair=4,
                    n_head_msa=2, n_head_pair=2)
    es = 2
    rng = np.random.default_rng(5)
    m = rng.normal(size=(cfg.n_seq, cfg.n_res, cfg.h_msa))
    z = rng.normal(size=(cfg.n_res, cfg.n_res, cfg.h_pair))
    p = init_block_params(cfg, 5)
    ledger = CommLedger(n, element_size=es)
    dap_evoformer_block(m, z, p, cfg, DeviceMesh(n), ledger)

    k_z = cfg.n_res * cfg.n_res * cfg.h_pair * es
    model = CommModel(gather_k={
        "opm": cfg.n_seq * cfg.n_res * cfg.hidden_proj * es,
        "triangle": cfg.n_res * cfg.n_res * cfg.hidden_proj * es,
        "msa": cfg.n_seq * cfg.n_res * cfg.h_msa * es,
    })
    fwd = model.forward_breakdown(k_z, n)
    # per-device measured bytes (identical across devices by symmetry)
    for cat in ("all_to_all", "all_gather"):
        per_dev = set(ledger.bytes[cat])
        assert len(per_dev) == 1
        assert per_dev.pop() == fwd[cat]
    assert model.forward_volume(k_z, n) == \
        (ledger.total_bytes() - sum(ledger.bytes["bias_gather"])) / n


@pytest.mark.parametrize("n", [1, 2, 4])
def test_predict_block_ledger_shapes(n):
    cfg = EvoConfig(n_seq=8, n_res=16)
    pred = predict_block_ledger(cfg, n)
    if n == 1:
        assert pred == {}
    else:
        assert pred["all_to_all"]["count"] == 6
        assert pred["all_gather"]["count"] == 3
        assert pred["bias_gather"]["count"] == 1
        assert all(v["bytes"] > 0 for v in pred.values())
    with pytest.raises(DomainError):
        predict_block_ledger(cfg, 0)
