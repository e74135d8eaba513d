import logging

import numpy as np
import pytest

from respox.gate import (
    GateError,
    GateMap,
    StateGradient,
    build_gate_map,
    cosine_similarity,
    derive_gate_map,
    gate_lookup,
    gate_map_from_dict,
    gate_map_to_dict,
    identity_gate_map,
    load_gate_map,
    manual_gate_map,
    save_gate_map,
    state_gradient,
)


def _sg(state, vector, samples=1):
    return StateGradient(state=state, vector=np.asarray(vector, dtype=np.float64), samples=samples)


# ---------------------------------------------------------------- similarity


def test_cosine_similarity_reference_values():
    assert cosine_similarity([1.0, 0.0], [2.0, 0.0]) == pytest.approx(1.0)
    assert cosine_similarity([1.0, 0.0], [0.0, 5.0]) == pytest.approx(0.0)
    assert cosine_similarity([1.0, 1.0], [-3.0, -3.0]) == pytest.approx(-1.0)


def test_cosine_similarity_zero_vector_rejected():
    with pytest.raises(GateError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])


def test_cosine_similarity_length_mismatch_rejected():
    with pytest.raises(GateError):
        cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])


def test_similarity_matrix_symmetric_unit_diagonal():
    rng = np.random.default_rng(7)
    grads = [_sg((0, u), rng.normal(size=8)) for u in range(3)]
    gm = build_gate_map(grads, n_heads=1)
    sim = np.asarray(gm.provenance["similarity"])
    np.testing.assert_allclose(sim, sim.T)
    np.testing.assert_allclose(np.diag(sim), 1.0)
    assert np.all(np.abs(sim) <= 1.0 + 1e-12)


# ---------------------------------------------------------------- clustering


def test_clustering_recovers_two_directions():
    rng = np.random.default_rng(1)
    base_a = np.array([1.0, 0.0, 0.0, 0.0])
    base_b = np.array([0.0, 0.0, 1.0, 0.0])
    grads = [
        _sg((0, 0), base_a + 0.01 * rng.normal(size=4)),
        _sg((0, 1), base_a + 0.01 * rng.normal(size=4)),
        _sg((1, 0), base_b + 0.01 * rng.normal(size=4)),
        _sg((1, 1), base_b + 0.01 * rng.normal(size=4)),
    ]
    gm = build_gate_map(grads, n_heads=2)
    assert gm.table[(0, 0)] == gm.table[(0, 1)] == 1
    assert gm.table[(1, 0)] == gm.table[(1, 1)] == 2


def test_full_head_count_keeps_states_separate():
    rng = np.random.default_rng(2)
    grads = [_sg((v, u), rng.normal(size=6)) for v in range(2) for u in range(2)]
    gm = build_gate_map(grads, n_heads=4)
    # heads numbered 1..4 in lexicographic state order
    assert [gm.table[s] for s in sorted(gm.table)] == [1, 2, 3, 4]


def test_single_head_merges_everything():
    rng = np.random.default_rng(3)
    grads = [_sg((0, u), rng.normal(size=5)) for u in range(3)]
    gm = build_gate_map(grads, n_heads=1)
    assert set(gm.table.values()) == {1}


def test_duplicate_states_rejected():
    grads = [_sg((0, 0), [1.0, 0.0]), _sg((0, 0), [0.0, 1.0])]
    with pytest.raises(GateError):
        build_gate_map(grads, n_heads=1)


def test_head_count_bounds_rejected():
    grads = [_sg((0, u), [1.0, float(u)]) for u in range(2)]
    with pytest.raises(GateError):
        build_gate_map(grads, n_heads=0)
    with pytest.raises(GateError):
        build_gate_map(grads, n_heads=3)


# ---------------------------------------------------------------- fixed maps


def test_identity_map_enumerates_state_space():
    gm = identity_gate_map(2, 3)
    assert gm.n_heads == 6
    assert gm.table == {
        (0, 0): 1, (0, 1): 2, (0, 2): 3,
        (1, 0): 4, (1, 1): 5, (1, 2): 6,
    }


def test_manual_map_infers_head_count():
    gm = manual_gate_map({(0, 0): 1, (0, 1): 2, (1, 0): 2, (1, 1): 1})
    assert gm.n_heads == 2
    assert gm.table[(1, 0)] == 2


def test_manual_map_rejects_bad_heads():
    with pytest.raises(GateError):
        manual_gate_map({(0, 0): 0})
    with pytest.raises(GateError):
        manual_gate_map({(0, 0): 3}, n_heads=2)
    with pytest.raises(GateError):
        manual_gate_map({})


# ---------------------------------------------------------------- lookup


def test_gate_lookup_vectorizes_table():
    gm = manual_gate_map({(0, 0): 1, (0, 1): 3, (0, 2): 2}, n_heads=3)
    u = np.array([0, 1, 1, 2, 0])
    np.testing.assert_array_equal(gate_lookup(gm, 0, u), [1, 3, 3, 2, 1])


def test_gate_lookup_missing_state_rejected():
    gm = manual_gate_map({(0, 0): 1})
    with pytest.raises(GateError):
        gate_lookup(gm, 1, np.array([0]))
    with pytest.raises(GateError):
        gate_lookup(gm, 0, np.array([0, 2]))


# ---------------------------------------------------------------- serialization


def test_json_roundtrip(tmp_path):
    gm = manual_gate_map({(0, 0): 1, (0, 1): 2, (1, 2): 2})
    gm.provenance["note"] = "hand built"
    path = tmp_path / "gate.json"
    save_gate_map(str(path), gm)
    back = load_gate_map(str(path))
    assert back.n_heads == gm.n_heads
    assert back.table == gm.table
    assert back.provenance == gm.provenance
    # dict form is stable too
    assert gate_map_from_dict(gate_map_to_dict(gm)).table == gm.table


def test_load_rejects_bad_payloads(tmp_path):
    path = tmp_path / "gate.json"
    path.write_text("{not json")
    with pytest.raises(GateError):
        load_gate_map(str(path))
    with pytest.raises(GateError):
        gate_map_from_dict({"table": {"v=0,u=0": 1}})  # missing n_heads
    with pytest.raises(GateError):
        gate_map_from_dict({"n_heads": 1, "table": {"nonsense": 1}})


# ---------------------------------------------------------------- derivation


def _populated_state(records):
    record = records[0]
    return int(record.gender), int(record.stages[0])


def test_state_gradient_deterministic(micro_params, micro_cfg, micro_records):
    state = _populated_state(micro_records)
    sg1 = state_gradient(micro_params, micro_cfg, micro_records, state)
    sg2 = state_gradient(micro_params, micro_cfg, micro_records, state)
    assert sg1.state == state
    assert sg1.samples >= 1
    np.testing.assert_array_equal(sg1.vector, sg2.vector)
    assert np.all(np.isfinite(sg1.vector))


def test_state_gradient_leaves_running_stats(micro_params, micro_cfg, micro_records):
    before = {
        name: t.data.copy() for name, t in micro_params.items() if "running_" in name
    }
    state = _populated_state(micro_records)
    state_gradient(micro_params, micro_cfg, micro_records, state)
    for name, old in before.items():
        np.testing.assert_array_equal(micro_params[name].data, old)


def test_state_gradient_unpopulated_state_rejected(micro_params, micro_cfg, micro_records):
    with pytest.raises(GateError):
        state_gradient(micro_params, micro_cfg, micro_records, (1, 9))


def test_derive_covers_space_and_repeats(micro_params, micro_cfg, micro_records):
    gm1 = derive_gate_map(micro_params, micro_cfg, micro_records, n_heads=2)
    gm2 = derive_gate_map(micro_params, micro_cfg, micro_records, n_heads=2)
    space = {(v, u) for v in range(micro_cfg.v_states) for u in range(micro_cfg.u_classes)}
    assert set(gm1.table) == space
    assert gm1.table == gm2.table
    assert gm1.provenance["mode"] == "grad-sim"


def test_derive_fills_absent_states_with_warning(micro_params, micro_cfg, micro_records, caplog):
    one_gender = [r for r in micro_records if r.gender == 0]
    assert one_gender
    with caplog.at_level(logging.WARNING, logger="respox.gate"):
        gm = derive_gate_map(micro_params, micro_cfg, one_gender, n_heads=1)
    space = {(v, u) for v in range(micro_cfg.v_states) for u in range(micro_cfg.u_classes)}
    assert set(gm.table) == space
    assert gm.provenance.get("filled_states")
    assert any("no samples" in rec.message for rec in caplog.records)


def test_derive_rejects_overwide_head_count(micro_params, micro_cfg, micro_records):
    with pytest.raises(GateError):
        derive_gate_map(micro_params, micro_cfg, micro_records, n_heads=7)


def test_gate_map_validate_rejects_out_of_range():
    gm = GateMap(n_heads=2, table={(0, 0): 5})
    with pytest.raises(GateError):
        gm.validate()
