"""Gate construction: mapping (accessible, inaccessible) state pairs to heads.

The gate decides, per second, which decoder head speaks.  Its table can be
declared by hand, set to the identity over the composite state space, or
derived from data: train a single-head backbone, average its loss gradient
over the seconds belonging to each state, and agglomeratively merge states
whose gradients point the same way (average-linkage over cosine similarity)
until the requested number of heads remains.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .config import ModelConfig
from .data import normalize_breathing
from .tensor import backward, take

log = logging.getLogger(__name__)


class GateError(ValueError):
    """Invalid gate table, empty state subset, or degenerate similarity input."""


@dataclass
class StateGradient:
    state: tuple          # (v, u)
    vector: np.ndarray    # float64, flattened over sorted trainable parameters
    samples: int          # contributing records


@dataclass
class GateMap:
    n_heads: int
    table: dict           # (v, u) -> head index in 1..n_heads
    provenance: dict = field(default_factory=dict)

    def validate(self) -> "GateMap":
        if self.n_heads < 1:
            raise GateError(f"n_heads must be >= 1, got {self.n_heads}")
        for state, head in self.table.items():
            if not (isinstance(state, tuple) and len(state) == 2):
                raise GateError(f"gate states are (v, u) pairs, got {state!r}")
            if not 1 <= head <= self.n_heads:
                raise GateError(f"state {state} maps to head {head}, outside 1..{self.n_heads}")
        return self


def trainable_param_names(params: dict) -> list:
    return sorted(name for name, t in params.items() if t.requires_grad)


def flatten_grads(params: dict, names) -> np.ndarray:
    chunks = []
    for name in names:
        tensor = params[name]
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        chunks.append(np.asarray(grad, dtype=np.float64).ravel())
    return np.concatenate(chunks)


def state_gradient(
    params: dict,
    config: ModelConfig,
    records,
    state: tuple,
    corr_weight: float = 0.2,
    normalize: bool = True,
) -> StateGradient:
    """Average loss gradient over the seconds of one (gender, stage) state.

    Runs the model in eval mode so repeated calls are deterministic and
    batch-norm running statistics stay untouched.  Each record contributes
    the gradient of the loss restricted (by timestep mask) to the state's
    seconds; the result is the mean over contributing records.
    """
    v, u = state
    names = trainable_param_names(params)
    per_record = []
    for record in records:
        if record.gender != v:
            continue
        mask = record.stages == u
        if not np.any(mask):
            continue
        x_np = normalize_breathing(record) if normalize else record.breathing.astype(np.float64)
        x = model_mod.as_input(x_np, params)
        y = record.spo2.astype(np.float64) / 100.0
        for name in names:
            params[name].grad = None
        pred = model_mod.forward(params, config, x, mode="eval")
        idx = np.nonzero(mask)[0]
        loss = model_mod.loss_main(take(pred.y_hat, idx, axis=0), y[idx], corr_weight)
        backward(loss)
        per_record.append(flatten_grads(params, names))
    if not per_record:
        raise GateError(f"no record carries state (v={v}, u={u})")
    vector = np.mean(np.stack(per_record, axis=0), axis=0)
    return StateGradient(state=(int(v), int(u)), vector=vector, samples=len(per_record))


def cosine_similarity(g1: np.ndarray, g2: np.ndarray) -> float:
    a = np.asarray(g1, dtype=np.float64).ravel()
    b = np.asarray(g2, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise GateError(f"gradient lengths differ: {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise GateError("zero gradient vector has no direction; similarity undefined")
    return float(np.dot(a, b) / (na * nb))


def _similarity_matrix(gradients) -> np.ndarray:
    n = len(gradients)
    sim = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            sim[i, j] = sim[j, i] = cosine_similarity(gradients[i].vector, gradients[j].vector)
    return sim


def build_gate_map(state_gradients, n_heads: int) -> GateMap:
    """Average-linkage agglomerative merge of states down to n_heads clusters.

    Repeatedly merges the cluster pair with the highest mean pairwise cosine
    similarity; ties keep the pair containing the lowest state index.  Heads
    are numbered 1..n_heads in order of each cluster's smallest member state.
    """
    grads = sorted(state_gradients, key=lambda sg: sg.state)
    states = [sg.state for sg in grads]
    if len(set(states)) != len(states):
        raise GateError(f"duplicate states in gradient list: {states}")
    if not 1 <= n_heads <= len(states):
        raise GateError(f"n_heads must lie in 1..{len(states)}, got {n_heads}")
    sim = _similarity_matrix(grads)

    clusters = [[i] for i in range(len(states))]
    while len(clusters) > n_heads:
        best = None
        best_sim = -np.inf
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                pair_sim = float(np.mean(sim[np.ix_(clusters[a], clusters[b])]))
                if pair_sim > best_sim:
                    best, best_sim = (a, b), pair_sim
        a, b = best
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
        clusters.sort(key=lambda c: c[0])

    table = {}
    for head, cluster in enumerate(sorted(clusters, key=lambda c: c[0]), start=1):
        for i in cluster:
            table[states[i]] = head
    provenance = {
        "mode": "grad-sim",
        "states": [list(s) for s in states],
        "samples": [sg.samples for sg in grads],
        "similarity": sim.tolist(),
    }
    return GateMap(n_heads=n_heads, table=table, provenance=provenance).validate()


def identity_gate_map(v_states: int, u_classes: int) -> GateMap:
    """One head per composite state, numbered lexicographically by (v, u)."""
    table = {}
    head = 1
    for v in range(v_states):
        for u in range(u_classes):
            table[(v, u)] = head
            head += 1
    return GateMap(n_heads=head - 1, table=table, provenance={"mode": "identity"}).validate()


def manual_gate_map(table: dict, n_heads: int | None = None) -> GateMap:
    entries = {(int(v), int(u)): int(h) for (v, u), h in table.items()}
    if not entries:
        raise GateError("manual gate table is empty")
    heads = set(entries.values())
    if n_heads is None:
        n_heads = max(heads)
    return GateMap(n_heads=n_heads, table=entries, provenance={"mode": "manual"}).validate()


def gate_lookup(gate_map: GateMap, v: int, u_series) -> np.ndarray:
    """s[t] = table[(v, u[t])]; unmapped pairs are an error, never invented."""
    u_arr = np.asarray(u_series)
    out = np.empty(u_arr.shape, dtype=np.int64)
    for u in np.unique(u_arr):
        key = (int(v), int(u))
        if key not in gate_map.table:
            raise GateError(f"gate table has no entry for (v={key[0]}, u={key[1]})")
        out[u_arr == u] = gate_map.table[key]
    return out


def derive_gate_map(
    params: dict,
    config: ModelConfig,
    records,
    n_heads: int,
    corr_weight: float = 0.2,
    normalize: bool = True,
) -> GateMap:
    """Gradient-similarity gate map over the config's full (v, u) state space.

    States no record carries are filled from the populated state with the
    same accessible value and nearest stage (warned about, and listed in the
    provenance) so the table stays total.
    """
    space = [(v, u) for v in range(config.v_states) for u in range(config.u_classes)]
    populated = []
    for state in space:
        v, u = state
        if any(r.gender == v and np.any(r.stages == u) for r in records):
            populated.append(state)
    if not populated:
        raise GateError("no (v, u) state is populated by the given records")
    if n_heads > len(populated):
        raise GateError(
            f"n_heads={n_heads} exceeds the {len(populated)} populated states"
        )
    gradients = [
        state_gradient(params, config, records, state, corr_weight=corr_weight, normalize=normalize)
        for state in populated
    ]
    gate_map = build_gate_map(gradients, n_heads)

    filled = {}
    for state in space:
        if state in gate_map.table:
            continue
        v, u = state
        same_v = [s for s in populated if s[0] == v]
        pool = same_v if same_v else populated
        donor = min(pool, key=lambda s: (abs(s[1] - u), s[1], abs(s[0] - v), s[0]))
        log.warning(
            "state (v=%d, u=%d) has no samples; gated like (v=%d, u=%d)", v, u, donor[0], donor[1]
        )
        gate_map.table[state] = gate_map.table[donor]
        filled[state] = donor
    if filled:
        gate_map.provenance["filled_states"] = {
            f"v={s[0]},u={s[1]}": f"v={d[0]},u={d[1]}" for s, d in sorted(filled.items())
        }
    return gate_map.validate()


# ---------------------------------------------------------------- serialization


def gate_map_to_dict(gate_map: GateMap) -> dict:
    table = {
        f"v={v},u={u}": int(head)
        for (v, u), head in sorted(gate_map.table.items())
    }
    return {"n_heads": gate_map.n_heads, "table": table, "provenance": gate_map.provenance}


def gate_map_from_dict(payload: dict) -> GateMap:
    try:
        raw_table = payload["table"]
        n_heads = int(payload["n_heads"])
    except (KeyError, TypeError, ValueError) as exc:
        raise GateError(f"bad gate-map payload: {exc}") from exc
    table = {}
    for key, head in raw_table.items():
        try:
            v_part, u_part = key.split(",")
            state = (int(v_part.removeprefix("v=")), int(u_part.removeprefix("u=")))
        except ValueError as exc:
            raise GateError(f"bad gate-table key {key!r}") from exc
        table[state] = int(head)
    return GateMap(n_heads=n_heads, table=table, provenance=payload.get("provenance", {})).validate()


def save_gate_map(path, gate_map: GateMap) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(gate_map_to_dict(gate_map), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_gate_map(path) -> GateMap:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise GateError(f"{path}: not valid JSON ({exc})") from exc
    return gate_map_from_dict(payload)
