"""Adam optimization and the per-variant training loops.

Reproducibility contract: every stochastic choice derives from the run seed
through named seed sequences - record order from (seed, epoch), rrelu slope
draws from (seed, epoch, step) - so a run resumed from any epoch boundary
replays the exact bit stream of an uninterrupted run.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from . import model as model_mod
from .checkpoint import save_checkpoint
from .config import ConfigError, GateConfig, ModelConfig, TrainConfig
from .data import normalize_breathing
from .gate import GateMap, derive_gate_map, identity_gate_map, manual_gate_map
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
AUTO_CLIP_NORM = 10.0


class TrainingError(RuntimeError):
    """Empty dataset, divergent loss, or non-finite gradients."""


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    lr: float = 2e-4


def init_adam(params: dict, lr: float) -> AdamState:
    m = {name: np.zeros_like(t.data) for name, t in params.items() if t.requires_grad}
    v = {name: np.zeros_like(t.data) for name, t in params.items() if t.requires_grad}
    return AdamState(m=m, v=v, lr=lr)


def adam_step(params: dict, state: AdamState) -> None:
    """One bias-corrected Adam update, in place; missing gradients count as zero."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in state.m:
        tensor = params[name]
        grad = tensor.grad
        if grad is None:
            grad = np.zeros_like(tensor.data)
        elif not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient in {name!r} at step {state.t}")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        tensor.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_gradients(params: dict, max_norm: float) -> float:
    """Scale all trainable gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    grads = []
    for name, tensor in params.items():
        if tensor.requires_grad and tensor.grad is not None:
            grads.append(tensor.grad)
            total += float(np.sum(np.asarray(tensor.grad, dtype=np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for grad in grads:
            grad *= np.asarray(scale, dtype=grad.dtype)
    return norm


def adam_to_optimizer_dict(state: AdamState) -> dict:
    out = {}
    for name, arr in state.m.items():
        out[f"adam.m.{name}"] = arr
    for name, arr in state.v.items():
        out[f"adam.v.{name}"] = arr
    return out


def adam_from_checkpoint(params: dict, optimizer: dict, meta: dict) -> AdamState:
    state = init_adam(params, lr=float(meta.get("adam_lr", 2e-4)))
    state.t = int(meta.get("adam_t", 0))
    for name in state.m:
        m_key, v_key = f"adam.m.{name}", f"adam.v.{name}"
        if m_key in optimizer:
            state.m[name] = optimizer[m_key].astype(state.m[name].dtype, copy=True)
        if v_key in optimizer:
            state.v[name] = optimizer[v_key].astype(state.v[name].dtype, copy=True)
    return state


@dataclass
class TrainLog:
    seed: int
    config_hash: str | None = None
    entries: list = field(default_factory=list)
    clip_activated_epoch: int | None = None

    def extend(self, other: "TrainLog") -> None:
        self.entries.extend(other.entries)
        if self.clip_activated_epoch is None:
            self.clip_activated_epoch = other.clip_activated_epoch


def write_train_log(path, train_log: TrainLog) -> None:
    """One JSON object per epoch, seed and config hash stamped on every line."""
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for entry in train_log.entries:
            row = dict(entry)
            row["seed"] = train_log.seed
            row["config_hash"] = train_log.config_hash
            row["tool_version"] = __version__
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _prepare_nights(records, normalize: bool) -> list:
    nights = []
    for record in records:
        x = normalize_breathing(record) if normalize else record.breathing.astype(np.float64)
        nights.append(
            {
                "x": x,
                "y": record.spo2.astype(np.float64) / 100.0,
                "u": record.stages,
                "v": record.gender,
            }
        )
    return nights


def train(
    config: ModelConfig,
    records,
    train_cfg: TrainConfig,
    params: dict | None = None,
    gate_map: GateMap | None = None,
    *,
    normalize: bool = True,
    start_epoch: int = 0,
    end_epoch: int | None = None,
    adam: AdamState | None = None,
    checkpoint_path=None,
    config_hash: str | None = None,
) -> tuple[dict, AdamState, TrainLog]:
    """One optimizer step per night per epoch, shuffled by (seed, epoch).

    A non-finite loss is skipped and turns gradient clipping on (norm 10)
    for the rest of the run; a second non-finite loss with clipping already
    active aborts.  When checkpoint_path is given, a checkpoint lands there
    at the end and every train_cfg.checkpoint_every epochs.
    """
    config.validate()
    if not records:
        raise TrainingError("empty training set")
    if config.variant == "gated" and gate_map is None:
        raise ConfigError("gated training requires a gate map")

    nights = _prepare_nights(records, normalize)
    if params is None:
        params = model_mod.build_model(config, seed=train_cfg.seed)
    if adam is None:
        adam = init_adam(params, lr=train_cfg.lr)
    end_epoch = train_cfg.epochs if end_epoch is None else end_epoch
    trainable = [name for name, t in params.items() if t.requires_grad]

    train_log = TrainLog(seed=train_cfg.seed, config_hash=config_hash)
    clip_norm = train_cfg.grad_clip
    seed = train_cfg.seed
    aux = train_cfg.aux_weight if config.variant in ("varaug", "gated") else 0.0

    for epoch in range(start_epoch, end_epoch):
        t0 = time.perf_counter()
        order = np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(len(nights))
        sums = {"l1": 0.0, "corr": 0.0, "ce": 0.0, "loss": 0.0}
        for step, night_index in enumerate(order):
            night = nights[night_index]
            rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, step]))
            v = night["v"] if config.variant in ("varaug", "gated") else None
            x = model_mod.as_input(night["x"], params, v=v if config.variant == "varaug" else None)
            pred = model_mod.forward(
                params,
                config,
                x,
                v=v,
                u=night["u"] if config.variant == "gated" else None,
                gate_map=gate_map,
                mode="train",
                rng=rng,
            )
            l1, corr = model_mod.loss_components(pred.y_hat, night["y"])
            loss = l1 - train_cfg.corr_weight * corr
            ce_value = 0.0
            if aux != 0.0 and pred.u_logits is not None:
                ce = model_mod.stage_ce_sum(pred.u_logits, night["u"])
                loss = loss + (aux / pred.y_hat.shape[0]) * ce
                ce_value = float(ce)

            loss_value = float(loss)
            if not np.isfinite(loss_value):
                if clip_norm > 0.0:
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} step {step} with clipping already active"
                    )
                clip_norm = AUTO_CLIP_NORM
                train_log.clip_activated_epoch = epoch
                log.warning(
                    "non-finite loss at epoch %d step %d; gradient clipping enabled at norm %.1f",
                    epoch,
                    step,
                    AUTO_CLIP_NORM,
                )
                continue

            for name in trainable:
                params[name].grad = None
            backward(loss)
            if clip_norm > 0.0:
                clip_gradients(params, clip_norm)
            adam_step(params, adam)
            sums["l1"] += float(l1)
            sums["corr"] += float(corr)
            sums["ce"] += ce_value
            sums["loss"] += loss_value

        n = len(nights)
        train_log.entries.append(
            {
                "epoch": epoch,
                "l1": sums["l1"] / n,
                "corr": sums["corr"] / n,
                "ce": sums["ce"] / n,
                "loss": sums["loss"] / n,
                "wall_s": time.perf_counter() - t0,
            }
        )
        if (
            checkpoint_path is not None
            and train_cfg.checkpoint_every > 0
            and (epoch + 1) % train_cfg.checkpoint_every == 0
        ):
            _write_checkpoint(checkpoint_path, params, config, train_cfg, adam, epoch + 1, config_hash)

    if checkpoint_path is not None:
        _write_checkpoint(checkpoint_path, params, config, train_cfg, adam, end_epoch, config_hash)
    return params, adam, train_log


def _write_checkpoint(path, params, config, train_cfg, adam, epoch, config_hash):
    save_checkpoint(
        path,
        params,
        config,
        meta={
            "epoch": epoch,
            "seed": train_cfg.seed,
            "adam_t": adam.t,
            "adam_lr": adam.lr,
            "config_hash": config_hash,
            "tool_version": __version__,
        },
        optimizer=adam_to_optimizer_dict(adam),
    )


def pretrain_epochs(train_cfg: TrainConfig) -> int:
    return min(max(1, round(train_cfg.pretrain_fraction * train_cfg.epochs)), train_cfg.epochs)


def copy_backbone_into_gated(backbone_params: dict, gated_params: dict, n_heads: int) -> None:
    """Overwrite shared modules and seed every head from the pretrained head.

    After this, all heads compute identical outputs; the stage head keeps its
    fresh initialization (the backbone has none).
    """
    for name, tensor in backbone_params.items():
        if name.startswith("head1."):
            suffix = name.removeprefix("head1.")
            for h in range(1, n_heads + 1):
                gated_params[f"head{h}.{suffix}"].data[...] = tensor.data
        else:
            gated_params[name].data[...] = tensor.data


def resolve_gate_map(
    mode: str,
    config: ModelConfig,
    gate_cfg: GateConfig,
    backbone_params: dict | None = None,
    backbone_config: ModelConfig | None = None,
    records=None,
    corr_weight: float = 0.2,
    normalize: bool = True,
) -> GateMap:
    """Build the gate map named by `mode`, sized to the model's head count."""
    if mode == "identity":
        gate_map = identity_gate_map(config.v_states, config.u_classes)
    elif mode == "manual":
        if not gate_cfg.manual_table:
            raise ConfigError("gate mode 'manual' requires a manual_table")
        table = {}
        for key, head in gate_cfg.manual_table.items():
            v_part, u_part = key.split(",")
            table[(int(v_part.removeprefix("v=")), int(u_part.removeprefix("u=")))] = int(head)
        gate_map = manual_gate_map(table, n_heads=config.n_heads)
    elif mode == "grad-sim":
        if backbone_params is None or records is None:
            raise ConfigError("gate mode 'grad-sim' requires a pretrained backbone and records")
        gate_map = derive_gate_map(
            backbone_params,
            backbone_config,
            records,
            config.n_heads,
            corr_weight=corr_weight,
            normalize=normalize,
        )
    else:
        raise ConfigError(f"unknown gate mode {mode!r}")
    if gate_map.n_heads != config.n_heads:
        raise ConfigError(
            f"gate map has {gate_map.n_heads} heads, model expects {config.n_heads}"
        )
    return gate_map


def train_gated_pipeline(
    config: ModelConfig,
    records,
    train_cfg: TrainConfig,
    gate_cfg: GateConfig | None = None,
    *,
    normalize: bool = True,
    checkpoint_path=None,
    config_hash: str | None = None,
) -> tuple[dict, GateMap, TrainLog]:
    """Pretrain a backbone, derive the gate map, then fine-tune the gated model.

    Phase 1 trains a single-head backbone for a pretrain_fraction share of
    the epoch budget.  Phase 2 maps states to heads (gradient similarity by
    default).  Phase 3 copies the backbone into every head and trains the
    gated variant over the remaining epochs, gating on ground-truth stages.
    Phase 3 restarts the optimizer; epoch numbering continues, so phases
    share one shuffle/sample seed stream.
    """
    if config.variant != "gated":
        raise ConfigError(f"pipeline requires variant 'gated', got {config.variant!r}")
    gate_cfg = gate_cfg or GateConfig()
    pre = pretrain_epochs(train_cfg)

    backbone_cfg = replace(config, variant="backbone", n_heads=1)
    backbone_params, _, log1 = train(
        backbone_cfg,
        records,
        train_cfg,
        normalize=normalize,
        start_epoch=0,
        end_epoch=pre,
        config_hash=config_hash,
    )

    gate_map = resolve_gate_map(
        gate_cfg.mode,
        config,
        gate_cfg,
        backbone_params=backbone_params,
        backbone_config=backbone_cfg,
        records=records,
        corr_weight=train_cfg.corr_weight,
        normalize=normalize,
    )

    gated_params = model_mod.build_model(config, seed=train_cfg.seed)
    copy_backbone_into_gated(backbone_params, gated_params, config.n_heads)
    gated_params, _, log3 = train(
        config,
        records,
        train_cfg,
        params=gated_params,
        gate_map=gate_map,
        normalize=normalize,
        start_epoch=pre,
        end_epoch=train_cfg.epochs,
        checkpoint_path=checkpoint_path,
        config_hash=config_hash,
    )

    train_log = TrainLog(seed=train_cfg.seed, config_hash=config_hash)
    train_log.extend(log1)
    train_log.extend(log3)
    return gated_params, gate_map, train_log
