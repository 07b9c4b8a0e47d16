"""Three-phase training: disentanglement, generator, joint.

Every source of randomness in an epoch (batch order, mining pools, soft
labels, dropout) is derived from ``(seed, phase, epoch)``, so a run resumed
from an end-of-epoch checkpoint replays the uninterrupted run exactly.
"""

from contextlib import contextmanager, nullcontext
from dataclasses import asdict, dataclass, field
import hashlib
import io
import json
import logging
from pathlib import Path

import numpy as np
import torch

from .exceptions import CheckpointError, ConfigurationError, InvalidParameterError
from .iidnet import IIDNet, ModelConfig, channel_stats, images_to_tensor
from .losses import (
    LossConfig,
    batch_triplet_loss,
    generation_loss,
    illum_regression_loss,
    reid_loss,
    soften_label,
    softmax_loss_from_logits,
    total_loss,
)

logger = logging.getLogger(__name__)

CKPT_HEADER = "iidnet-ckpt-v1"
PHASES = ("I", "II", "III")
PARAM_ALL = ("E", "P", "I", "G")
_PHASE_INDEX = {p: i + 1 for i, p in enumerate(PHASES)}


@dataclass
class OptimizerSchedule:
    kind: str = "sgd_momentum"
    base_lr: float = 0.05
    lr_decay_factor: float = 0.1
    decay_every_epochs: int = 40
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_multipliers: dict = field(default_factory=dict)
    epochs: int = 12
    batch_size: int = 32

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise InvalidParameterError(f"unknown optimizer kind {self.kind!r}")
        if self.base_lr <= 0:
            raise InvalidParameterError("base_lr must be > 0")
        if not 0 < self.lr_decay_factor <= 1:
            raise InvalidParameterError("lr_decay_factor must be in (0, 1]")
        if self.decay_every_epochs < 1:
            raise InvalidParameterError("decay_every_epochs must be >= 1")

    def lr(self, epoch, group=None):
        """Learning rate during 0-based ``epoch`` for parameter ``group``."""
        scale = self.lr_multipliers.get(group, 1.0) if group else 1.0
        return self.base_lr * self.lr_decay_factor ** (epoch // self.decay_every_epochs) * scale


def paper_schedules():
    """Full-scale optimizer settings.  Epoch totals are not published; these are placeholders."""
    return {
        "I": OptimizerSchedule(
            "sgd_momentum", 0.05, 0.1, 40, 0.9, 5e-4, {"E": 1.0, "P": 0.1, "I": 0.1}, 60
        ),
        "II": OptimizerSchedule("adam", 0.01, 0.1, 40, epochs=60, batch_size=64),
        "III": OptimizerSchedule(
            "adam", 1e-4, 0.1, 50, lr_multipliers={"G": 10.0}, epochs=100
        ),
    }


def toy_schedules():
    """Paper schedules with epoch budgets and decay intervals shrunk for toy data."""
    s = paper_schedules()
    s["I"].epochs, s["I"].decay_every_epochs = 12, 5
    s["II"].epochs, s["II"].decay_every_epochs, s["II"].batch_size = 10, 4, 32
    s["III"].epochs, s["III"].decay_every_epochs = 15, 6
    return s


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    schedules: dict = field(default_factory=toy_schedules)
    P: int = 8
    K: int = 4
    seed: int = 0
    use_generator: bool = True
    generated_flow: bool = True
    detach_generated: bool = False
    # generated images are cleaner than real ones; keep them out of the
    # BatchNorm running statistics that inference relies on
    generated_bn_stats: bool = False
    grad_clip: float | None = None
    n_positive: int = 16
    n_negative: int = 64
    dtype: str = "float32"

    @classmethod
    def toy(cls, **kwargs):
        """Settings for the small toy network.

        Without a pretrained backbone, the summed triplet loss at the phase-I
        learning rate drives the randomly initialized encoder to a collapsed
        solution in the first few steps; averaging the triplet term and
        clipping the gradient norm keeps it stable.  The generator gets a
        longer phase II so that its reconstructions keep the identity before
        they are fed back in phase III.
        """
        if "schedules" not in kwargs:
            kwargs["schedules"] = toy_schedules()
            kwargs["schedules"]["II"].epochs = 40
            kwargs["schedules"]["II"].decay_every_epochs = 20
        kwargs.setdefault("loss", LossConfig(triplet_reduction="mean"))
        kwargs.setdefault("grad_clip", 5.0)
        return cls(**kwargs)

    def to_dict(self):
        d = asdict(self)
        d["schedules"] = {k: asdict(v) for k, v in self.schedules.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["loss"] = LossConfig(**d.get("loss", {}))
        if "schedules" in d:
            base = toy_schedules()
            for phase, sd in d["schedules"].items():
                merged = asdict(base[phase]) | dict(sd)
                base[phase] = OptimizerSchedule(**merged)
            d["schedules"] = base
        return cls(**d)

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


@dataclass
class TrainState:
    model: IIDNet
    config: TrainConfig
    classes: np.ndarray
    phase: str | None = None
    epoch: int = 0
    step: int = 0
    completed_phases: list = field(default_factory=list)
    metrics_log: list = field(default_factory=list)
    optimizer_state: dict | None = None

    @property
    def rng_seed(self):
        return self.config.seed


# ---------------------------------------------------------------------------
# data


class _TrainingData:
    def __init__(self, data, classes, dtype):
        if data.identities is None or data.illumination is None:
            raise ConfigurationError("training data needs identity and illumination labels")
        self.x = images_to_tensor(data.images, dtype)
        lookup = {c: i for i, c in enumerate(classes.tolist())}
        try:
            self.y = np.array([lookup[c] for c in data.identities.tolist()], dtype=np.int64)
        except KeyError as exc:
            raise ConfigurationError(f"identity {exc} not in the model's classes") from None
        self.c = data.illumination.astype(np.float64)
        self.by_class = [np.flatnonzero(self.y == k) for k in range(len(classes))]

    def __len__(self):
        return len(self.y)


def _epoch_rng(seed, phase, epoch, stream=0):
    return np.random.default_rng([int(seed), _PHASE_INDEX[phase], int(epoch), stream])


def pk_batches(by_class, P, K, n_batches, rng):
    """Identity-balanced batches: ``P`` identities with ``K`` images each."""
    n_classes = len(by_class)
    if n_classes < 2:
        raise ConfigurationError("PK sampling needs at least two identities")
    P = min(P, n_classes)
    batches = []
    for _ in range(n_batches):
        ids = rng.choice(n_classes, size=P, replace=False)
        members = [
            rng.choice(by_class[k], size=K, replace=len(by_class[k]) < K) for k in ids
        ]
        batches.append(np.concatenate(members))
    return batches


def uniform_batches(n, batch_size, rng):
    perm = rng.permutation(n)
    n_batches = max(1, n // batch_size)
    return [perm[i * batch_size : (i + 1) * batch_size] for i in range(n_batches)]


def steps_per_epoch(n, cfg, phase):
    if phase == "II":
        return max(1, n // cfg.schedules["II"].batch_size)
    return max(1, n // (cfg.P * cfg.K))


# ---------------------------------------------------------------------------
# state construction


def init_state(data, config=None, model_config=None):
    """Fresh model and state for ``data`` (the training split)."""
    config = config or TrainConfig()
    classes = np.unique(data.identities)
    if model_config is None:
        model_config = ModelConfig.toy(len(classes), image_size=data.image_shape)
    elif model_config.n_identities != len(classes):
        model_config = ModelConfig(**{**model_config.to_dict(), "n_identities": len(classes)})
    model = IIDNet(model_config, seed=config.seed).to(config.torch_dtype)
    mean, std = channel_stats(data.images)
    model.set_normalization(mean, std)
    with torch.no_grad():
        # start the regressor at the average label instead of zero
        model.regressor_i.bias.fill_(float(np.mean(data.illumination)))
    return TrainState(model=model, config=config, classes=classes)


def _make_optimizer(model, phase, cfg, groups):
    sched = cfg.schedules[phase]
    params = model.param_groups()
    spec = [
        {"params": params[g], "name": g, "lr": sched.lr(0, g)}
        for g in groups
        if params[g]
    ]
    if sched.kind == "sgd_momentum":
        return torch.optim.SGD(spec, momentum=sched.momentum, weight_decay=sched.weight_decay)
    return torch.optim.Adam(spec, weight_decay=sched.weight_decay)


def _phase_groups(phase, cfg):
    if phase == "I":
        return ("E", "P", "I")
    if phase == "II":
        return ("G",)
    return ("E", "P", "I", "G") if cfg.use_generator else ("E", "P", "I")


def _set_trainable(model, groups):
    for name, params in model.param_groups().items():
        for p in params:
            p.requires_grad_(name in groups)


# ---------------------------------------------------------------------------
# loss evaluation


@contextmanager
def frozen_bn_stats(module):
    """Normalize with batch statistics but leave the running averages untouched."""
    norms = [m for m in module.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.momentum = 0.0
    try:
        yield
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom


def _reid_terms(model, f_p, y, cfg, rng):
    l_sum, _ = batch_triplet_loss(f_p, y, cfg.loss.margin_xi, rng, cfg.n_positive, cfg.n_negative)
    l_mean = l_sum / len(y)
    l_t = l_sum if cfg.loss.triplet_reduction == "sum" else l_mean
    l_s = softmax_loss_from_logits(model.identity_logits(f_p), y)
    return l_t, l_mean, l_s, reid_loss(l_t, l_s, cfg.loss)


def compute_losses(model, x, y, soft, phase, cfg, rng):
    """Objective of one batch for phase ``I`` or ``III``; returns ``(total, components)``."""
    z = model.encode(x)
    f_p, f_i = model.embed(z)
    l_t, l_t_mean, l_s, l_p = _reid_terms(model, f_p, y, cfg, rng)
    l_i = illum_regression_loss(f_i, torch.as_tensor(soft, dtype=x.dtype), model.regressor_i)
    comps = {"L_T": l_t, "L_T_mean": l_t_mean, "L_S": l_s, "L_P": l_p, "L_I": l_i}
    with_gen = False
    if phase == "III":
        if cfg.use_generator:
            x_hat = model.generate(f_p, f_i)
            comps["L_G"] = generation_loss(x, x_hat)
            if cfg.generated_flow:
                with_gen = True
                src = x_hat.detach() if cfg.detach_generated else x_hat
                stats = nullcontext() if cfg.generated_bn_stats else frozen_bn_stats(model)
                with stats:
                    _, f_p2, f_i2 = model.forward_generated(src)
                _, _, l_s2, l_p2 = _reid_terms(model, f_p2, y, cfg, rng)
                comps["L_P_gen"] = l_p2
                comps["L_I_gen"] = illum_regression_loss(
                    f_i2, torch.as_tensor(soft, dtype=x.dtype), model.regressor_i
                )
        else:
            comps["L_G"] = torch.zeros((), dtype=x.dtype)
    total = total_loss(phase, comps, cfg.loss, include_generated_flow=with_gen)
    return total, comps


def _log_record(state, epoch, phase, comps, total, optimizer):
    rec = {"step": state.step, "epoch": epoch, "phase": phase}
    rec.update({k: float(v.detach()) for k, v in comps.items()})
    rec["total"] = float(total.detach())
    rec["lr"] = {g["name"]: g["lr"] for g in optimizer.param_groups}
    return rec


# ---------------------------------------------------------------------------
# phases


def _check_order(state, phase):
    done = state.completed_phases
    if phase == "I":
        return
    if phase == "II" and "I" not in done:
        raise ConfigurationError("phase II needs a phase-I checkpoint")
    if phase == "III":
        if "I" not in done:
            raise ConfigurationError("phase III needs a phase-I checkpoint")
        if state.config.use_generator and "II" not in done:
            raise ConfigurationError("phase III needs a phase-II checkpoint")


def _run_phase(state, data, phase, on_epoch_end=None):
    cfg = state.config
    _check_order(state, phase)
    if phase in state.completed_phases:
        return state
    if state.phase != phase:
        state.phase, state.epoch, state.optimizer_state = phase, 0, None
    sched = cfg.schedules[phase]
    model = state.model
    td = _TrainingData(data, state.classes, cfg.torch_dtype)
    groups = _phase_groups(phase, cfg)
    _set_trainable(model, groups)
    optimizer = _make_optimizer(model, phase, cfg, groups)
    if state.optimizer_state is not None:
        optimizer.load_state_dict(state.optimizer_state)
    n_steps = steps_per_epoch(len(td), cfg, phase)

    with torch.random.fork_rng():
        for epoch in range(state.epoch, sched.epochs):
            for g in optimizer.param_groups:
                g["lr"] = sched.lr(epoch, g["name"])
            torch.manual_seed(int(_epoch_rng(cfg.seed, phase, epoch, 9).integers(2**62)))
            rng = _epoch_rng(cfg.seed, phase, epoch)
            soft = soften_label(td.c, cfg.loss.soft_label_sigma, _epoch_rng(cfg.seed, phase, epoch, 1))
            if phase == "II":
                batches = uniform_batches(len(td), sched.batch_size, rng)
            else:
                batches = pk_batches(td.by_class, cfg.P, cfg.K, n_steps, rng)
            for idx in batches:
                state.step += 1
                x = td.x[idx]
                if phase == "II":
                    model.eval()
                    model.generator.train()
                    with torch.no_grad():
                        f_p, f_i = model.embed(model.encode(x))
                    l_g = generation_loss(x, model.generate(f_p, f_i))
                    total, comps = l_g, {"L_G": l_g}
                else:
                    model.train()
                    if not cfg.use_generator:
                        model.generator.eval()
                    total, comps = compute_losses(model, x, td.y[idx], soft[idx], phase, cfg, rng)
                optimizer.zero_grad(set_to_none=True)
                total.backward()
                if cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(
                        [p for g in optimizer.param_groups for p in g["params"]], cfg.grad_clip
                    )
                optimizer.step()
                state.metrics_log.append(_log_record(state, epoch, phase, comps, total, optimizer))
            state.epoch = epoch + 1
            state.optimizer_state = optimizer.state_dict()
            logger.info(
                "phase %s epoch %d/%d total %.4f",
                phase,
                epoch + 1,
                sched.epochs,
                state.metrics_log[-1]["total"],
            )
            if on_epoch_end is not None:
                on_epoch_end(state)
    state.completed_phases.append(phase)
    state.optimizer_state = None
    _set_trainable(model, PARAM_ALL)
    model.eval()
    return state



def run_phase1(data, config=None, state=None, on_epoch_end=None):
    """Encoder and both heads under ``L_P + lambda3 * L_I``; generator untouched."""
    state = state or init_state(data, config)
    return _run_phase(state, data, "I", on_epoch_end)


def run_phase2(data, state, on_epoch_end=None):
    """Generator only, minimizing reconstruction error with everything else frozen."""
    if state is None:
        raise ConfigurationError("phase II needs a phase-I checkpoint")
    if not state.config.use_generator:
        state.completed_phases.append("II")
        return state
    return _run_phase(state, data, "II", on_epoch_end)


def run_phase3(data, state, on_epoch_end=None):
    """Joint training of all groups, including the generated flow."""
    if state is None:
        raise ConfigurationError("phase III needs a phase-II checkpoint")
    return _run_phase(state, data, "III", on_epoch_end)


def train(data, config=None, phases=PHASES, state=None, model_config=None, on_epoch_end=None):
    """Run the requested phases in order and return the final state."""
    phases = [p for p in PHASES if p in phases]
    if state is None:
        state = init_state(data, config, model_config)
    for phase in phases:
        fn = {"I": run_phase1, "II": run_phase2, "III": run_phase3}[phase]
        if phase == "I":
            state = fn(data, state=state, on_epoch_end=on_epoch_end)
        else:
            state = fn(data, state, on_epoch_end=on_epoch_end)
    return state


# ---------------------------------------------------------------------------
# checkpoints


def _payload(state):
    model = state.model
    names = {p: n for n, p in model.named_parameters()}
    # Plain metadata travels as canonical JSON text: pickling shared Python
    # objects would make the bytes depend on object identity, not content.
    meta = {
        "model_config": model.config.to_dict(),
        "train_config": state.config.to_dict(),
        "param_groups": {g: [names[p] for p in ps] for g, ps in model.param_groups().items()},
        "classes": state.classes.tolist(),
        "phase": state.phase,
        "epoch": state.epoch,
        "step": state.step,
        "completed_phases": list(state.completed_phases),
        "rng_seed": state.config.seed,
        "metrics_log": state.metrics_log,
    }
    return {
        "header": CKPT_HEADER,
        "meta": json.dumps(meta, sort_keys=True),
        "model_state": model.state_dict(),
        "optimizer_state": state.optimizer_state,
    }


def checkpoint_bytes(state):
    buf = io.BytesIO()
    torch.save(_payload(state), buf)
    return buf.getvalue()


def save_checkpoint(state, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(state))
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(io.BytesIO(path.read_bytes()), weights_only=True)
    except Exception as exc:  # torch raises several unrelated types on corrupt input
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    header = payload.get("header") if isinstance(payload, dict) else None
    if header != CKPT_HEADER:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header!r}")
    meta = json.loads(payload["meta"])
    config = TrainConfig.from_dict(meta["train_config"])
    model = IIDNet(ModelConfig(**meta["model_config"])).to(config.torch_dtype)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return TrainState(
        model=model,
        config=config,
        classes=np.asarray(meta["classes"]),
        phase=meta["phase"],
        epoch=meta["epoch"],
        step=meta["step"],
        completed_phases=meta["completed_phases"],
        metrics_log=meta["metrics_log"],
        optimizer_state=payload["optimizer_state"],
    )


def param_digest(model, group):
    """SHA-256 of one parameter group, for frozen-group checks."""
    h = hashlib.sha256()
    for p in model.param_groups()[group]:
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
