"""Named training variants and the comparison experiments built from them."""

from dataclasses import dataclass, field, replace

from .evalkit import (
    cross_dataset_eval,
    evaluate_retrieval,
    illumination_report,
    intra_inter_report,
    low_light_sweep,
)
from .exceptions import InvalidParameterError
from .trainer import PHASES, TrainConfig, train

LOW_LIGHT_GAMMAS = (1.0, 0.6, 0.4, 0.25, 0.15)

# (lambda3, lambda4): one weight swept while the other stays at 1
LAMBDA_GRID = (
    (0.1, 1.0), (0.5, 1.0), (1.0, 1.0), (2.0, 1.0), (5.0, 1.0),
    (1.0, 0.1), (1.0, 0.5), (1.0, 2.0), (1.0, 5.0),
)


@dataclass(frozen=True)
class Variant:
    phases: tuple = PHASES
    use_generator: bool = True
    loss: dict = field(default_factory=dict)


VARIANTS = {
    # plain ReID: triplet + softmax on f_P, no illumination head or generator
    "baseline": Variant(("I", "III"), False, {"lambda3": 0.0, "lambda4": 0.0}),
    "no_G": Variant(("I", "III"), False, {"lambda4": 0.0}),
    "no_illum": Variant(loss={"lambda3": 0.0}),
    "no_triplet": Variant(loss={"lambda1": 0.0}),
    "no_softmax": Variant(loss={"lambda2": 0.0}),
    "full": Variant(),
}
ABLATION_ORDER = ("full", "no_G", "no_illum", "baseline", "no_triplet", "no_softmax")


def variant_config(name, config=None):
    """``(TrainConfig, phases)`` for a named variant derived from ``config``."""
    if name not in VARIANTS:
        raise InvalidParameterError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    v = VARIANTS[name]
    config = config or TrainConfig()
    loss = replace(config.loss, **v.loss)
    return replace(config, loss=loss, use_generator=v.use_generator), v.phases


def train_variant(data, name, config=None, model_config=None):
    cfg, phases = variant_config(name, config)
    return train(data, cfg, phases, model_config=model_config)


def _summary(model, data):
    held = data.subset((data.split != "train").nonzero()[0])
    return {
        **evaluate_retrieval(model, data),
        "illumination": illumination_report(model, held),
        "intra_inter": intra_inter_report(model, held),
    }


def ablation(data, config=None, variants=ABLATION_ORDER, model_config=None, on_variant=None):
    """Train each variant on the train split of ``data`` and evaluate on its test splits."""
    out = {}
    for name in variants:
        state = train_variant(data.select("train"), name, config, model_config)
        out[name] = _summary(state.model, data)
        if on_variant is not None:
            on_variant(name, state, out[name])
    return out


def lambda_sweep(data, config=None, grid=LAMBDA_GRID, model_config=None):
    config = config or TrainConfig()
    out = []
    for l3, l4 in grid:
        cfg = replace(config, loss=replace(config.loss, lambda3=l3, lambda4=l4))
        state = train(data.select("train"), cfg, PHASES, model_config=model_config)
        out.append({"lambda3": l3, "lambda4": l4, **evaluate_retrieval(state.model, data)})
    return out


def standard(base, synth, config=None, model_config=None):
    """Baseline on both datasets (M1/M2/M3) and full IID on the synthesized one."""
    models = {
        "base": train_variant(base.select("train"), "baseline", config, model_config).model,
        "synth": train_variant(synth.select("train"), "baseline", config, model_config).model,
    }
    iid = train_variant(synth.select("train"), "full", config, model_config).model
    return {
        "baseline": cross_dataset_eval(models, {"base": base, "synth": synth}),
        "iid": evaluate_retrieval(iid, synth),
        "models": {"baseline_base": models["base"], "baseline_synth": models["synth"], "iid": iid},
    }


def low_light(model, data, gammas=LOW_LIGHT_GAMMAS):
    test = data.subset((data.split != "train").nonzero()[0])
    return low_light_sweep(model, test, gammas)
