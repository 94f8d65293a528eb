"""Experiment configuration: schema validation, default expansion and
construction of the runtime objects."""

from __future__ import annotations

import copy
import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema

from .distill import DistillWeights
from .prior import NoiseSchedule
from .renderer import SamplingConfig
from .scene import (
    CANONICAL_MASK_BOX,
    CameraRing,
    SceneSpec,
    canonical_ring,
    canonical_spec,
    primitive_from_dict,
)
from .trainer import LossWeights, PriorSpec, TrainConfig


class ConfigError(ValueError):
    """Invalid experiment configuration; ``path`` names the offending field."""

    def __init__(self, message, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@lru_cache(maxsize=1)
def schema() -> dict:
    text = resources.files("distill_lab").joinpath("schemas/experiment.schema.json").read_text()
    return json.loads(text)


def _resolve(node: dict, root: dict) -> dict:
    while "$ref" in node:
        ref = node["$ref"]
        if not ref.startswith("#/"):
            raise ConfigError(f"unsupported schema reference {ref}")
        target = root
        for part in ref[2:].split("/"):
            target = target[part]
        node = {**target, **{k: v for k, v in node.items() if k != "$ref"}}
    return node


def _fill(value, node: dict, root: dict):
    node = _resolve(node, root)
    if isinstance(value, dict) and "properties" in node:
        for key, sub in node["properties"].items():
            sub_r = _resolve(sub, root)
            if key not in value and "default" in sub_r:
                value[key] = copy.deepcopy(sub_r["default"])
            if key in value:
                value[key] = _fill(value[key], sub_r, root)
    elif isinstance(value, list) and isinstance(node.get("items"), dict):
        value = [_fill(v, node["items"], root) for v in value]
    return value


def validate(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(e.message, path)


def resolve(raw: dict) -> dict:
    """Validate ``raw`` and return a copy with every schema default expanded."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    validate(raw)
    out = _fill(copy.deepcopy(raw), schema(), schema())
    dprops = schema()["properties"]["distill"]["properties"]
    for key in ("appearance", "geometry"):
        # a partial weight block keeps the per-modality omega1/omega2 defaults
        out["distill"][key] = {**dprops[key]["default"], **out["distill"][key]}
    validate(out)
    tr = out["train"]
    if not tr["t_min"] < tr["t_max"]:
        raise ConfigError("t_min must be smaller than t_max", "train/t_min")
    smp = out["sampling"]
    if not smp["near"] < smp["far"]:
        raise ConfigError("near must be smaller than far", "sampling/near")
    return out


def load(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}", str(path)) from exc
    return resolve(raw)


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def scene_spec(cfg: dict) -> SceneSpec:
    sc = cfg.get("scene")
    if sc is None:
        raise ConfigError("missing required field 'scene'", "scene")
    if sc.get("canonical"):
        return canonical_spec(tuple(sc["dims"]))
    if "primitives" not in sc:
        raise ConfigError("either 'canonical': true or a 'primitives' list is required", "scene")
    try:
        prims = [primitive_from_dict(p) for p in sc["primitives"]]
    except KeyError as exc:
        raise ConfigError(f"primitive is missing {exc}", "scene/primitives") from exc
    return SceneSpec(prims, tuple(sc["dims"]), tuple(sc["bbox_min"]), tuple(sc["bbox_max"]), sc["falloff_voxels"])


def camera_ring(cfg: dict) -> CameraRing:
    sc = cfg["scene"]
    cam = sc["cameras"]
    if sc.get("canonical") and not cam:
        return canonical_ring()
    return CameraRing(count=cam["count"], radius=cam["radius"], elevation=cam["elevation"],
                      azimuth_center=cam["azimuth_center"], azimuth_span=cam["azimuth_span"],
                      target=tuple(cam["target"]), width=cam["resolution"], height=cam["resolution"],
                      fov=cam["fov"])


def mask_box(cfg: dict):
    sc = cfg["scene"]
    if "mask_box" in sc:
        return tuple(tuple(c) for c in sc["mask_box"])
    if sc.get("canonical"):
        return CANONICAL_MASK_BOX
    raise ConfigError("missing required field 'mask_box'", "scene/mask_box")


def sampling(cfg: dict, n_samples: int | None = None) -> SamplingConfig:
    s = dict(cfg["sampling"])
    if n_samples is not None:
        s["n_samples"] = n_samples
    return SamplingConfig(rng_seed=cfg["seed"], **s)


def dataset_sampling(cfg: dict) -> SamplingConfig:
    return sampling(cfg, cfg["scene"]["render_samples"])


def _weights(d: dict) -> DistillWeights:
    return DistillWeights(**d)


def train_config(cfg: dict) -> TrainConfig:
    tr = cfg["train"]
    ds = cfg["distill"]
    return TrainConfig(
        iterations=tr["iterations"],
        lr=tr["lr"],
        batch_size=tr["batch_size"],
        t_min=tr["t_min"],
        t_max=tr["t_max"],
        seed=cfg["seed"],
        estimator=ds["estimator"],
        appearance=_weights(ds["appearance"]),
        geometry=_weights(ds["geometry"]),
        loss=LossWeights(**cfg["loss"]),
        depth_supervision=tr["depth_supervision"],
        rgb_prior=PriorSpec(**cfg["priors"]["rgb"]),
        normal_prior=PriorSpec(**cfg["priors"]["normal"]),
        schedule=NoiseSchedule(**cfg["schedule"]),
        sampling=sampling(cfg),
        distill_resolution=ds["resolution"],
        chain_rule=ds["chain_rule"],
        init_density=tr["init_density"],
        init_color=tr["init_color"],
        beta1=tr["beta1"],
        beta2=tr["beta2"],
        adam_eps=tr["adam_eps"],
        log_every=tr["log_every"],
        checkpoint_every=tr["checkpoint_every"],
        eval_every=tr["eval_every"],
        eval_views=tuple(tr["eval_views"]),
        eval_resolution=tr["eval_resolution"],
        jobs=cfg["jobs"],
    )
