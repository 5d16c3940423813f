"""Single-document run configuration.

A run is described by one YAML file holding every knob: seed, dataset
manifest, patch recipe, model widths, loss weight, and optimizer settings.
Command-line flags only choose the command and point at files, so a run can
be reproduced from its recorded configuration alone.

``load_run_config`` validates the whole document before returning and
reports every violation at once rather than stopping at the first, since
hand-edited configs tend to accumulate several small mistakes at a time.

``create_run_dir`` materializes ``<output_root>/<config-hash>-<timestamp>``
holding the original document verbatim (``config.yaml``) next to the fully
resolved ``effective.yaml`` in which every default is explicit.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import yaml

from .errors import RunConfigError
from .losses import LossConfig
from .model import ModelConfig
from .patches import PipelineProfile, aerial_profile, cctv_profile
from .training import TrainConfig

_TOP_LEVEL_KEYS = {"seed", "manifest", "output_root", "pipeline", "model", "loss", "train"}
_LOSS_KEYS = {"lambda"}
_TUPLE_FIELDS = {"augmentations", "encoder_channels", "decoder_channels", "adam_betas"}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    manifest_path: Path
    output_root: Path
    profile: PipelineProfile
    model: ModelConfig
    loss: LossConfig
    train: TrainConfig
    source_text: str

    def effective(self) -> dict:
        """Every setting with defaults made explicit, YAML-serializable."""

        def plain(obj):
            out = {}
            for key, value in dataclasses.asdict(obj).items():
                out[key] = list(value) if isinstance(value, tuple) else value
            return out

        loss = {"lambda": self.loss.lambda_weight}
        return {
            "seed": self.seed,
            "manifest": str(self.manifest_path),
            "output_root": str(self.output_root),
            "pipeline": plain(self.profile),
            "model": plain(self.model),
            "loss": loss,
            "train": plain(self.train),
        }


def load_run_config(path: str | Path) -> RunConfig:
    """Parse and validate one run document; raise with all violations."""
    path = Path(path)
    violations: list[str] = []
    try:
        text = path.read_text()
    except OSError as exc:
        raise RunConfigError([f"cannot read {path}: {exc}"]) from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise RunConfigError([f"not valid YAML: {exc}"]) from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise RunConfigError([f"top level must be a mapping, got {type(doc).__name__}"])

    for key in sorted(set(doc) - _TOP_LEVEL_KEYS):
        violations.append(f"unknown top-level key '{key}'")

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        violations.append(f"seed: must be a non-negative integer, got {seed!r}")
        seed = 0

    manifest_raw = doc.get("manifest")
    manifest_path = path.parent / "unset"
    if not isinstance(manifest_raw, str) or not manifest_raw:
        violations.append("manifest: required, must be a path string")
    else:
        manifest_path = (path.parent / manifest_raw).resolve()

    output_root = (path.parent / str(doc.get("output_root", "runs"))).resolve()

    profile = _build_section(
        doc.get("pipeline", {}), "pipeline", violations,
        lambda kw: _build_profile(kw, seed),
        set(_field_names(PipelineProfile)) | {"mode"})
    model = _build_section(
        doc.get("model", {}), "model", violations,
        lambda kw: ModelConfig(**_with_tuples(kw)),
        set(_field_names(ModelConfig)))
    loss = _build_section(
        doc.get("loss", {}), "loss", violations,
        lambda kw: LossConfig(lambda_weight=float(kw.get("lambda", 1e-4))),
        _LOSS_KEYS)
    train = _build_section(
        doc.get("train", {}), "train", violations,
        lambda kw: TrainConfig(**_with_tuples({"seed": seed, **kw})),
        set(_field_names(TrainConfig)))

    if violations:
        raise RunConfigError(violations)
    return RunConfig(seed=seed, manifest_path=manifest_path, output_root=output_root,
                     profile=profile, model=model, loss=loss, train=train,
                     source_text=text)


def config_hash(config: RunConfig) -> str:
    """Stable short digest of the effective settings (not the raw text)."""
    canonical = yaml.safe_dump(config.effective(), sort_keys=True)
    return hashlib.sha1(canonical.encode()).hexdigest()[:10]


def create_run_dir(config: RunConfig, when: datetime | None = None) -> Path:
    """Make the run directory and record both config forms inside it."""
    stamp = (when or datetime.now()).strftime("%Y%m%d-%H%M%S")
    run_dir = config.output_root / f"{config_hash(config)}-{stamp}"
    suffix = 0
    while run_dir.exists():
        suffix += 1
        run_dir = config.output_root / f"{config_hash(config)}-{stamp}-{suffix}"
    run_dir.mkdir(parents=True)
    (run_dir / "config.yaml").write_text(config.source_text)
    with open(run_dir / "effective.yaml", "w") as fh:
        yaml.safe_dump(config.effective(), fh, sort_keys=False)
    return run_dir


def _field_names(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _with_tuples(kwargs: dict) -> dict:
    return {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
            for k, v in kwargs.items()}


def _build_profile(kwargs: dict, seed: int) -> PipelineProfile:
    kwargs = _with_tuples(dict(kwargs))
    kwargs.setdefault("rng_seed", seed)
    mode = kwargs.pop("mode", "aerial")
    if mode == "aerial":
        return aerial_profile(**kwargs)
    if mode == "cctv":
        return cctv_profile(**kwargs)
    raise ValueError(f"mode must be 'aerial' or 'cctv', got {mode!r}")


def _build_section(raw, name: str, violations: list[str], factory, allowed: set):
    if not isinstance(raw, dict):
        violations.append(f"{name}: must be a mapping, got {type(raw).__name__}")
        raw = {}
    bad_keys = sorted(set(raw) - allowed)
    for key in bad_keys:
        violations.append(f"{name}: unknown key '{key}'")
    clean = {k: v for k, v in raw.items() if k in allowed}
    try:
        return factory(clean)
    except (TypeError, ValueError) as exc:
        violations.append(f"{name}: {exc}")
        return factory({})
