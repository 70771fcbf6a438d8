"""End-to-end augmentation run: plan, edit and filter every image of a dataset."""
from __future__ import annotations

import dataclasses
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import alignment, ddim
from .affinity import (
    AffinityMatrix,
    affinity_threshold,
    build_affinity_matrix,
    embed_categories,
)
from .backends import build_backend
from .dataset_io import (
    CategorySet,
    DetectionSample,
    OutputEntry,
    load_dataset,
    load_document,
    read_image,
    write_dataset,
)
from .errors import BackendError, ConfigError, DegenerateMaskError, ValidationError
from .instance_filter import LabelMap, crop_object, filter_instance
from .strategy import AugmentationPlan, StrategyConfig, image_seed, plan_image

log = logging.getLogger(__name__)

REPORT_VERSION = 1
BACKEND_ROLES = ("embedder", "denoiser", "codec", "classifier", "image_embedder")
_RETRY_RE = re.compile(r"^retry\((\d+)\)$")


@dataclass
class PipelineConfig:
    alpha: float = 0.35
    theta_top_fraction: float = 0.03
    self_downweight: float = 0.5
    guidance_w: float = 7.5
    steps_T: int = 50
    filter_k: int = 3
    seed: int = 0
    mix_ratio: float = 0.0
    use_affinity_matrix: bool = True
    use_alignment: bool = True
    use_filter: bool = True
    reject_policy: str = "keep_original"
    prompt_brackets: bool = True
    inversion_time_convention: str = ddim.CONVENTION_CURRENT
    schedule_kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    train_steps: int = 1000
    backend_retries: int = 2
    label_map: str | None = None
    record_timings: bool = False
    workers: int = 1
    backends: dict = field(default_factory=dict)

    # execution-only settings, left out of the report echo
    _NOT_ECHOED = ("workers",)

    def __post_init__(self):
        self.validate()

    def validate(self):
        def frac(name, lo_open=True, hi_open=False, lo=0.0, hi=1.0):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ConfigError(f"{name} must be a number, got {v!r}")
            ok_lo = v > lo if lo_open else v >= lo
            ok_hi = v < hi if hi_open else v <= hi
            if not (ok_lo and ok_hi):
                raise ConfigError(f"{name}={v} out of range")

        frac("alpha", hi_open=True)
        frac("theta_top_fraction")
        frac("self_downweight")
        frac("mix_ratio", lo_open=False)
        for name in ("steps_T", "filter_k", "seed", "backend_retries", "workers", "train_steps"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
        if self.steps_T < 1:
            raise ConfigError("steps_T must be >= 1")
        if self.filter_k < 1:
            raise ConfigError("filter_k must be >= 1")
        if self.workers < 1 or self.backend_retries < 0:
            raise ConfigError("workers must be >= 1 and backend_retries >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        for name in ("use_affinity_matrix", "use_alignment", "use_filter", "prompt_brackets", "record_timings"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(f"{name} must be a boolean")
        if not isinstance(self.guidance_w, (int, float)) or isinstance(self.guidance_w, bool):
            raise ConfigError("guidance_w must be a number")
        self.reject_retries  # parses reject_policy
        if self.inversion_time_convention not in (ddim.CONVENTION_CURRENT, ddim.CONVENTION_PREVIOUS):
            raise ConfigError(f"unknown inversion_time_convention {self.inversion_time_convention!r}")
        if self.schedule_kind not in ddim.SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule_kind {self.schedule_kind!r}")
        if not isinstance(self.backends, dict):
            raise ConfigError("backends must be a mapping")
        for role, spec in self.backends.items():
            if role not in BACKEND_ROLES:
                raise ConfigError(f"unknown backend role {role!r}; expected {BACKEND_ROLES}")
            if not isinstance(spec, dict) or spec.get("kind", "stub") not in ("stub", "file", "remote"):
                raise ConfigError(f"backend {role!r} needs kind stub | file | remote")

    @property
    def reject_retries(self) -> int:
        """Extra regeneration attempts implied by ``reject_policy``."""
        if self.reject_policy in ("keep_original", "drop"):
            return 0
        m = _RETRY_RE.match(str(self.reject_policy))
        if not m:
            raise ConfigError(
                f"reject_policy must be keep_original, drop or retry(n); got {self.reject_policy!r}"
            )
        return int(m.group(1))

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (ValueError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        return cls.from_dict(data or {})

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        for k in self._NOT_ECHOED:
            d.pop(k, None)
        return d

    @property
    def augmentation_enabled(self) -> bool:
        # all three components off is the un-augmented baseline
        return self.use_affinity_matrix or self.use_alignment or self.use_filter


@dataclass
class ImageRecord:
    image_id: Any
    status: str  # augmented | passthrough | rejected | dropped | skipped | error
    plan: AugmentationPlan | None = None
    skip_reason: str | None = None
    filter: dict | None = None
    attempts: int = 0
    error: str | None = None
    timings: dict | None = None

    def to_dict(self) -> dict:
        d = {
            "image_id": self.image_id,
            "status": self.status,
            "plan": self.plan.to_dict() if self.plan else None,
            "skip_reason": self.skip_reason,
            "filter": self.filter,
            "attempts": self.attempts,
            "error": self.error,
        }
        if self.timings is not None:
            d["timings"] = self.timings
        return d


@dataclass
class RunReport:
    config: dict
    records: list[ImageRecord]
    mean_similarity: float | None = None
    theta: float | None = None
    aborted: str | None = None

    @property
    def aggregates(self) -> dict:
        aug = [r for r in self.records if r.status == "augmented"]
        return {
            "images": len(self.records),
            "augmented": len(aug),
            "regenerated": sum(1 for r in aug if r.plan.is_regeneration),
            "rejected": sum(1 for r in self.records if r.filter and not r.filter["accepted"]),
            "skipped": sum(1 for r in self.records if r.status == "skipped"),
            "passthrough": sum(1 for r in self.records if r.status == "passthrough"),
            "errors": sum(1 for r in self.records if r.error),
            "mean_cosine_similarity": self.mean_similarity,
        }

    def to_dict(self) -> dict:
        d = {
            "version": REPORT_VERSION,
            "config": self.config,
            "theta": self.theta,
            "per_image": [r.to_dict() for r in self.records],
            "aggregates": self.aggregates,
        }
        if self.aborted:
            d["aborted"] = self.aborted
        return d

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        agg = self.aggregates
        rows = [(k, "n/a" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v)))
                for k, v in agg.items()]
        width = max(len(k) for k, _ in rows)
        lines = [f"{'metric':<{width}}  value", f"{'-' * width}  -----"]
        lines += [f"{k:<{width}}  {v}" for k, v in rows]
        return "\n".join(lines)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        # an all-black image embeds to zero; count it as unrelated rather than abort the run
        return 0.0
    return float(a @ b / (na * nb))


def diversity_report(original_images: Sequence, augmented_images: Sequence, embedder) -> float | None:
    """Mean cosine similarity between paired original/augmented image embeddings.

    Lower means the augmented set drifts further from the originals. Returns
    ``None`` for empty input.
    """
    if len(original_images) != len(augmented_images):
        raise ValidationError(
            f"{len(original_images)} originals vs {len(augmented_images)} augmented images"
        )
    if not original_images:
        return None
    try:
        e_orig = embedder.embed_images(list(original_images))
        e_aug = embedder.embed_images(list(augmented_images))
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"image embedder failed: {exc}", backend="image_embedder") from exc
    return float(np.mean([cosine(a, b) for a, b in zip(e_orig, e_aug)]))


@dataclass
class Backends:
    embedder: Any
    denoiser: Any
    codec: Any
    classifier: Any
    image_embedder: Any

    @classmethod
    def from_config(cls, config: PipelineConfig, categories: Sequence[str]) -> "Backends":
        return cls(**{
            role: build_backend(role, config.backends.get(role, {"kind": "stub"}), categories=categories)
            for role in BACKEND_ROLES
        })


@dataclass
class Prepared:
    """State shared read-only by all per-image workers."""

    config: PipelineConfig
    categories: CategorySet
    affinity: AffinityMatrix | None
    theta: float | None
    strategy: StrategyConfig
    schedule: ddim.NoiseSchedule
    label_map: LabelMap | None


def build_affinity(categories: CategorySet, embedder) -> AffinityMatrix | None:
    """Affinity matrix over the categories the embedder knows about."""
    names = list(categories.names)
    if hasattr(embedder, "__contains__"):
        missing = [n for n in names if n not in embedder]
        if missing:
            log.warning("no embedding for categories %s; their objects will not be edited", missing)
        names = [n for n in names if n in embedder]
    if not names:
        return None
    return build_affinity_matrix(embed_categories(names, embedder))


def prepare(config: PipelineConfig, categories: CategorySet, backends: Backends) -> Prepared:
    A = theta = None
    if config.use_affinity_matrix:
        A = build_affinity(categories, backends.embedder)
        if A is not None and len(A) >= 2:
            theta = affinity_threshold(A, config.theta_top_fraction)
        else:
            theta = float("inf")  # a single category can only be regenerated
    strategy = StrategyConfig(
        alpha=config.alpha,
        theta=theta if theta is not None else 1.0,
        beta=config.self_downweight,
        use_affinity_matrix=config.use_affinity_matrix,
        prompt_brackets=config.prompt_brackets,
    )
    schedule = ddim.make_schedule(
        config.steps_T,
        config.schedule_kind,
        beta_start=config.beta_start,
        beta_end=config.beta_end,
        train_steps=config.train_steps,
    )
    label_map = LabelMap.from_file(config.label_map, categories.names) if config.label_map else None
    return Prepared(config, categories, A, theta, strategy, schedule, label_map)


def make_plan(sample: DetectionSample, prep: Prepared, attempt: int = 0):
    """Plan for one image, or ``(None, reason)`` when the image is passed through."""
    seed = image_seed(prep.config.seed, sample.image_id)
    rng = np.random.default_rng(seed)
    if rng.random() < prep.config.mix_ratio:
        return None, "mix_real"
    if not prep.config.augmentation_enabled:
        return None, "augmentation_disabled"
    if not sample.objects:
        return None, "no_objects"
    if attempt:
        seed = (seed + attempt) & 0xFFFF_FFFF_FFFF_FFFF
        rng = np.random.default_rng(seed)
    plan = plan_image(sample, prep.affinity, prep.strategy, rng, seed, prep.categories.names)
    if plan is None:
        return None, "no_eligible_objects"
    return plan, None


def edit_sample(sample: DetectionSample, plan: AugmentationPlan, prep: Prepared, backends: Backends):
    """Run the masked edit loop for one plan; returns the edited uint8 image."""
    obj = next(o for o in sample.objects if o.annotation_id == plan.annotation_id)
    z0, factor = alignment.encode_image(sample.image, backends.codec)
    mask = alignment.bbox_to_latent_mask(obj.bbox, (sample.height, sample.width), z0.shape[-2:])
    z_edit = alignment.edit_latent(
        z0,
        plan.prompt,
        mask,
        backends.denoiser,
        prep.schedule,
        prep.config.guidance_w,
        align=prep.config.use_alignment,
        convention=prep.config.inversion_time_convention,
    )
    return alignment.decode_latent(z_edit, backends.codec)


def process_sample(sample: DetectionSample, prep: Prepared, backends: Backends):
    """Plan, edit and filter one image. Returns ``(record, output entry or None)``."""
    cfg = prep.config
    t_start = time.perf_counter()
    timings = {} if cfg.record_timings else None
    plan, reason = make_plan(sample, prep)
    if plan is None:
        status = "passthrough" if reason in ("mix_real", "augmentation_disabled") else "skipped"
        return ImageRecord(sample.image_id, status, skip_reason=reason), OutputEntry(sample)

    attempts = 0
    decision = None
    last_error = None
    for regen in range(cfg.reject_retries + 1):
        if regen:
            plan, reason = make_plan(sample, prep, attempt=regen)
            if plan is None:
                break
        edited = None
        for _ in range(cfg.backend_retries + 1):
            attempts += 1
            try:
                edited = edit_sample(sample, plan, prep, backends)
                decision = None
                if cfg.use_filter:
                    obj = next(o for o in sample.objects if o.annotation_id == plan.annotation_id)
                    decision = filter_instance(
                        crop_object(edited, obj.bbox),
                        plan.target_category,
                        backends.classifier,
                        prep.label_map,
                        cfg.filter_k,
                    )
                last_error = None
                break
            except DegenerateMaskError as exc:
                return (
                    ImageRecord(sample.image_id, "skipped", plan=plan, skip_reason="degenerate_mask",
                                attempts=attempts, error=str(exc)),
                    OutputEntry(sample),
                )
            except BackendError as exc:
                log.warning("image %r: backend error (attempt %d): %s", sample.image_id, attempts, exc)
                last_error = str(exc)
                edited = None
        if timings is not None:
            timings["total_s"] = time.perf_counter() - t_start
        if last_error is not None:
            break
        if decision is None or decision.accepted:
            return (
                ImageRecord(sample.image_id, "augmented", plan=plan,
                            filter=decision.to_dict() if decision else None,
                            attempts=attempts, timings=timings),
                OutputEntry(sample, plan, edited),
            )
        log.info("image %r: rejected by filter: %s", sample.image_id, decision.reason)

    if timings is not None:
        timings["total_s"] = time.perf_counter() - t_start
    drop = cfg.reject_policy == "drop"
    record = ImageRecord(
        sample.image_id,
        "dropped" if drop else "rejected",
        plan=plan,
        skip_reason=reason if plan is None else None,
        filter=decision.to_dict() if decision else None,
        attempts=attempts,
        error=last_error,
        timings=timings,
    )
    return record, (None if drop else OutputEntry(sample))


def _load_original(sample: DetectionSample) -> np.ndarray:
    if sample.image is not None:
        return sample.image
    return read_image(sample.source_path)


def run_pipeline(
    config: PipelineConfig,
    annotation_file,
    image_root,
    out_dir,
    *,
    backends: Backends | None = None,
    echo_stdout: bool = False,
) -> tuple[Path, RunReport]:
    """Augment a COCO dataset and write ``annotations.json``, images and ``report.json``.

    Each input image yields at most one output image: its edited version when
    accepted, the original when skipped, mixed out or rejected under
    ``keep_original``, nothing when rejected under ``drop``.
    """
    out_dir = Path(out_dir)
    categories, stream = load_dataset(annotation_file, image_root)
    samples = list(stream)
    top_level = load_document(annotation_file)
    backends = backends or Backends.from_config(config, categories.names)

    report = RunReport(config=config.echo(), records=[])
    try:
        prep = prepare(config, categories, backends)
    except BackendError as exc:
        report.aborted = str(exc)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
        raise
    report.theta = prep.theta if prep.theta is None or np.isfinite(prep.theta) else None

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(lambda s: process_sample(s, prep, backends), samples))
    else:
        results = [process_sample(s, prep, backends) for s in samples]

    report.records = [r for r, _ in results]
    entries = [e for _, e in results if e is not None]
    path = write_dataset(entries, categories, out_dir, top_level=top_level)

    pairs = [(e.sample, e.image) for e in entries if e.plan is not None]
    report.mean_similarity = diversity_report(
        [_load_original(s) for s, _ in pairs], [im for _, im in pairs], backends.image_embedder
    )
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    if echo_stdout:
        print(report.summary())
    return path, report


def plan_dataset(config: PipelineConfig, annotation_file, backends: Backends | None = None) -> dict:
    """Dry run: plans for every image without any denoiser, codec or classifier call."""
    categories, stream = load_dataset(annotation_file, load_images=False)
    backends = backends or Backends.from_config(config, categories.names)
    prep = prepare(config, categories, backends)
    plans = []
    for sample in stream:
        plan, reason = make_plan(sample, prep)
        plans.append({"image_id": sample.image_id,
                      "plan": plan.to_dict() if plan else None,
                      "skip_reason": reason})
    return _jsonable({"version": REPORT_VERSION, "config": config.echo(),
                      "theta": prep.theta if prep.theta is None or np.isfinite(prep.theta) else None,
                      "plans": plans})


def recompute_diversity(original_annotations, original_images, augmented_dir, image_embedder) -> dict:
    """Recompute the mean original/augmented similarity from a finished run."""
    _, orig = load_dataset(original_annotations, original_images, load_images=False)
    by_id = {s.image_id: s for s in orig}
    augmented_dir = Path(augmented_dir)
    _, out = load_dataset(augmented_dir / "annotations.json", augmented_dir / "images", load_images=False)
    originals, augmented = [], []
    for s in out:
        if not s.file_name.endswith("_aug.png") or s.image_id not in by_id:
            continue
        originals.append(read_image(by_id[s.image_id].source_path))
        augmented.append(read_image(s.source_path))
    return {"pairs": len(originals),
            "mean_cosine_similarity": diversity_report(originals, augmented, image_embedder)}
