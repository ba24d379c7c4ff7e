"""Training configuration: dataclasses, TOML round-trip, and presets.

One TOML file drives both stages. Defaults reproduce the full-scale
training recipe (grid sizes, schedules, learning rates, loss weights);
the ``toy`` preset shrinks everything to desk scale and wires oracle
providers so the whole pipeline runs in seconds without any external
model service.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .fields import LevelSchedule, ModelConfig
from .gridenc import GridConfig
from .guidance import NoiseSchedule
from .losses import ReferenceViewWeights, StageOneWeights, StageTwoWeights
from .renderer import CameraRanges

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - version shim
    import tomli as tomllib

PRESETS = ("text4d", "image4d", "toy")


@dataclass(frozen=True)
class StaticPhase:
    """One leg of the static-stage resolution schedule."""

    end_iter: int
    render_res: int
    batch: int


@dataclass(frozen=True)
class StaticStageConfig:
    iterations: int = 10000
    phases: tuple[StaticPhase, ...] = (
        StaticPhase(5000, 64, 8),
        StaticPhase(10000, 256, 4),
    )
    upsample_multiview: int = 256
    upsample_2d: int = 512
    weights: StageOneWeights = field(default_factory=StageOneWeights)
    noise: NoiseSchedule = field(
        default_factory=lambda: NoiseSchedule((0.02, 0.98), (0.02, 0.98), 10000)
    )
    samples_per_ray: int = 64
    independent_2d_camera: bool = False

    def __post_init__(self):
        if not self.phases:
            raise ConfigError("static schedule needs at least one phase")
        if self.phases[-1].end_iter < self.iterations:
            raise ConfigError("static phases must cover [0, iterations)")
        prev = 0
        for ph in self.phases:
            if ph.end_iter <= prev:
                raise ConfigError("static phase boundaries must increase")
            if ph.render_res < 1 or ph.batch < 1:
                raise ConfigError("phase resolution and batch must be >= 1")
            prev = ph.end_iter

    def phase_at(self, iteration: int) -> StaticPhase:
        for ph in self.phases:
            if iteration < ph.end_iter:
                return ph
        return self.phases[-1]


@dataclass(frozen=True)
class DynamicStageConfig:
    iterations: int = 10000
    render_size: tuple[int, int] = (144, 80)  # (width, height)
    upsample_size: tuple[int, int] = (576, 320)
    n_frames: int = 24
    batch: int = 1
    window_length: tuple[float, float] = (0.8, 1.0)
    noise: NoiseSchedule = field(
        default_factory=lambda: NoiseSchedule((0.99, 0.99), (0.2, 0.5), 10000)
    )
    level_schedule: LevelSchedule = field(default_factory=LevelSchedule)
    weights: StageTwoWeights = field(default_factory=StageTwoWeights)
    samples_per_ray: int = 64
    # march only inside this centered sphere when the object bound is known
    march_sphere_radius: float | None = None
    # midpoint sampling instead of stratified jitter (verification runs)
    stratified_jitter: bool = True

    def __post_init__(self):
        if self.n_frames < 2:
            raise ConfigError("dynamic stage needs at least 2 frames")
        lo, hi = self.window_length
        if not 0 < lo <= hi <= 1:
            raise ConfigError("window_length must satisfy 0 < min <= max <= 1")


@dataclass(frozen=True)
class OptimizerConfig:
    lr_mlp: float = 0.001
    lr_grid: float = 0.01
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 0.01
    eps: float = 1e-8
    clip_norm: float | None = 10.0

    def __post_init__(self):
        if self.lr_mlp <= 0 or self.lr_grid <= 0:
            raise ConfigError("learning rates must be > 0")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError("betas must lie in [0, 1)")


@dataclass(frozen=True)
class GuidanceScales:
    scale_2d: float = 100.0
    scale_multiview: float = 50.0
    scale_video: float = 100.0


@dataclass(frozen=True)
class ProviderSpec:
    """Provider wiring string per guidance role.

    Formats: ``echo``, ``gray:<value>[:<blend>]``, ``remote:<url>``.
    """

    provider_2d: str = "remote:http://127.0.0.1:8941"
    provider_multiview: str = "remote:http://127.0.0.1:8941"
    provider_video: str = "remote:http://127.0.0.1:8941"


@dataclass(frozen=True)
class TrainConfig:
    """Full two-stage hyperparameter record."""

    seed: int = 0
    prompt: str = ""
    dtype: str = "f32"
    model: ModelConfig = field(default_factory=ModelConfig)
    static: StaticStageConfig = field(default_factory=StaticStageConfig)
    dynamic: DynamicStageConfig = field(default_factory=DynamicStageConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    camera: CameraRanges = field(default_factory=CameraRanges)
    scales: GuidanceScales = field(default_factory=GuidanceScales)
    providers: ProviderSpec = field(default_factory=ProviderSpec)
    reference: ReferenceViewWeights = field(default_factory=ReferenceViewWeights)
    eval_samples_per_ray: int = 256

    def np_dtype(self):
        if self.dtype == "f32":
            return np.float32
        if self.dtype == "f64":
            return np.float64
        raise ConfigError(f"dtype must be 'f32' or 'f64', got {self.dtype!r}")


def config_hash(config: TrainConfig) -> str:
    """Stable digest over the canonical JSON form of the config."""
    blob = json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def toy_config(seed: int = 0) -> TrainConfig:
    """Desk-scale configuration with oracle providers and tiny grids."""
    model = ModelConfig(
        canonical_grid=GridConfig(
            input_dim=3, levels=8, base_res=8, max_res=128, table_size_log2=15
        ),
        deformation_grid=GridConfig(
            input_dim=4,
            levels=6,
            base_res=4,
            max_res=32,
            table_size_log2=13,
            domain_min=(-1.0, -1.0, -1.0, 0.0),
            domain_max=(1.0, 1.0, 1.0, 1.0),
        ),
    )
    return TrainConfig(
        seed=seed,
        prompt="toy scene",
        model=model,
        static=StaticStageConfig(
            iterations=2000,
            phases=(StaticPhase(2000, 32, 1),),
            upsample_multiview=32,
            upsample_2d=32,
            noise=NoiseSchedule((0.02, 0.98), (0.02, 0.98), 2000),
            samples_per_ray=16,
        ),
        dynamic=DynamicStageConfig(
            iterations=2000,
            render_size=(32, 32),
            upsample_size=(32, 32),
            n_frames=8,
            window_length=(1.0, 1.0),
            noise=NoiseSchedule((0.99, 0.99), (0.2, 0.5), 2000),
            level_schedule=LevelSchedule(initial_levels=2, step_every=250),
            weights=StageTwoWeights(lambda_tv=0.001, lambda_dec=0.1),
            samples_per_ray=32,
        ),
        providers=ProviderSpec("echo", "echo", "echo"),
    )


def preset_config(preset: str, seed: int = 0) -> TrainConfig:
    if preset == "text4d":
        return TrainConfig(seed=seed)
    if preset == "image4d":
        # Image-conditioned run: the 2D slot points at an image-conditioned
        # model and the reference view is supervised with rgb/mask terms.
        return TrainConfig(seed=seed)
    if preset == "toy":
        return toy_config(seed=seed)
    raise ConfigError(f"unknown preset {preset!r}; choose one of {PRESETS}")


# ---- TOML serialization ---------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, float):
        return repr(float(v))
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def emit_toml(config: TrainConfig, preset: str = "text4d") -> str:
    """Render a fully commented TOML file for ``config``."""
    c = config
    m = c.model
    lines = [
        f"# d4d two-stage training configuration (preset: {preset})",
        "# One file drives both stages; the dynamic stage records the static",
        "# stage's config hash inside its checkpoints for provenance.",
        "",
        "[run]",
        f"seed = {c.seed}",
        f"prompt = {_fmt(c.prompt)}",
        '# numeric precision: "f32" for training, "f64" for verification',
        f"dtype = {_fmt(c.dtype)}",
        "",
        "[model]",
        "# canonical 3D grid: levels span base_res -> max_res geometrically",
        f"canonical_levels = {m.canonical_grid.levels}",
        f"canonical_base_res = {m.canonical_grid.base_res}",
        f"canonical_max_res = {m.canonical_grid.max_res}",
        f"canonical_table_size_log2 = {m.canonical_grid.table_size_log2}",
        "# deformation 4D grid over (x, y, z, t)",
        f"deformation_levels = {m.deformation_grid.levels}",
        f"deformation_base_res = {m.deformation_grid.base_res}",
        f"deformation_max_res = {m.deformation_grid.max_res}",
        f"deformation_table_size_log2 = {m.deformation_grid.table_size_log2}",
        f"features_per_level = {m.canonical_grid.features_per_level}",
        "# head architectures (hidden layers x width)",
        f"hidden_width = {m.hidden_width}",
        f"density_hidden_layers = {m.density_hidden_layers}",
        f"color_hidden_layers = {m.color_hidden_layers}",
        f"deformation_hidden_layers = {m.deformation_hidden_layers}",
        f"background_hidden_layers = {m.background_hidden_layers}",
        f"geo_feature_dim = {m.geo_feature_dim}",
        "",
        "[static]",
        f"iterations = {c.static.iterations}",
        "# phases: [end_iter, render_res, batch]",
        "phases = ["
        + ", ".join(
            f"[{p.end_iter}, {p.render_res}, {p.batch}]" for p in c.static.phases
        )
        + "]",
        "# renders are upsampled to the guidance resolutions below",
        f"upsample_multiview = {c.static.upsample_multiview}",
        f"upsample_2d = {c.static.upsample_2d}",
        f"lambda_2d = {_fmt(c.static.weights.lambda_2d)}",
        f"lambda_3d = {_fmt(c.static.weights.lambda_3d)}",
        "# some prompts benefit from lambda_2d = 1.2 with lambda_3d = 1.0",
        f"noise_start = {_fmt(list(c.static.noise.t_range_start))}",
        f"noise_end = {_fmt(list(c.static.noise.t_range_end))}",
        f"samples_per_ray = {c.static.samples_per_ray}",
        "# reuse one of the four multi-view renders for the 2D term",
        f"independent_2d_camera = {_fmt(c.static.independent_2d_camera)}",
        "",
        "[dynamic]",
        f"iterations = {c.dynamic.iterations}",
        f"render_size = {_fmt(list(c.dynamic.render_size))}",
        f"upsample_size = {_fmt(list(c.dynamic.upsample_size))}",
        f"n_frames = {c.dynamic.n_frames}",
        f"batch = {c.dynamic.batch}",
        "# video window length is drawn uniformly from this range",
        f"window_length = {_fmt(list(c.dynamic.window_length))}",
        "# noise level range anneals linearly from noise_start to noise_end",
        f"noise_start = {_fmt(list(c.dynamic.noise.t_range_start))}",
        f"noise_end = {_fmt(list(c.dynamic.noise.t_range_end))}",
        f"level_initial = {c.dynamic.level_schedule.initial_levels}",
        f"level_step_every = {c.dynamic.level_schedule.step_every}",
        f"lambda_tv = {_fmt(c.dynamic.weights.lambda_tv)}",
        "# lambda_tv is calibrated to summed TV at this render_size",
        f"lambda_dec = {_fmt(c.dynamic.weights.lambda_dec)}",
        f"samples_per_ray = {c.dynamic.samples_per_ray}",
        "# 0 marches the whole scene box; > 0 marches only that sphere",
        f"march_sphere_radius = {_fmt(c.dynamic.march_sphere_radius or 0.0)}",
        f"stratified_jitter = {_fmt(c.dynamic.stratified_jitter)}",
        "",
        "[optimizer]",
        "# decoupled weight decay Adam; grids and MLPs use separate rates",
        f"lr_mlp = {_fmt(c.optimizer.lr_mlp)}",
        f"lr_grid = {_fmt(c.optimizer.lr_grid)}",
        f"betas = {_fmt(list(c.optimizer.betas))}",
        f"weight_decay = {_fmt(c.optimizer.weight_decay)}",
        f"eps = {_fmt(c.optimizer.eps)}",
        f"clip_norm = {_fmt(c.optimizer.clip_norm if c.optimizer.clip_norm is not None else 0.0)}",
        "",
        "[camera]",
        f"azimuth = {_fmt(list(c.camera.azimuth))}",
        f"elevation = {_fmt(list(c.camera.elevation))}",
        f"radius = {_fmt(list(c.camera.radius))}",
        f"fov_y = {_fmt(list(c.camera.fov_y))}",
        "",
        "[guidance]",
        f"scale_2d = {_fmt(c.scales.scale_2d)}",
        f"scale_multiview = {_fmt(c.scales.scale_multiview)}",
        f"scale_video = {_fmt(c.scales.scale_video)}",
        '# provider formats: "echo", "gray:<value>[:<blend>]", "remote:<url>"',
        f"provider_2d = {_fmt(c.providers.provider_2d)}",
        f"provider_multiview = {_fmt(c.providers.provider_multiview)}",
        f"provider_video = {_fmt(c.providers.provider_video)}",
        "",
        "[reference]",
        "# image-conditioned runs: reference-view supervision weights",
        f"rgb = {_fmt(c.reference.rgb)}",
        f"mask = {_fmt(c.reference.mask)}",
        "",
        "[eval]",
        f"samples_per_ray = {c.eval_samples_per_ray}",
        "",
    ]
    return "\n".join(lines)


def _pair(v, name: str) -> tuple:
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise ConfigError(f"{name} must be a 2-element array")
    return tuple(v)


def parse_toml(text: str) -> TrainConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    try:
        run = doc.get("run", {})
        md = doc.get("model", {})
        st = doc.get("static", {})
        dy = doc.get("dynamic", {})
        op = doc.get("optimizer", {})
        cam = doc.get("camera", {})
        gd = doc.get("guidance", {})
        ref = doc.get("reference", {})
        ev = doc.get("eval", {})
        base = TrainConfig()
        model = ModelConfig(
            canonical_grid=GridConfig(
                input_dim=3,
                levels=md.get("canonical_levels", 16),
                base_res=md.get("canonical_base_res", 16),
                max_res=md.get("canonical_max_res", 4096),
                features_per_level=md.get("features_per_level", 2),
                table_size_log2=md.get("canonical_table_size_log2", 19),
            ),
            deformation_grid=GridConfig(
                input_dim=4,
                levels=md.get("deformation_levels", 12),
                base_res=md.get("deformation_base_res", 4),
                max_res=md.get("deformation_max_res", 232),
                features_per_level=md.get("features_per_level", 2),
                table_size_log2=md.get("deformation_table_size_log2", 19),
                domain_min=(-1.0, -1.0, -1.0, 0.0),
                domain_max=(1.0, 1.0, 1.0, 1.0),
            ),
            density_hidden_layers=md.get("density_hidden_layers", 1),
            color_hidden_layers=md.get("color_hidden_layers", 1),
            deformation_hidden_layers=md.get("deformation_hidden_layers", 4),
            background_hidden_layers=md.get("background_hidden_layers", 3),
            hidden_width=md.get("hidden_width", 64),
            geo_feature_dim=md.get("geo_feature_dim", 15),
        )
        phases = tuple(
            StaticPhase(int(p[0]), int(p[1]), int(p[2]))
            for p in st.get("phases", [[5000, 64, 8], [10000, 256, 4]])
        )
        static = StaticStageConfig(
            iterations=st.get("iterations", 10000),
            phases=phases,
            upsample_multiview=st.get("upsample_multiview", 256),
            upsample_2d=st.get("upsample_2d", 512),
            weights=StageOneWeights(
                st.get("lambda_2d", 1.0), st.get("lambda_3d", 1.0)
            ),
            noise=NoiseSchedule(
                _pair(st.get("noise_start", [0.02, 0.98]), "static.noise_start"),
                _pair(st.get("noise_end", [0.02, 0.98]), "static.noise_end"),
                st.get("iterations", 10000),
            ),
            samples_per_ray=st.get("samples_per_ray", 64),
            independent_2d_camera=st.get("independent_2d_camera", False),
        )
        dynamic = DynamicStageConfig(
            iterations=dy.get("iterations", 10000),
            render_size=tuple(dy.get("render_size", [144, 80])),
            upsample_size=tuple(dy.get("upsample_size", [576, 320])),
            n_frames=dy.get("n_frames", 24),
            batch=dy.get("batch", 1),
            window_length=_pair(dy.get("window_length", [0.8, 1.0]), "dynamic.window_length"),
            noise=NoiseSchedule(
                _pair(dy.get("noise_start", [0.99, 0.99]), "dynamic.noise_start"),
                _pair(dy.get("noise_end", [0.2, 0.5]), "dynamic.noise_end"),
                dy.get("iterations", 10000),
            ),
            level_schedule=LevelSchedule(
                dy.get("level_initial", 4), dy.get("level_step_every", 500)
            ),
            weights=StageTwoWeights(
                dy.get("lambda_tv", 1000.0), dy.get("lambda_dec", 0.1)
            ),
            samples_per_ray=dy.get("samples_per_ray", 64),
            march_sphere_radius=(dy.get("march_sphere_radius", 0.0) or None),
            stratified_jitter=dy.get("stratified_jitter", True),
        )
        clip = op.get("clip_norm", 10.0)
        optimizer = OptimizerConfig(
            lr_mlp=op.get("lr_mlp", 0.001),
            lr_grid=op.get("lr_grid", 0.01),
            betas=_pair(op.get("betas", [0.9, 0.99]), "optimizer.betas"),
            weight_decay=op.get("weight_decay", 0.01),
            eps=op.get("eps", 1e-8),
            clip_norm=None if clip == 0 else float(clip),
        )
        camera = CameraRanges(
            azimuth=_pair(cam.get("azimuth", [0.0, 360.0]), "camera.azimuth"),
            elevation=_pair(cam.get("elevation", [-10.0, 45.0]), "camera.elevation"),
            radius=_pair(cam.get("radius", [1.5, 2.0]), "camera.radius"),
            fov_y=_pair(cam.get("fov_y", [40.0, 70.0]), "camera.fov_y"),
        )
        return TrainConfig(
            seed=run.get("seed", 0),
            prompt=run.get("prompt", ""),
            dtype=run.get("dtype", "f32"),
            model=model,
            static=static,
            dynamic=dynamic,
            optimizer=optimizer,
            camera=camera,
            scales=GuidanceScales(
                gd.get("scale_2d", 100.0),
                gd.get("scale_multiview", 50.0),
                gd.get("scale_video", 100.0),
            ),
            providers=ProviderSpec(
                gd.get("provider_2d", base.providers.provider_2d),
                gd.get("provider_multiview", base.providers.provider_multiview),
                gd.get("provider_video", base.providers.provider_video),
            ),
            reference=ReferenceViewWeights(
                ref.get("rgb", 1000.0), ref.get("mask", 100.0)
            ),
            eval_samples_per_ray=ev.get("samples_per_ray", 256),
        )
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_toml(fh.read())


def save_config(path, config: TrainConfig, preset: str = "text4d") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(emit_toml(config, preset))


def with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seed=seed)
