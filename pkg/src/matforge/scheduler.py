"""DDIM scheduler math on numpy: beta/alpha-bar schedules, leading vs
trailing timestep spacing, prediction-type conversions, the deterministic
(eta = 0) update, and zero-latent single-step inference.

Everything here is pure: no state survives schedule construction, and the
same inputs always produce bit-identical outputs.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SchedulerError",
    "NoiseSchedule",
    "SpacingMode",
    "make_timesteps",
    "forward_noise",
    "convert_prediction",
    "ddim_step",
    "single_step_infer",
    "noise_mismatch_ratio",
]

PREDICTION_KINDS = ("epsilon", "v", "x0")


class SchedulerError(ValueError):
    """Raised for invalid schedules, spacings, or prediction conversions."""


@dataclass
class NoiseSchedule:
    """Discrete diffusion noise schedule.

    betas[t] is the per-step variance increment; alpha_bars[t] is the
    cumulative product of (1 - beta) up to and including t.  "scaled_linear"
    interpolates linearly in sqrt(beta) space, which is the published
    configuration of the base model family this mirrors.
    """

    t_train: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    kind: str = "scaled_linear"
    betas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.t_train < 1:
            raise SchedulerError(f"t_train must be >= 1, got {self.t_train}")
        if not (0.0 < self.beta_start < self.beta_end < 1.0):
            raise SchedulerError(
                f"need 0 < beta_start < beta_end < 1, got "
                f"[{self.beta_start}, {self.beta_end}]"
            )
        if self.kind == "linear":
            betas = np.linspace(self.beta_start, self.beta_end, self.t_train)
        elif self.kind == "scaled_linear":
            root = np.linspace(
                np.sqrt(self.beta_start), np.sqrt(self.beta_end), self.t_train
            )
            betas = root * root
        else:
            raise SchedulerError(f"unknown schedule kind {self.kind!r}")
        self.betas = betas
        self.alpha_bars = np.cumprod(1.0 - betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha at timestep t; t = -1 means the clean endpoint."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.t_train:
            raise SchedulerError(f"timestep {t} outside [0, {self.t_train - 1}]")
        return float(self.alpha_bars[t])


@dataclass(frozen=True)
class SpacingMode:
    """Timestep spacing policy: kind is "leading" or "trailing".

    steps_offset shifts leading timesteps upward and is meaningless (and
    rejected) for trailing, which always anchors at t_train - 1.
    """

    kind: str
    n_steps: int
    steps_offset: int = 0

    def __post_init__(self):
        if self.kind not in ("leading", "trailing"):
            raise SchedulerError(f"unknown spacing kind {self.kind!r}")
        if self.n_steps < 1:
            raise SchedulerError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.steps_offset < 0:
            raise SchedulerError(f"steps_offset must be >= 0, got {self.steps_offset}")
        if self.kind == "trailing" and self.steps_offset != 0:
            raise SchedulerError("steps_offset applies to leading spacing only")


def make_timesteps(t_train: int, spacing: SpacingMode) -> np.ndarray:
    """Inference timesteps, descending, as int64.

    leading:  t_i = (N-1-i) * floor(T/N) + steps_offset
    trailing: t_i = round(T - i * T/N) - 1, i.e. descending from T-1 in
              steps of T/N.  Trailing therefore always contains T-1.
    """
    n = spacing.n_steps
    if n > t_train:
        raise SchedulerError(f"n_steps {n} exceeds t_train {t_train}")
    if spacing.kind == "leading":
        stride = t_train // n
        ts = np.arange(n - 1, -1, -1, dtype=np.int64) * stride + spacing.steps_offset
    else:
        grid = t_train - np.arange(n, dtype=np.float64) * (t_train / n)
        ts = np.round(grid).astype(np.int64) - 1
    if ts[0] >= t_train or ts[-1] < 0:
        raise SchedulerError(
            f"timesteps {ts[0]}..{ts[-1]} leave [0, {t_train - 1}]; "
            f"check steps_offset"
        )
    return ts


def forward_noise(x0: np.ndarray, eps: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    a = schedule.alpha_bar(t)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def convert_prediction(
    model_out: np.ndarray,
    x_t: np.ndarray,
    t: int,
    kind: str,
    schedule: NoiseSchedule,
) -> tuple[np.ndarray, np.ndarray]:
    """Convert a model prediction into both (x0, epsilon) representations."""
    if kind not in PREDICTION_KINDS:
        raise SchedulerError(f"unknown prediction kind {kind!r}")
    if model_out.shape != x_t.shape:
        raise SchedulerError(
            f"prediction shape {model_out.shape} != latent shape {x_t.shape}"
        )
    a = schedule.alpha_bar(t)
    sa = np.sqrt(a)
    sb = np.sqrt(1.0 - a)
    if kind == "epsilon":
        if a < 1e-12:
            raise SchedulerError(
                f"alpha_bar({t}) = {a:.3e} too small to divide out an "
                f"epsilon prediction; the step is effectively pure noise"
            )
        eps = model_out
        x0 = (x_t - sb * eps) / sa
    elif kind == "v":
        x0 = sa * x_t - sb * model_out
        eps = sa * model_out + sb * x_t
    else:
        x0 = model_out
        # with zero noise level there is no epsilon to recover
        eps = (x_t - sa * x0) / sb if 1.0 - a >= 1e-12 else np.zeros_like(x0)
    return x0, eps


def ddim_step(
    x_t: np.ndarray,
    x0: np.ndarray,
    eps: np.ndarray,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Deterministic update to x_{t_prev}; t_prev = -1 lands on x0 exactly.

    With eta = 0 the target depends only on (x0, eps); x_t participates in
    shape validation so a mismatched triple fails loudly.
    """
    if not (x_t.shape == x0.shape == eps.shape):
        raise SchedulerError(
            f"shape mismatch: x_t {x_t.shape}, x0 {x0.shape}, eps {eps.shape}"
        )
    if t_prev < -1 or t_prev >= t:
        raise SchedulerError(f"t_prev {t_prev} must be -1 or < t = {t}")
    schedule.alpha_bar(t)  # range-check t
    a_prev = schedule.alpha_bar(t_prev)
    if t_prev == -1:
        return x0.copy()
    return np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps


def single_step_infer(
    model,
    conditioning: np.ndarray,
    schedule: NoiseSchedule,
    kind: str = "v",
    out_channels: int | None = None,
    spacing: SpacingMode | None = None,
) -> np.ndarray:
    """One-shot inference from a zero latent at the final timestep.

    Builds a zero image stack shaped like the conditioning (or with
    out_channels channels when the prediction is wider/narrower), hands the
    model the channel-concatenated (latent, conditioning) stack together
    with t = t_train - 1, and converts the single prediction to x0.  Only
    trailing spacing is valid here: leading spacing never reaches the final
    timestep, so a single leading step is ill-posed by construction.
    """
    if spacing is None:
        spacing = SpacingMode("trailing", 1)
    if spacing.kind != "trailing":
        raise SchedulerError("single-step inference requires trailing spacing")
    cond = np.asarray(conditioning, dtype=np.float64)
    if cond.ndim < 2:
        raise SchedulerError(f"conditioning must be an image stack, got ndim {cond.ndim}")
    shape = cond.shape if out_channels is None else cond.shape[:-1] + (out_channels,)
    latent = np.zeros(shape, dtype=np.float64)
    t = int(make_timesteps(schedule.t_train, spacing)[0])
    pred = np.asarray(model(np.concatenate([latent, cond], axis=-1), t), dtype=np.float64)
    if pred.shape != latent.shape:
        raise SchedulerError(
            f"model returned shape {pred.shape}, expected {latent.shape}"
        )
    x0, _ = convert_prediction(pred, latent, t, kind, schedule)
    return x0


def noise_mismatch_ratio(schedule: NoiseSchedule, steps_offset: int = 1) -> float:
    """How badly a single leading step mis-states the noise level.

    A single leading step asks the model to denoise at a tiny timestep
    (t = steps_offset) whose noise variance is 1 - abar_t, while the input
    it actually receives is pure noise with variance ~ 1 - abar_{T-1}.
    Returns the ratio of those variances; > 100 for the default schedule,
    which is the diagnostic callers assert on.
    """
    t_lead = int(make_timesteps(schedule.t_train, SpacingMode("leading", 1, steps_offset))[0])
    t_trail = schedule.t_train - 1
    return float(
        (1.0 - schedule.alpha_bar(t_trail)) / (1.0 - schedule.alpha_bar(t_lead))
    )
