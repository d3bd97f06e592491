"""Forecast models and feature construction.

Four input representations share the same glucose channel and differ in how
medication enters: not at all (univariate), as raw sparse spikes, as a
running within-window cumulative sum, or as pharmacokinetic concentration
curves. Models are small numpy networks with hand-written backward passes;
gradients with respect to the concentration channels are exposed so the
encoder's absorption constants can be trained end to end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import WindowSample
from .encoder import PkParams, encode_record

FEATURE_MODES = ("univariate", "sparse_exogenous", "sum_total", "pharmacokinetic")
ARCHITECTURES = ("persistence", "ses", "mlp", "nhits")

_CHANNEL_NAMES = {
    "univariate": ("glucose",),
    "sparse_exogenous": ("glucose", "cho", "bolus", "basal"),
    "sum_total": ("glucose", "cho", "bolus_cum", "basal_cum"),
    "pharmacokinetic": ("glucose", "cho", "c_bolus", "c_basal"),
}


@dataclass
class FeatureConfig:
    mode: str
    include_statics: bool = False

    def __post_init__(self):
        if self.mode not in FEATURE_MODES:
            raise ValueError(f"unknown feature mode {self.mode!r}; expected one of {FEATURE_MODES}")

    @property
    def channel_names(self) -> tuple[str, ...]:
        return _CHANNEL_NAMES[self.mode]

    @property
    def n_channels(self) -> int:
        return len(self.channel_names)


@dataclass
class FeatureTensor:
    """Per-window model input: raw-unit channels of length L plus statics.

    For pharmacokinetic features, dc_bolus_dk / dc_basal_dk hold the
    encoder's partials so channel gradients can be chained into k.
    """

    channels: np.ndarray
    channel_names: tuple[str, ...]
    statics: np.ndarray | None
    patient_id: str
    dc_bolus_dk: np.ndarray | None = None
    dc_basal_dk: np.ndarray | None = None


def featurize(window: WindowSample, config: FeatureConfig, pk: PkParams | None = None) -> FeatureTensor:
    """Build the model input for one window under the configured mode."""
    glucose = window.glucose_hist
    statics = window.record.statics.vector() if config.include_statics else None
    dc_bolus = dc_basal = None

    if config.mode == "univariate":
        channels = glucose[None, :].astype(float)
    elif config.mode == "sparse_exogenous":
        channels = np.stack([glucose, window.cho_hist, window.bolus_hist, window.basal_hist])
    elif config.mode == "sum_total":
        channels = np.stack(
            [glucose, window.cho_hist, np.cumsum(window.bolus_hist), np.cumsum(window.basal_hist)]
        )
    else:  # pharmacokinetic
        if pk is None:
            raise ValueError("pharmacokinetic mode requires a PkParams table")
        c_bolus, c_basal = encode_record(window.record, pk, window)
        channels = np.stack([glucose, window.cho_hist, c_bolus.values, c_basal.values])
        dc_bolus, dc_basal = c_bolus.grad_k, c_basal.grad_k

    return FeatureTensor(
        channels=channels,
        channel_names=config.channel_names,
        statics=statics,
        patient_id=window.record.patient_id,
        dc_bolus_dk=dc_bolus,
        dc_basal_dk=dc_basal,
    )


@dataclass
class Normalization:
    """Per-channel affine input scaling.

    The glucose channel (index 0) is standardized; event-like channels
    (CHO and every dose representation) are scaled only, so zero keeps
    meaning "nothing administered". Targets share the glucose constants.
    """

    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.shift = np.asarray(self.shift, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")

    def apply(self, channels: np.ndarray) -> np.ndarray:
        return (channels - self.shift[:, None]) / self.scale[:, None]

    def normalize_target(self, y: np.ndarray) -> np.ndarray:
        return (y - self.shift[0]) / self.scale[0]

    def denormalize_target(self, yhat: np.ndarray) -> np.ndarray:
        return yhat * self.scale[0] + self.shift[0]

    def to_dict(self) -> dict:
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(np.asarray(d["shift"]), np.asarray(d["scale"]))


def compute_normalization(
    windows: list[WindowSample],
    config: FeatureConfig,
    pk: PkParams | None = None,
    max_windows: int = 512,
) -> Normalization:
    """Channel statistics from a deterministic, evenly spaced window sample."""
    if not windows:
        raise ValueError("cannot compute normalization from zero windows")
    take = np.unique(np.linspace(0, len(windows) - 1, min(len(windows), max_windows)).astype(int))
    stacked = np.stack([featurize(windows[i], config, pk).channels for i in take])  # (W, C, L)
    n_channels = stacked.shape[1]
    shift = np.zeros(n_channels)
    scale = np.ones(n_channels)
    shift[0] = stacked[:, 0, :].mean()
    for c in range(n_channels):
        sd = float(stacked[:, c, :].std())
        if sd > 0:
            scale[c] = sd
    return Normalization(shift=shift, scale=scale)


def _glorot(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


class _DenseStack:
    """ReLU hidden layers plus a linear head, with explicit backward."""

    def __init__(self, in_dim: int, hidden: tuple[int, ...], out_dim: int, rng: np.random.Generator):
        sizes = [in_dim, *hidden, out_dim]
        self.weights = [_glorot(rng, sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
        self.biases = [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)]
        self.n_hidden = len(hidden)

    def parameter_arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def forward(self, x: np.ndarray, dropout: float, train: bool, rng) -> tuple[np.ndarray, dict]:
        acts = [x]
        relu_masks = []
        drop_masks = []
        a = x
        for i in range(self.n_hidden):
            z = self.weights[i] @ a + self.biases[i]
            relu = z > 0
            a = z * relu
            if train and dropout > 0.0:
                if rng is None:
                    raise ValueError("dropout requires an rng in training mode")
                keep = (rng.random(a.shape) >= dropout) / (1.0 - dropout)
                a = a * keep
                drop_masks.append(keep)
            else:
                drop_masks.append(None)
            relu_masks.append(relu)
            acts.append(a)
        out = self.weights[-1] @ a + self.biases[-1]
        return out, {"acts": acts, "relu": relu_masks, "drop": drop_masks}

    def backward(self, g_out: np.ndarray, cache: dict) -> tuple[list[np.ndarray], np.ndarray]:
        acts = cache["acts"]
        grads: list[np.ndarray] = [None] * (2 * (self.n_hidden + 1))
        g = g_out
        grads[2 * self.n_hidden] = np.outer(g, acts[-1])
        grads[2 * self.n_hidden + 1] = g.copy()
        g = self.weights[-1].T @ g
        for i in range(self.n_hidden - 1, -1, -1):
            if cache["drop"][i] is not None:
                g = g * cache["drop"][i]
            g = g * cache["relu"][i]
            grads[2 * i] = np.outer(g, acts[i])
            grads[2 * i + 1] = g.copy()
            g = self.weights[i].T @ g
        return grads, g


def interpolation_matrix(n_out: int, n_coeff: int) -> np.ndarray:
    """Linear-interpolation operator lifting n_coeff knots to n_out points.

    Identity when n_coeff == n_out; a column of ones when n_coeff == 1.
    """
    if n_coeff < 1:
        raise ValueError(f"basis_dim must be >= 1, got {n_coeff}")
    if n_coeff == 1:
        return np.ones((n_out, 1))
    pos = np.linspace(0.0, n_coeff - 1.0, n_out)
    lo = np.minimum(np.floor(pos).astype(int), n_coeff - 2)
    frac = pos - lo
    M = np.zeros((n_out, n_coeff))
    rows = np.arange(n_out)
    M[rows, lo] = 1.0 - frac
    M[rows, lo + 1] += frac
    return M


def _maxpool(x: np.ndarray, kernel: int) -> tuple[np.ndarray, np.ndarray]:
    """Max-pool with truncation; returns (pooled, argmax flat indices)."""
    p = len(x) // kernel
    view = x[: p * kernel].reshape(p, kernel)
    arg = view.argmax(axis=1)
    pooled = view[np.arange(p), arg]
    return pooled, np.arange(p) * kernel + arg


def _maxpool_backward(g_pooled: np.ndarray, argmax: np.ndarray, length: int) -> np.ndarray:
    out = np.zeros(length)
    np.add.at(out, argmax, g_pooled)
    return out


class ForecastModel:
    """Base interface: forward records a tape, backward consumes it."""

    architecture = "base"

    def __init__(self, L: int, H: int, n_channels: int, statics_dim: int, norm: Normalization, hyper: dict):
        self.L = L
        self.H = H
        self.n_channels = n_channels
        self.statics_dim = statics_dim
        self.norm = norm
        self.hyper = dict(hyper)
        self._cache = None

    # -- parameter plumbing -------------------------------------------------

    def parameter_arrays(self) -> list[np.ndarray]:
        return []

    def param_vector(self) -> np.ndarray:
        arrays = self.parameter_arrays()
        if not arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in arrays])

    def set_param_vector(self, flat: np.ndarray) -> None:
        arrays = self.parameter_arrays()
        expected = sum(a.size for a in arrays)
        if flat.size != expected:
            raise ValueError(f"parameter vector has {flat.size} entries, expected {expected}")
        offset = 0
        for a in arrays:
            a[...] = flat[offset : offset + a.size].reshape(a.shape)
            offset += a.size

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.parameter_arrays())

    # -- forward / backward -------------------------------------------------

    def _check_shapes(self, ft: FeatureTensor) -> None:
        if ft.channels.shape != (self.n_channels, self.L):
            raise ValueError(
                f"feature shape {ft.channels.shape} does not match model "
                f"({self.n_channels}, {self.L})"
            )
        got = 0 if ft.statics is None else len(ft.statics)
        if got != self.statics_dim:
            raise ValueError(f"statics dim {got} does not match model {self.statics_dim}")

    def forward(self, ft: FeatureTensor, train: bool = False, rng=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_output: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of the recorded forward pass.

        Returns (grad wrt the flat parameter vector, grad wrt the raw
        feature channels).
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        return self._backward(np.asarray(grad_output, dtype=float))

    def _backward(self, g_out: np.ndarray):
        raise NotImplementedError

    def predict(self, ft: FeatureTensor) -> np.ndarray:
        """Forecast in mg/dL with training-time stochasticity disabled."""
        return self.norm.denormalize_target(self.forward(ft, train=False))

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "L": self.L,
            "H": self.H,
            "n_channels": self.n_channels,
            "statics_dim": self.statics_dim,
            "hyper": self.hyper,
            "norm": self.norm.to_dict(),
            "params": self.param_vector().tolist(),
        }


class Persistence(ForecastModel):
    """Repeats the last observed glucose value across the horizon."""

    architecture = "persistence"

    def forward(self, ft, train=False, rng=None):
        self._check_shapes(ft)
        x = self.norm.apply(ft.channels)
        self._cache = {}
        return np.full(self.H, x[0, -1])

    def _backward(self, g_out):
        g_channels = np.zeros((self.n_channels, self.L))
        g_channels[0, -1] = g_out.sum() / self.norm.scale[0]
        return np.zeros(0), g_channels


class SimpleExponentialSmoothing(ForecastModel):
    """Exponentially smoothed level of the glucose history, held flat."""

    architecture = "ses"

    def forward(self, ft, train=False, rng=None):
        self._check_shapes(ft)
        x = self.norm.apply(ft.channels)[0]
        alpha = self.hyper.get("alpha", 0.3)
        level = x[0]
        for t in range(1, self.L):
            level = alpha * x[t] + (1.0 - alpha) * level
        self._cache = {"alpha": alpha}
        return np.full(self.H, level)

    def _backward(self, g_out):
        alpha = self._cache["alpha"]
        # level = sum_t w_t x_t with w_0 = (1-a)^(L-1), w_t = a (1-a)^(L-1-t)
        exps = np.arange(self.L - 1, -1, -1, dtype=float)
        w = alpha * (1.0 - alpha) ** exps
        w[0] = (1.0 - alpha) ** (self.L - 1)
        g_channels = np.zeros((self.n_channels, self.L))
        g_channels[0] = g_out.sum() * w / self.norm.scale[0]
        return np.zeros(0), g_channels


class MLP(ForecastModel):
    """Flattened channels plus statics through fully-connected layers."""

    architecture = "mlp"

    def __init__(self, L, H, n_channels, statics_dim, norm, hyper, rng):
        super().__init__(L, H, n_channels, statics_dim, norm, hyper)
        hidden = tuple(hyper.get("hidden", (64, 64)))
        self.core = _DenseStack(n_channels * L + statics_dim, hidden, H, rng)

    def parameter_arrays(self):
        return self.core.parameter_arrays()

    def forward(self, ft, train=False, rng=None):
        self._check_shapes(ft)
        x = self.norm.apply(ft.channels).ravel()
        if ft.statics is not None:
            x = np.concatenate([x, ft.statics])
        out, cache = self.core.forward(x, self.hyper.get("dropout", 0.0), train, rng)
        self._cache = cache
        return out

    def _backward(self, g_out):
        grads, g_x = self.core.backward(g_out, self._cache)
        g_flat = np.concatenate([g.ravel() for g in grads])
        g_channels = g_x[: self.n_channels * self.L].reshape(self.n_channels, self.L)
        g_channels = g_channels / self.norm.scale[:, None]
        return g_flat, g_channels


class NhitsBlock:
    """One pooling/interpolation block.

    Max-pools its input (and any exogenous channels) by ``pooling_kernel``,
    maps through a small dense core to backcast and forecast coefficients,
    and lifts those to full length by linear interpolation. Stacked blocks
    chain through backcast residuals: the next block sees
    input - backcast, and the model forecast is the sum of block forecasts.
    """

    def __init__(
        self,
        L: int,
        H: int,
        pooling_kernel: int,
        backcast_basis: int,
        forecast_basis: int,
        hidden: tuple[int, ...],
        n_exog: int,
        statics_dim: int,
        rng: np.random.Generator,
    ):
        if backcast_basis < 1 or forecast_basis < 1:
            raise ValueError("basis_dim must be >= 1")
        if pooling_kernel < 1 or pooling_kernel > L:
            raise ValueError(f"pooling_kernel must be in [1, L], got {pooling_kernel}")
        self.L, self.H = L, H
        self.kernel = pooling_kernel
        self.pooled_len = L // pooling_kernel
        self.n_exog = n_exog
        self.statics_dim = statics_dim
        self.backcast_basis = backcast_basis
        in_dim = self.pooled_len * (1 + n_exog) + statics_dim
        self.core = _DenseStack(in_dim, hidden, backcast_basis + forecast_basis, rng)
        self.interp_back = interpolation_matrix(L, backcast_basis)
        self.interp_fore = interpolation_matrix(H, forecast_basis)

    def parameter_arrays(self):
        return self.core.parameter_arrays()

    def forward(
        self,
        r: np.ndarray,
        exog: np.ndarray | None = None,
        statics: np.ndarray | None = None,
        dropout: float = 0.0,
        train: bool = False,
        rng=None,
    ) -> tuple[np.ndarray, np.ndarray]:
        pooled_r, arg_r = _maxpool(r, self.kernel)
        parts = [pooled_r]
        args_e = []
        if self.n_exog:
            for row in exog:
                pooled_e, arg_e = _maxpool(row, self.kernel)
                parts.append(pooled_e)
                args_e.append(arg_e)
        if self.statics_dim:
            parts.append(statics)
        u = np.concatenate(parts)
        out, core_cache = self.core.forward(u, dropout, train, rng)
        theta_b = out[: self.backcast_basis]
        theta_f = out[self.backcast_basis :]
        backcast = self.interp_back @ theta_b
        forecast = self.interp_fore @ theta_f
        self._cache = {"core": core_cache, "arg_r": arg_r, "args_e": args_e}
        return backcast, forecast

    def backward(
        self, g_backcast: np.ndarray, g_forecast: np.ndarray
    ) -> tuple[list[np.ndarray], np.ndarray, np.ndarray | None]:
        cache = self._cache
        g_out = np.concatenate([self.interp_back.T @ g_backcast, self.interp_fore.T @ g_forecast])
        grads, g_u = self.core.backward(g_out, cache["core"])
        p = self.pooled_len
        g_r = _maxpool_backward(g_u[:p], cache["arg_r"], self.L)
        g_exog = None
        if self.n_exog:
            g_exog = np.zeros((self.n_exog, self.L))
            for c in range(self.n_exog):
                g_exog[c] = _maxpool_backward(
                    g_u[(c + 1) * p : (c + 2) * p], cache["args_e"][c], self.L
                )
        return grads, g_r, g_exog


class NhitsLite(ForecastModel):
    """Stack of NhitsBlocks with backcast residual connections."""

    architecture = "nhits"

    def __init__(self, L, H, n_channels, statics_dim, norm, hyper, rng):
        super().__init__(L, H, n_channels, statics_dim, norm, hyper)
        kernels = tuple(hyper["pooling_kernels"])
        fore_basis = tuple(hyper["forecast_basis"])
        back_basis = tuple(hyper["backcast_basis"])
        hidden = tuple(hyper.get("hidden", (64, 64)))
        self.blocks = [
            NhitsBlock(
                L, H, kern, bb, fb, hidden, n_channels - 1, statics_dim, rng
            )
            for kern, bb, fb in zip(kernels, back_basis, fore_basis)
        ]

    def parameter_arrays(self):
        out = []
        for block in self.blocks:
            out.extend(block.parameter_arrays())
        return out

    def forward(self, ft, train=False, rng=None):
        self._check_shapes(ft)
        x = self.norm.apply(ft.channels)
        r = x[0]
        exog = x[1:] if self.n_channels > 1 else None
        dropout = self.hyper.get("dropout", 0.0)
        forecast = np.zeros(self.H)
        for block in self.blocks:
            backcast, fc = block.forward(r, exog, ft.statics, dropout, train, rng)
            r = r - backcast
            forecast = forecast + fc
        self._cache = {"final_residual": r}
        return forecast

    def _backward(self, g_out):
        g_r = np.zeros(self.L)
        g_exog_total = np.zeros((self.n_channels - 1, self.L)) if self.n_channels > 1 else None
        block_grads = []
        for block in reversed(self.blocks):
            grads, g_r_block, g_exog = block.backward(-g_r, g_out)
            if g_exog is not None:
                g_exog_total += g_exog
            g_r = g_r + g_r_block
            block_grads.append(grads)
        g_flat = np.concatenate(
            [g.ravel() for grads in reversed(block_grads) for g in grads]
        )
        g_channels = np.zeros((self.n_channels, self.L))
        g_channels[0] = g_r
        if g_exog_total is not None:
            g_channels[1:] = g_exog_total
        g_channels = g_channels / self.norm.scale[:, None]
        return g_flat, g_channels

    def final_residual(self) -> np.ndarray:
        """Glucose residual left after all backcasts (from the last forward)."""
        if self._cache is None:
            raise RuntimeError("no recorded forward pass")
        return self._cache["final_residual"]


def default_nhits_hyper(L: int, H: int, hidden=(64, 64), dropout=0.0) -> dict:
    """Three stacks with coarse-to-fine pooling and halving forecast ratios."""
    kernels = tuple(min(k, L) for k in (8, 4, 1))
    fore = tuple(max(2, int(np.ceil(H / r))) for r in (4, 2, 1))
    back = tuple(max(2, L // k) for k in kernels)
    return {
        "pooling_kernels": kernels,
        "forecast_basis": fore,
        "backcast_basis": back,
        "hidden": tuple(hidden),
        "dropout": dropout,
    }


def build_model(
    architecture: str,
    L: int,
    H: int,
    n_channels: int,
    statics_dim: int,
    norm: Normalization,
    rng: np.random.Generator,
    hidden: tuple[int, ...] = (64, 64),
    dropout: float = 0.0,
    **hyper,
) -> ForecastModel:
    if architecture == "persistence":
        return Persistence(L, H, n_channels, statics_dim, norm, hyper)
    if architecture == "ses":
        return SimpleExponentialSmoothing(L, H, n_channels, statics_dim, norm, hyper)
    if architecture == "mlp":
        return MLP(L, H, n_channels, statics_dim, norm, {"hidden": hidden, "dropout": dropout, **hyper}, rng)
    if architecture == "nhits":
        full = default_nhits_hyper(L, H, hidden, dropout)
        full.update(hyper)
        return NhitsLite(L, H, n_channels, statics_dim, norm, full, rng)
    raise ValueError(f"unknown architecture {architecture!r}; expected one of {ARCHITECTURES}")


def model_from_dict(d: dict) -> ForecastModel:
    norm = Normalization.from_dict(d["norm"])
    rng = np.random.default_rng(0)  # placeholder init, overwritten below
    hyper = dict(d["hyper"])
    arch = d["architecture"]
    if arch in ("persistence", "ses"):
        model = build_model(arch, d["L"], d["H"], d["n_channels"], d["statics_dim"], norm, rng, **hyper)
    elif arch == "mlp":
        model = MLP(d["L"], d["H"], d["n_channels"], d["statics_dim"], norm, hyper, rng)
    elif arch == "nhits":
        model = NhitsLite(d["L"], d["H"], d["n_channels"], d["statics_dim"], norm, hyper, rng)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    model.set_param_vector(np.asarray(d["params"], dtype=float))
    return model


@dataclass
class Checkpoint:
    """A trained model bound to its feature configuration and pk table."""

    model: ForecastModel
    feature_config: FeatureConfig
    pk: PkParams | None
    extra: dict

    def to_dict(self) -> dict:
        doc = {
            "model": self.model.to_dict(),
            "feature": {
                "mode": self.feature_config.mode,
                "include_statics": self.feature_config.include_statics,
            },
            "pk": None,
            "extra": self.extra,
        }
        if self.pk is not None:
            doc["pk"] = {
                "patient_ids": list(self.pk.patient_ids),
                "u_bolus": self.pk.u_bolus.tolist(),
                "u_basal": self.pk.u_basal.tolist(),
            }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Checkpoint":
        pk = None
        if doc.get("pk") is not None:
            pk = PkParams(
                patient_ids=list(doc["pk"]["patient_ids"]),
                u_bolus=np.asarray(doc["pk"]["u_bolus"], dtype=float),
                u_basal=np.asarray(doc["pk"]["u_basal"], dtype=float),
            )
        return cls(
            model=model_from_dict(doc["model"]),
            feature_config=FeatureConfig(**doc["feature"]),
            pk=pk,
            extra=doc.get("extra", {}),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
