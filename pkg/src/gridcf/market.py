"""Synthetic electricity-market generator with exact counterfactual ground
truth.

The generator implements the weather -> renewable generation -> net load ->
price pathway as a three-level temporal SCM at the default 27/64/35 block
dims. Factors W evolve as mean-reverting AR(1) processes with daily and
weekly seasonal forcing; the dynamics state I aggregates merit-order
quantities (renewable output through saturating capacity curves, demand with
regime-dependent composition, net load, a convex piecewise-linear dispatch
margin, fuel pass-throughs, storage memory) plus a factor pass-through and
sparse random projections; observables V are noisy linear reads of I with
the price column driven by margin + marginal fuel.

All exogenous noise is drawn up front and stored, so any counterfactual can
be answered exactly by re-simulating with the stored draws. Regime switches
swap coefficient sets and edge supports at scheduled steps.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .causal import (
    ClampPlan,
    DimsConfig,
    InterventionSpec,
    NoiseBlock,
    TemporalGraph,
    ValidationError,
    model_block_mask,
)

__all__ = [
    "FACTOR_NAMES",
    "OBSERVABLE_NAMES",
    "FACTOR_MEASUREMENT_COLS",
    "PRICE_COL",
    "MarketConfig",
    "EpisodeData",
    "GeneratorCore",
    "generate",
    "oracle_counterfactual",
    "export_episode",
    "import_episode",
    "export_csv",
    "EpisodeFormatError",
]

FACTOR_NAMES = (
    # weather
    "temperature", "wind_speed", "solar_irradiance", "precipitation",
    "humidity", "cloud_cover", "air_pressure", "temperature_south",
    # generation (capacities / availabilities)
    "nuclear_avail", "gas_capacity", "coal_capacity", "hydro_reservoir",
    "wind_capacity", "solar_capacity", "biomass_output", "import_capacity",
    # demand drivers
    "base_load_level", "industrial_activity", "heating_intensity",
    "cooling_intensity", "ev_charging_level", "conservation_index",
    # market
    "gas_price", "coal_price", "carbon_price", "import_price_spread",
    "market_stress",
)

DERIVED_NAMES = (
    "price_delta", "net_load", "renewable_output", "total_demand",
    "storage_level", "import_flow", "reserve_margin", "stress_index",
)

OBSERVABLE_NAMES = FACTOR_NAMES + DERIVED_NAMES

# V column j is the direct (noisy) measurement of factor j.
FACTOR_MEASUREMENT_COLS = tuple(range(len(FACTOR_NAMES)))
PRICE_COL = len(FACTOR_NAMES)  # "price_delta"

# semantic I coordinates; the factor pass-through starts right after
I_RENEW, I_DEMAND, I_NETLOAD, I_MARGIN, I_FUEL, I_STORAGE, I_IMPORT, I_RESERVE = range(8)
I_PASS = 8

# factor indices used by the structural equations
W_TEMP, W_WIND, W_SOLAR = 0, 1, 2
W_NUCLEAR, W_GASCAP, W_COALCAP, W_HYDRO, W_WINDCAP, W_SOLARCAP = 8, 9, 10, 11, 12, 13
W_IMPORTCAP = 15
W_BASE, W_IND, W_HEAT, W_COOL, W_EV, W_CONS = 16, 17, 18, 19, 20, 21
W_GASPRICE, W_COALPRICE, W_CARBON, W_SPREAD, W_STRESS = 22, 23, 24, 25, 26

MAGIC = b"ATSE"
FORMAT_VERSION = 1

DEFAULT_NOISE = {
    "weather": 0.12,
    "generation": 0.015,
    "demand": 0.06,
    "market": 0.05,
    "dynamics": 0.02,
    "observation": 0.03,
}


class EpisodeFormatError(ValueError):
    """Corrupt or incompatible episode file."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class MarketConfig:
    """Episode shape, regime schedule, and noise levels.

    `switches` are 1-based steps at which a new regime starts, strictly
    increasing and strictly inside (1, T). `drift_steps > 0` blends
    coefficient sets linearly after each switch instead of jumping.
    """

    t_steps: int = 2000
    seed: int = 0
    d_I: int = 64
    switches: tuple[int, ...] = ()
    noise_scales: dict = field(default_factory=lambda: dict(DEFAULT_NOISE))
    drift_steps: int = 0

    def __post_init__(self):
        if self.t_steps < 1:
            raise ValidationError("t_steps must be >= 1")
        d_W, d_V = len(FACTOR_NAMES), len(OBSERVABLE_NAMES)
        if self.d_I < I_PASS + d_W:
            raise ValidationError(f"d_I must be >= {I_PASS + d_W} to host the dynamics state")
        sw = tuple(int(s) for s in self.switches)
        if list(sw) != sorted(set(sw)):
            raise ValidationError("switch times must be strictly increasing")
        if sw and (sw[0] <= 1 or sw[-1] >= self.t_steps):
            raise ValidationError("switch times must lie strictly inside (1, T)")
        for k, v in self.noise_scales.items():
            if k not in DEFAULT_NOISE:
                raise ValidationError(f"unknown noise block {k!r}")
            if v < 0:
                raise ValidationError(f"noise scale for {k!r} must be >= 0")
        if self.drift_steps < 0:
            raise ValidationError("drift_steps must be >= 0")
        object.__setattr__(self, "switches", sw)

    @property
    def dims(self) -> DimsConfig:
        return DimsConfig(d_W=len(FACTOR_NAMES), d_I=self.d_I, d_V=len(OBSERVABLE_NAMES))

    def to_json(self) -> dict:
        return {
            "t_steps": self.t_steps,
            "seed": self.seed,
            "d_I": self.d_I,
            "switches": list(self.switches),
            "noise_scales": {k: self.noise_scales[k] for k in sorted(self.noise_scales)},
            "drift_steps": self.drift_steps,
        }

    @staticmethod
    def from_json(obj: dict) -> "MarketConfig":
        known = {"t_steps", "seed", "d_I", "switches", "noise_scales", "drift_steps"}
        extra = set(obj) - known
        if extra:
            raise ValidationError(f"unknown market config fields: {sorted(extra)}")
        kwargs = dict(obj)
        if "switches" in kwargs:
            kwargs["switches"] = tuple(kwargs["switches"])
        if "noise_scales" in kwargs:
            scales = dict(DEFAULT_NOISE)
            scales.update(kwargs["noise_scales"])
            kwargs["noise_scales"] = scales
        return MarketConfig(**kwargs)


# Regime variants cycled through the schedule. Consecutive variants always
# differ in edge support (demand composition and/or marginal fuel), so every
# scheduled switch is detectable from the graph sequence alone.
REGIME_VARIANTS = (
    {   # heating season, gas on the margin
        "name": "winter_gas",
        "demand": {"heating": 0.55, "cooling": 0.0, "ev": 0.0, "heat_gain": 0.8, "cool_gain": 0.0},
        "fuel": {"gas": 0.7, "coal": 0.0, "carbon": 0.25},
        "pwl_scale": 1.0,
    },
    {   # cooling season with EV charging, coal on the margin
        "name": "summer_coal",
        "demand": {"heating": 0.0, "cooling": 0.55, "ev": 0.45, "heat_gain": 0.0, "cool_gain": 0.7},
        "fuel": {"gas": 0.0, "coal": 0.65, "carbon": 0.25},
        "pwl_scale": 1.0,
    },
    {   # tight winter with electrified heating, steep merit curve
        "name": "scarcity_gas",
        "demand": {"heating": 0.6, "cooling": 0.0, "ev": 0.5, "heat_gain": 0.9, "cool_gain": 0.0},
        "fuel": {"gas": 0.9, "coal": 0.0, "carbon": 0.35},
        "pwl_scale": 1.7,
    },
)


@dataclass(frozen=True)
class _RegimeCoeffs:
    name: str
    demand_heating: float
    demand_cooling: float
    demand_ev: float
    heat_gain: float
    cool_gain: float
    fuel_gas: float
    fuel_coal: float
    fuel_carbon: float
    pwl_slopes: tuple[float, float, float]

    def flat(self) -> np.ndarray:
        return np.array(
            [
                self.demand_heating, self.demand_cooling, self.demand_ev,
                self.heat_gain, self.cool_gain,
                self.fuel_gas, self.fuel_coal, self.fuel_carbon,
                *self.pwl_slopes,
            ]
        )


def _interp_regimes(a: _RegimeCoeffs, b: _RegimeCoeffs, frac: float) -> _RegimeCoeffs:
    fa, fb = 1.0 - frac, frac

    def mix(x, y):
        return fa * x + fb * y

    return _RegimeCoeffs(
        name=b.name,
        demand_heating=mix(a.demand_heating, b.demand_heating),
        demand_cooling=mix(a.demand_cooling, b.demand_cooling),
        demand_ev=mix(a.demand_ev, b.demand_ev),
        heat_gain=mix(a.heat_gain, b.heat_gain),
        cool_gain=mix(a.cool_gain, b.cool_gain),
        fuel_gas=mix(a.fuel_gas, b.fuel_gas),
        fuel_coal=mix(a.fuel_coal, b.fuel_coal),
        fuel_carbon=mix(a.fuel_carbon, b.fuel_carbon),
        pwl_slopes=tuple(mix(x, y) for x, y in zip(a.pwl_slopes, b.pwl_slopes)),
    )


class GeneratorCore:
    """Deterministic mechanism set derived from a MarketConfig seed.

    Coefficients are drawn once from a dedicated stream, so a core rebuilt
    from the same config is bit-identical; episode noise uses a separate
    stream and never perturbs the coefficients.
    """

    PWL_KNOTS = (0.6, 1.6)
    BASE_PWL_SLOPES = (0.6, 1.2, 2.4)

    def __init__(self, config: MarketConfig):
        self.config = config
        self.dims = config.dims
        d_W = self.dims.d_W
        rng = np.random.default_rng([config.seed, 0])

        # factor AR(1) with seasonal mean: persistence, level, daily and
        # weekly amplitudes, phases, per-coordinate noise multiplier
        self.phi = np.empty(d_W)
        self.base = np.empty(d_W)
        self.amp24 = np.zeros(d_W)
        self.amp168 = np.zeros(d_W)
        blocks = self.dims.block_slices()
        self.phi[blocks["weather"]] = rng.uniform(0.86, 0.95, 8)
        self.phi[blocks["generation"]] = rng.uniform(0.96, 0.99, 8)
        self.phi[blocks["demand"]] = rng.uniform(0.9, 0.97, 6)
        self.phi[blocks["market"]] = rng.uniform(0.95, 0.985, 5)
        self.base[blocks["weather"]] = rng.uniform(-0.3, 0.3, 8)
        self.base[W_WIND] = 1.5
        self.base[W_SOLAR] = 1.2
        self.base[blocks["generation"]] = rng.uniform(0.9, 1.1, 8)
        self.base[blocks["demand"]] = rng.uniform(0.7, 1.0, 6)
        self.base[blocks["market"]] = rng.uniform(0.6, 1.2, 5)
        self.amp24[blocks["weather"]] = rng.uniform(0.15, 0.45, 8)
        self.amp24[blocks["demand"]] = rng.uniform(0.2, 0.5, 6)
        self.amp168[blocks["demand"]] = rng.uniform(0.1, 0.3, 6)
        self.amp168[W_IND] = 0.45
        self.phase24 = rng.uniform(0.0, 24.0, d_W)
        self.phase168 = rng.uniform(0.0, 168.0, d_W)
        self.noise_mult = rng.uniform(0.8, 1.25, d_W)

        # renewable saturation curves and demand response
        self.wind_gain = rng.uniform(1.6, 2.2)
        self.wind_shift = rng.uniform(1.0, 1.4)
        self.solar_gain = rng.uniform(1.4, 2.0)
        self.solar_shift = rng.uniform(0.8, 1.2)
        self.hydro_coef = rng.uniform(0.2, 0.35)
        self.demand_base_coef = rng.uniform(0.8, 1.1)
        self.demand_ind_coef = rng.uniform(0.3, 0.5)
        self.demand_cons_coef = rng.uniform(0.1, 0.2)
        self.temp_ref_heat = rng.uniform(-0.2, 0.1)
        self.temp_ref_cool = rng.uniform(0.3, 0.6)
        self.storage_rho = 0.7
        self.storage_gain = rng.uniform(0.15, 0.3)
        self.import_gain = rng.uniform(0.3, 0.5)
        self.reserve_base = rng.uniform(0.8, 1.2)
        self.reserve_cap_coef = 0.5
        self.reserve_net_coef = rng.uniform(0.4, 0.6)
        self.stress_margin_coef = 0.6
        self.stress_reserve_coef = 0.4
        self.price_noise_mult = 1.5

        # sparse random projections filling the rest of the dynamics state;
        # the market_stress factor is kept out so it has no descendants
        # beyond its own measurement column.
        n_proj = config.d_I - I_PASS - d_W
        eligible = [j for j in range(d_W) if j != W_STRESS]
        self.proj_idx = np.empty((n_proj, 3), dtype=np.int64)
        self.proj_w = np.empty((n_proj, 3))
        for r in range(n_proj):
            self.proj_idx[r] = rng.choice(eligible, size=3, replace=False)
            self.proj_w[r] = rng.normal(0.0, 0.5, 3)

        self.regimes = self._build_regimes(rng)
        self._labels = self._label_table()
        self._mu = None  # lazily built seasonal mean table
        self._w_sigma_vec = None

    def _build_regimes(self, rng) -> list[_RegimeCoeffs]:
        out = []
        for k in range(len(self.config.switches) + 1):
            v = REGIME_VARIANTS[k % len(REGIME_VARIANTS)]
            slopes = tuple(s * v["pwl_scale"] for s in self.BASE_PWL_SLOPES)
            out.append(
                _RegimeCoeffs(
                    name=v["name"],
                    demand_heating=v["demand"]["heating"],
                    demand_cooling=v["demand"]["cooling"],
                    demand_ev=v["demand"]["ev"],
                    heat_gain=v["demand"]["heat_gain"],
                    cool_gain=v["demand"]["cool_gain"],
                    fuel_gas=v["fuel"]["gas"],
                    fuel_coal=v["fuel"]["coal"],
                    fuel_carbon=v["fuel"]["carbon"],
                    pwl_slopes=slopes,
                )
            )
        return out

    def _label_table(self) -> np.ndarray:
        labels = np.zeros(self.config.t_steps, dtype=np.int64)
        for k, s in enumerate(self.config.switches):
            labels[s - 1 :] = k + 1
        return labels

    def regime_label(self, t: int) -> int:
        return int(self._labels[t])

    def coeffs_at(self, t: int) -> _RegimeCoeffs:
        label = self.regime_label(t)
        coeffs = self.regimes[label]
        drift = self.config.drift_steps
        if drift > 0 and label > 0:
            start = self.config.switches[label - 1] - 1
            frac = min(1.0, (t - start + 1) / drift)
            if frac < 1.0:
                return _interp_regimes(self.regimes[label - 1], coeffs, frac)
        return coeffs

    def mech_flat(self, t: int) -> np.ndarray:
        return self.coeffs_at(t).flat()

    def seasonal_mean(self, t: int) -> np.ndarray:
        if self._mu is None:
            steps = np.arange(self.config.t_steps + 1)[:, None]
            self._mu = (
                self.base[None, :]
                + self.amp24[None, :] * np.sin(2 * np.pi * (steps + self.phase24[None, :]) / 24.0)
                + self.amp168[None, :] * np.sin(2 * np.pi * (steps + self.phase168[None, :]) / 168.0)
            )
        return self._mu[t]

    # --- structural steps (shared by generation, replay, and counterfactuals)

    def initial_w(self, z: np.ndarray) -> np.ndarray:
        return self.seasonal_mean(0) + 0.1 * self.noise_mult * z

    def step_w(self, w_prev: np.ndarray, u_w: np.ndarray, t: int) -> np.ndarray:
        mu_t = self.seasonal_mean(t)
        mu_prev = self.seasonal_mean(t - 1)
        return mu_t + self.phi * (w_prev - mu_prev) + self._w_sigma() * u_w

    def _w_sigma(self) -> np.ndarray:
        if self._w_sigma_vec is None:
            ns = self.config.noise_scales
            sigma = np.empty(self.dims.d_W)
            for name, sl in self.dims.block_slices().items():
                sigma[sl] = ns[name]
            self._w_sigma_vec = sigma * self.noise_mult
        return self._w_sigma_vec

    @staticmethod
    def _sigmoid(x: float) -> float:
        return 1.0 / (1.0 + np.exp(-x)) if x >= 0 else np.exp(x) / (1.0 + np.exp(x))

    def step_i(self, w: np.ndarray, i_prev: np.ndarray, u_i: np.ndarray, t: int) -> np.ndarray:
        c = self.coeffs_at(t)
        s_dyn = self.config.noise_scales["dynamics"]
        i = np.empty(self.dims.d_I)

        wind_drive = max(w[W_WIND], 0.0)
        solar_drive = max(w[W_SOLAR], 0.0)
        i[I_RENEW] = (
            w[W_WINDCAP] * self._sigmoid(self.wind_gain * (wind_drive - self.wind_shift))
            + w[W_SOLARCAP] * self._sigmoid(self.solar_gain * (solar_drive - self.solar_shift))
            + self.hydro_coef * w[W_HYDRO]
            + s_dyn * u_i[I_RENEW]
        )
        i[I_DEMAND] = (
            self.demand_base_coef * w[W_BASE]
            + self.demand_ind_coef * w[W_IND]
            + c.demand_heating * w[W_HEAT]
            + c.demand_cooling * w[W_COOL]
            + c.demand_ev * w[W_EV]
            - self.demand_cons_coef * w[W_CONS]
            + c.heat_gain * max(self.temp_ref_heat - w[W_TEMP], 0.0)
            + c.cool_gain * max(w[W_TEMP] - self.temp_ref_cool, 0.0)
            + s_dyn * u_i[I_DEMAND]
        )
        i[I_NETLOAD] = i[I_DEMAND] - i[I_RENEW] + s_dyn * u_i[I_NETLOAD]
        s0, s1, s2 = c.pwl_slopes
        k1, k2 = self.PWL_KNOTS
        x = i[I_NETLOAD]
        i[I_MARGIN] = s0 * x + (s1 - s0) * max(x - k1, 0.0) + (s2 - s1) * max(x - k2, 0.0)
        i[I_FUEL] = (
            c.fuel_gas * w[W_GASPRICE]
            + c.fuel_coal * w[W_COALPRICE]
            + c.fuel_carbon * w[W_CARBON]
            + s_dyn * u_i[I_FUEL]
        )
        i[I_STORAGE] = (
            self.storage_rho * i_prev[I_STORAGE]
            - self.storage_gain * i[I_NETLOAD]
            + s_dyn * u_i[I_STORAGE]
        )
        i[I_IMPORT] = (
            self.import_gain * w[W_IMPORTCAP] * np.tanh(w[W_SPREAD]) + s_dyn * u_i[I_IMPORT]
        )
        i[I_RESERVE] = (
            self.reserve_base
            + self.reserve_cap_coef * (w[W_NUCLEAR] + w[W_GASCAP] + w[W_COALCAP])
            - self.reserve_net_coef * i[I_NETLOAD]
            + s_dyn * u_i[I_RESERVE]
        )
        d_W = self.dims.d_W
        i[I_PASS : I_PASS + d_W] = w + s_dyn * u_i[I_PASS : I_PASS + d_W]
        lo = I_PASS + d_W
        proj = np.einsum("rk,rk->r", self.proj_w, w[self.proj_idx])
        i[lo:] = proj + s_dyn * u_i[lo:]
        return i

    def step_v(self, i: np.ndarray, u_v: np.ndarray, t: int) -> np.ndarray:
        s_obs = self.config.noise_scales["observation"]
        d_W = self.dims.d_W
        v = np.empty(self.dims.d_V)
        v[:d_W] = i[I_PASS : I_PASS + d_W] + s_obs * u_v[:d_W]
        v[PRICE_COL] = i[I_MARGIN] + i[I_FUEL] + self.price_noise_mult * s_obs * u_v[PRICE_COL]
        v[d_W + 1] = i[I_NETLOAD] + s_obs * u_v[d_W + 1]
        v[d_W + 2] = i[I_RENEW] + s_obs * u_v[d_W + 2]
        v[d_W + 3] = i[I_DEMAND] + s_obs * u_v[d_W + 3]
        v[d_W + 4] = i[I_STORAGE] + s_obs * u_v[d_W + 4]
        v[d_W + 5] = i[I_IMPORT] + s_obs * u_v[d_W + 5]
        v[d_W + 6] = i[I_RESERVE] + s_obs * u_v[d_W + 6]
        v[d_W + 7] = (
            self.stress_margin_coef * i[I_MARGIN]
            - self.stress_reserve_coef * i[I_RESERVE]
            + s_obs * u_v[d_W + 7]
        )
        return v

    # --- ground-truth graphs

    def graph_matrix(self, regime: int) -> np.ndarray:
        c = self.regimes[regime]
        dims = self.dims
        d_W = dims.d_W
        a = np.zeros((dims.d, dims.d))

        def iw(k):  # I node index in the stacked ordering
            return d_W + k

        def vw(k):  # V node index
            return d_W + dims.d_I + k

        # W -> I
        a[W_WIND, iw(I_RENEW)] = self.wind_gain
        a[W_SOLAR, iw(I_RENEW)] = self.solar_gain
        a[W_WINDCAP, iw(I_RENEW)] = 1.0
        a[W_SOLARCAP, iw(I_RENEW)] = 1.0
        a[W_HYDRO, iw(I_RENEW)] = self.hydro_coef
        a[W_BASE, iw(I_DEMAND)] = self.demand_base_coef
        a[W_IND, iw(I_DEMAND)] = self.demand_ind_coef
        a[W_CONS, iw(I_DEMAND)] = -self.demand_cons_coef
        a[W_TEMP, iw(I_DEMAND)] = max(c.heat_gain, c.cool_gain)
        if c.demand_heating:
            a[W_HEAT, iw(I_DEMAND)] = c.demand_heating
        if c.demand_cooling:
            a[W_COOL, iw(I_DEMAND)] = c.demand_cooling
        if c.demand_ev:
            a[W_EV, iw(I_DEMAND)] = c.demand_ev
        if c.fuel_gas:
            a[W_GASPRICE, iw(I_FUEL)] = c.fuel_gas
        if c.fuel_coal:
            a[W_COALPRICE, iw(I_FUEL)] = c.fuel_coal
        a[W_CARBON, iw(I_FUEL)] = c.fuel_carbon
        a[W_IMPORTCAP, iw(I_IMPORT)] = self.import_gain
        a[W_SPREAD, iw(I_IMPORT)] = self.import_gain
        a[W_NUCLEAR, iw(I_RESERVE)] = self.reserve_cap_coef
        a[W_GASCAP, iw(I_RESERVE)] = self.reserve_cap_coef
        a[W_COALCAP, iw(I_RESERVE)] = self.reserve_cap_coef
        for j in range(d_W):
            a[j, iw(I_PASS + j)] = 1.0
        lo = I_PASS + d_W
        for r in range(self.proj_idx.shape[0]):
            for k in range(3):
                a[self.proj_idx[r, k], iw(lo + r)] = self.proj_w[r, k]

        # I -> I (within slice, increasing index)
        a[iw(I_RENEW), iw(I_NETLOAD)] = -1.0
        a[iw(I_DEMAND), iw(I_NETLOAD)] = 1.0
        a[iw(I_NETLOAD), iw(I_MARGIN)] = c.pwl_slopes[0]
        a[iw(I_NETLOAD), iw(I_STORAGE)] = -self.storage_gain
        a[iw(I_NETLOAD), iw(I_RESERVE)] = -self.reserve_net_coef

        # I -> V
        for j in range(d_W):
            a[iw(I_PASS + j), vw(j)] = 1.0
        a[iw(I_MARGIN), vw(PRICE_COL)] = 1.0
        a[iw(I_FUEL), vw(PRICE_COL)] = 1.0
        a[iw(I_NETLOAD), vw(d_W + 1)] = 1.0
        a[iw(I_RENEW), vw(d_W + 2)] = 1.0
        a[iw(I_DEMAND), vw(d_W + 3)] = 1.0
        a[iw(I_STORAGE), vw(d_W + 4)] = 1.0
        a[iw(I_IMPORT), vw(d_W + 5)] = 1.0
        a[iw(I_RESERVE), vw(d_W + 6)] = 1.0
        a[iw(I_MARGIN), vw(d_W + 7)] = self.stress_margin_coef
        a[iw(I_RESERVE), vw(d_W + 7)] = -self.stress_reserve_coef
        return a

    def temporal_graph(self) -> TemporalGraph:
        mats = [self.graph_matrix(k) for k in range(len(self.regimes))]
        return TemporalGraph(mats, self._labels, mask=model_block_mask(self.dims))


@dataclass
class EpisodeData:
    """One simulated market window with full latent and noise storage."""

    config: MarketConfig
    W: np.ndarray
    I: np.ndarray
    V: np.ndarray
    U_W: np.ndarray
    U_I: np.ndarray
    U_V: np.ndarray
    i_init: np.ndarray
    regime_labels: np.ndarray
    graph: TemporalGraph

    _core: GeneratorCore | None = None

    @property
    def t_steps(self) -> int:
        return self.V.shape[0]

    @property
    def dims(self) -> DimsConfig:
        return self.config.dims

    def core(self) -> GeneratorCore:
        if self._core is None:
            self._core = GeneratorCore(self.config)
        return self._core

    def noise_at(self, t: int) -> NoiseBlock:
        return NoiseBlock(self.U_W[t], self.U_I[t], self.U_V[t])

    def mech_flat(self, t: int) -> np.ndarray:
        return self.core().mech_flat(t)

    def factor_ranges(self) -> list[tuple[float, float]]:
        return [(float(c.min()), float(c.max())) for c in self.W.T]


def generate(config: MarketConfig) -> EpisodeData:
    """Simulate one episode; deterministic in config.seed."""
    core = GeneratorCore(config)
    dims = core.dims
    t_steps = config.t_steps
    rng = np.random.default_rng([config.seed, 1])

    z_init = rng.normal(size=dims.d_W)
    i_init = np.zeros(dims.d_I)
    i_init[I_STORAGE] = 0.5 * rng.normal()
    u_w = rng.normal(size=(t_steps, dims.d_W))
    u_i = rng.normal(size=(t_steps, dims.d_I))
    u_v = rng.normal(size=(t_steps, dims.d_V))

    w = np.empty((t_steps, dims.d_W))
    i = np.empty((t_steps, dims.d_I))
    v = np.empty((t_steps, dims.d_V))
    for t in range(t_steps):
        if t == 0:
            w[0] = core.initial_w(z_init)
        else:
            w[t] = core.step_w(w[t - 1], u_w[t], t)
        prev_i = i[t - 1] if t > 0 else i_init
        i[t] = core.step_i(w[t], prev_i, u_i[t], t)
        v[t] = core.step_v(i[t], u_v[t], t)

    return EpisodeData(
        config=config,
        W=w,
        I=i,
        V=v,
        U_W=u_w,
        U_I=u_i,
        U_V=u_v,
        i_init=i_init,
        regime_labels=core._labels.copy(),
        graph=core.temporal_graph(),
        _core=core,
    )


def replay(episode: EpisodeData) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Re-run the mechanisms on the stored noise; must reproduce the episode."""
    return oracle_counterfactual(episode, InterventionSpec.null())


def oracle_counterfactual(
    episode: EpisodeData, spec: InterventionSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact counterfactual (W, I, V) trajectories by re-simulation.

    Prediction restarts at the intervention start with the stored noise
    draws; `scale` clamps are relative to the stored factual factors.
    """
    if episode.U_W is None or episode.U_I is None or episode.U_V is None:
        raise ValidationError("episode carries no stored noise; counterfactuals unavailable")
    core = episode.core()
    t_steps = episode.t_steps
    spec.validate(episode.dims.d_W, t_steps)
    plan = ClampPlan(spec, episode.dims.d_W, t_steps)

    cf_w = episode.W.copy()
    cf_i = episode.I.copy()
    cf_v = episode.V.copy()
    for t in range(spec.start - 1, t_steps):
        if t == 0:
            row = episode.W[0]
        else:
            row = core.step_w(cf_w[t - 1], episode.U_W[t], t)
        cf_w[t] = plan.apply(row, episode.W[t], t)
        prev_i = cf_i[t - 1] if t > 0 else episode.i_init
        cf_i[t] = core.step_i(cf_w[t], prev_i, episode.U_I[t], t)
        cf_v[t] = core.step_v(cf_i[t], episode.U_V[t], t)
    return cf_w, cf_i, cf_v


# --- episode container format: magic, version, config JSON, then raw arrays


def _write_array(buf, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<I", data.ndim))
    for n in data.shape:
        buf.write(struct.pack("<Q", n))
    buf.write(data.tobytes())


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise EpisodeFormatError(
            f"truncated episode file: wanted {n} bytes, got {len(data)}",
            offset=buf.tell() - len(data),
        )
    return data


def _read_array(buf) -> np.ndarray:
    (ndim,) = struct.unpack("<I", _read_exact(buf, 4))
    if ndim > 4:
        raise EpisodeFormatError(f"implausible array rank {ndim}", offset=buf.tell() - 4)
    shape = tuple(struct.unpack("<Q", _read_exact(buf, 8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    raw = _read_exact(buf, count * 8)
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def export_episode(episode: EpisodeData, path) -> None:
    if episode.t_steps < 1:
        raise ValidationError("refusing to export an empty episode")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        cfg = json.dumps(episode.config.to_json(), sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        for arr in (episode.W, episode.I, episode.V, episode.U_W, episode.U_I, episode.U_V):
            _write_array(fh, arr)
        _write_array(fh, episode.i_init)
        _write_array(fh, episode.regime_labels.astype(np.float64))
        mats = episode.graph.matrices
        fh.write(struct.pack("<I", len(mats)))
        for m in mats:
            _write_array(fh, m)
        _write_array(fh, episode.graph.step_index.astype(np.float64))


def import_episode(path) -> EpisodeData:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != MAGIC:
            raise EpisodeFormatError(f"bad magic {magic!r}", offset=0)
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise EpisodeFormatError(f"unsupported episode version {version}", offset=4)
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        config = MarketConfig.from_json(json.loads(_read_exact(fh, cfg_len).decode("utf-8")))
        w = _read_array(fh)
        i = _read_array(fh)
        v = _read_array(fh)
        u_w = _read_array(fh)
        u_i = _read_array(fh)
        u_v = _read_array(fh)
        i_init = _read_array(fh)
        labels = _read_array(fh).astype(np.int64)
        (n_mats,) = struct.unpack("<I", _read_exact(fh, 4))
        mats = [_read_array(fh) for _ in range(n_mats)]
        index = _read_array(fh).astype(np.int64)
        trailing = fh.read(1)
        if trailing:
            raise EpisodeFormatError("trailing bytes after episode payload", offset=fh.tell() - 1)
    graph = TemporalGraph(mats, index, mask=model_block_mask(config.dims), validate=False)
    return EpisodeData(
        config=config, W=w, I=i, V=v, U_W=u_w, U_I=u_i, U_V=u_v,
        i_init=i_init, regime_labels=labels, graph=graph,
    )


EPOCH_ISO = "2024-01-01T00:00:00+00:00"


def _timestamp(t: int) -> str:
    from datetime import datetime, timedelta, timezone

    start = datetime(2024, 1, 1, tzinfo=timezone.utc)
    return (start + timedelta(hours=t)).isoformat()


def export_csv(episode: EpisodeData, path) -> None:
    """Write the observables as CSV: ISO-8601 hourly timestamps + V columns."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("timestamp," + ",".join(OBSERVABLE_NAMES) + "\n")
        for t in range(episode.t_steps):
            row = ",".join(repr(float(x)) for x in episode.V[t])
            fh.write(f"{_timestamp(t)},{row}\n")


def schema_json() -> dict:
    return {"columns": ["timestamp", *OBSERVABLE_NAMES], "target": "price_delta"}
