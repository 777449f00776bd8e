"""Batch experiments: pulse-response traces, SNR/BER sweeps and EIT spectra.

Every grid cell draws its detector noise from a seed derived from the
root seed and the cell's own (power, rate) values, so results do not
depend on execution order, thread count or which other cells are run.
CSV files carry a commented header (schema, config hash, units) and no
timestamps; timestamps and versions go to the JSON run summary.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__, dsp, optics, receiver
from .atomic import Envelope
from .config import SCHEMA_VERSION, ExperimentConfig
from .constants import TWO_PI
from .errors import StmError

log = logging.getLogger(__name__)

LOW_BAND = (1e6, 10e6)
HIGH_BAND = (50e6, 100e6)
LOG10_BER_MIN = -30.0
LOG10_BER_MAX = -3.0


# ---------------------------------------------------------------------------
# seeding and output helpers


def cell_seed(root: int, *values) -> np.random.SeedSequence:
    """SeedSequence keyed on the root seed and the cell's defining values."""
    digest = hashlib.sha256(repr(tuple(float(v) for v in values)).encode()).digest()
    return np.random.SeedSequence([int(root), int.from_bytes(digest[:8], "little")])


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_csv(path: Path, verb: str, cfg: ExperimentConfig, columns: list[tuple[str, str]],
              rows, notes: tuple[str, ...] = ()) -> Path:
    """CSV with a commented header block: schema, config hash, seed, units."""
    lines = [f"# stm_rydberg {verb} schema v{SCHEMA_VERSION}",
             f"# config_sha256: {cfg.config_hash}",
             f"# seed: {cfg.numerics.seed}"]
    lines += [f"# {n}" for n in notes]
    lines.append("# units: " + ", ".join(f"{name} [{unit}]" for name, unit in columns))
    lines.append(",".join(name for name, _ in columns))
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_summary(path: Path, verb: str, cfg: ExperimentConfig, started: float,
                  files: list[Path], extra: dict) -> Path:
    summary = {
        "verb": verb,
        "schema_version": SCHEMA_VERSION,
        "config_sha256": cfg.config_hash,
        "seed": cfg.numerics.seed,
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "elapsed_s": round(time.time() - started, 3),
        "versions": {"stm_rydberg": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
        "files": [p.name for p in files],
        "config": cfg.to_dict(),
        **extra,
    }
    path.write_text(json.dumps(_json_safe(summary), indent=2) + "\n", encoding="utf-8")
    return path


def _json_safe(obj):
    """Replace NaN/inf by None so the summary is strict JSON."""
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _outdir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pool(cfg: ExperimentConfig):
    return ThreadPoolExecutor(max_workers=cfg.numerics.threads)


# ---------------------------------------------------------------------------
# pulse response


def run_pulse_response(cfg: ExperimentConfig) -> list[Path]:
    """RF-on/off detector traces for every configured (T, 1/f_r) pair.

    The RF-on run applies the configured OOK bit pattern with one probe
    pulse per bit (symbol period = repetition period) at the benchmark RF
    Rabi frequency. Returns the written CSV paths.
    """
    started = time.time()
    pairs = cfg.pulse_pairs()
    if not pairs:
        warnings.warn("no pulse pairs configured; nothing to do", stacklevel=2)
        return []
    out = _outdir(cfg)
    ladder, cell, beams = cfg.ladder(), cfg.cell_params(), cfg.beam_params()
    det = cfg.detector_model()
    grid = optics.build_velocity_grid(cell.temperature, ladder.atom_mass,
                                      cfg.numerics.n_velocity_classes)
    rabi = TWO_PI * cfg.rf.benchmark_rabi_hz
    bits = cfg.rf.bits

    def one(pair):
        width, period = pair
        train = receiver.PulseTrain(width, period, n_pulses=len(bits))
        rf = receiver.ook_rabi(bits, period, rabi, train.start_offset)
        sdt = receiver.pulse_sample_dt(width, period, cfg.numerics.sample_dt_s)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            seed = int(cell_seed(cfg.numerics.seed, width, period).generate_state(1)[0])
            return receiver.simulate_pulse_response(
                ladder, cell, beams, train, rf, det, grid=grid, sample_dt=sdt,
                rng_key=(seed,), dt_factor=cfg.numerics.dt_factor)

    files = []
    with _pool(cfg) as pool:
        results = list(pool.map(one, pairs))
    for (width, period), pr in zip(pairs, results):
        rows = []
        for k in range(pr.v_on.shape[0]):
            for i, t in enumerate(pr.times):
                rows.append((t, pr.v_on[k, i], pr.v_off[k, i], 0, k,
                             pr.p_on[k, i], pr.p_off[k, i]))
        name = f"pulse_response_T{width * 1e9:g}ns_P{period * 1e9:g}ns.csv"
        files.append(write_csv(
            out / name, "pulse-response", cfg,
            [("time_s", "s"), ("v_rf_on_V", "V"), ("v_rf_off_V", "V"), ("beam_index", "1"),
             ("pulse_index", "1"), ("p_rf_on_W", "W"), ("p_rf_off_W", "W")],
            rows, (f"pulse_width_s: {width!r}", f"period_s: {period!r}",
                   f"rf_rabi_rad_per_s: {rabi!r}", "time is relative to each pulse's rising edge")))
        log.info("pulse-response: wrote %s", name)
    write_summary(out / "pulse-response_summary.json", "pulse-response", cfg, started, files,
                  {"pairs_s": pairs})
    return files


# ---------------------------------------------------------------------------
# SNR / BER grid


@dataclass
class SweepResult:
    """Detection records over (RF power x data rate).

    ``snr``/``ber`` are (n_powers, n_rates) arrays with NaN for failed
    cells; ``missing`` lists those cells with the error text.
    """

    powers_dbm: np.ndarray
    rates_hz: np.ndarray
    rabi: np.ndarray                          # rad/s per power
    records: dict = field(default_factory=dict)
    missing: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return bool(self.missing)

    def _grid(self, attr: str) -> np.ndarray:
        g = np.full((len(self.powers_dbm), len(self.rates_hz)), np.nan)
        for (i, j), rec in self.records.items():
            g[i, j] = getattr(rec, attr)
        return g

    @property
    def snr(self) -> np.ndarray:
        return self._grid("snr")

    @property
    def ber(self) -> np.ndarray:
        return self._grid("ber")

    @property
    def signal(self) -> np.ndarray:
        return self._grid("signal")

    def slopes(self) -> np.ndarray:
        """(n_powers, 2) log-log SNR-vs-rate slopes in the low and high bands."""
        out = np.full((len(self.powers_dbm), 2), np.nan)
        snr = self.snr
        for i in range(len(self.powers_dbm)):
            for b, (lo, hi) in enumerate((LOW_BAND, HIGH_BAND)):
                sel = (self.rates_hz >= lo * (1 - 1e-9)) & (self.rates_hz <= hi * (1 + 1e-9))
                sel &= np.isfinite(snr[i]) & (snr[i] > 0)
                if sel.sum() >= 2:
                    out[i, b] = np.polyfit(np.log10(self.rates_hz[sel]),
                                           np.log10(snr[i, sel]), 1)[0]
        return out


def _noiseless_traces(cfg, ladder, cell, beams, det, grid, rate, rabi):
    """Detected noiseless voltage and optical power for one probe pulse."""
    width = 1.0 / rate
    period = 1.0 / cfg.schedule.repetition_rate_hz
    receiver.make_stm_schedule(rate, cfg.schedule.repetition_rate_hz, width)
    train = receiver.PulseTrain(width, period)
    sdt = receiver.pulse_sample_dt(width, period, cfg.numerics.sample_dt_s)
    n_margin = int(round(0.5 * width / sdt))
    n_width = int(round(width / sdt))
    t_span = (-n_margin * sdt, (n_width + n_margin) * sdt)
    _, _, p_out, _ = receiver.transmitted_power(
        ladder, cell, beams, train, Envelope.constant(rabi), grid, t_span,
        sdt, cfg.numerics.dt_factor)
    v = receiver.detect(p_out, det, sdt, noise=False)
    return v, p_out, sdt


def run_snr_sweep(cfg: ExperimentConfig, *, write: bool = True,
                  verb: str = "snr-sweep") -> SweepResult:
    """SNR and BER for every (RF power, data rate) cell.

    Data rate f_s = 1/T with f_s/f_r beams; each cell simulates one pulse
    of one beam (independent ensembles). Failed cells are logged and
    listed in ``missing``; the run continues.
    """
    started = time.time()
    ladder, cell, beams = cfg.ladder(), cfg.cell_params(), cfg.beam_params()
    det = cfg.detector_model()
    n = cfg.numerics
    grid = optics.build_velocity_grid(cell.temperature, ladder.atom_mass, n.n_velocity_classes)
    powers = np.asarray(cfg.rf.powers_dbm, dtype=float)
    rates = np.asarray(cfg.rf.rates_hz, dtype=float)
    rabi = np.array([cfg.rf_rabi_for_power(p) for p in powers])
    result = SweepResult(powers, rates, rabi, meta={"config_sha256": cfg.config_hash})

    def off_trace(rate):
        try:
            return _noiseless_traces(cfg, ladder, cell, beams, det, grid, rate, 0.0)
        except StmError as exc:
            return exc

    def cell_run(ij):
        i, j = ij
        rate = rates[j]
        off = off_cache[j]
        if isinstance(off, Exception):
            raise off
        v_off, p_off, sdt = off
        v_on, p_on, _ = _noiseless_traces(cfg, ladder, cell, beams, det, grid, rate, rabi[i])
        rng = np.random.default_rng(cell_seed(n.seed, powers[i], rate))
        i_on = det.responsivity * p_on
        i_off = det.responsivity * p_off
        noise = receiver.noise_sample(det, i_on, sdt, len(i_on), rng, size=n.repetitions)
        if n.noise_mode == "differenced":
            noise = noise - receiver.noise_sample(det, i_off, sdt, len(i_off), rng,
                                                  size=n.repetitions)
        return dsp.detection_record(v_on, v_off, noise, 1.0 / rate, sdt, powers[i],
                                    n.min_repetitions)

    cells = [(i, j) for i in range(len(powers)) for j in range(len(rates))]
    with warnings.catch_warnings(), _pool(cfg) as pool:
        warnings.simplefilter("ignore")
        off_cache = list(pool.map(off_trace, rates))
        futures = {ij: pool.submit(cell_run, ij) for ij in cells}
        for k, ij in enumerate(cells):
            try:
                result.records[ij] = futures[ij].result()
            except (StmError, FloatingPointError) as exc:
                i, j = ij
                result.missing.append({"rf_power_dbm": float(powers[i]),
                                       "data_rate_hz": float(rates[j]), "error": str(exc)})
                log.warning("%s: cell (%g dBm, %g Hz) failed: %s", verb, powers[ij[0]],
                            rates[ij[1]], exc)
            log.info("%s: %d/%d cells done", verb, k + 1, len(cells))
    if write:
        _write_snr(cfg, result, started, verb)
    return result


def _snr_rows(result: SweepResult, cfg: ExperimentConfig):
    rows = []
    for i, p in enumerate(result.powers_dbm):
        for j, r in enumerate(result.rates_hz):
            rec = result.records.get((i, j))
            n_beams = int(round(r / cfg.schedule.repetition_rate_hz))
            if rec is None:
                rows.append((p, result.rabi[i] / TWO_PI, r, 1.0 / r, n_beams, math.nan,
                             math.nan, math.nan, math.nan, 0, "missing"))
            else:
                rows.append((p, result.rabi[i] / TWO_PI, r, 1.0 / r, n_beams, rec.signal,
                             float(np.sqrt(np.mean(rec.noise**2))), rec.snr, rec.ber,
                             rec.n_repetitions, "ok"))
    return rows


SNR_COLUMNS = [("rf_power_dbm", "dBm"), ("rf_rabi_hz", "Hz"), ("data_rate_hz", "Hz"),
               ("pulse_width_s", "s"), ("n_beams", "1"), ("signal_V", "V"),
               ("noise_rms_V", "V"), ("snr", "1"), ("ber", "1"), ("n_repetitions", "1"),
               ("status", "-")]


def _write_snr(cfg, result, started, verb):
    out = _outdir(cfg)
    files = [write_csv(out / "snr_sweep.csv", verb, cfg, SNR_COLUMNS, _snr_rows(result, cfg),
                       ("partial run: see summary" if result.partial else "complete grid",))]
    slopes = result.slopes()
    files.append(write_csv(
        out / "snr_slopes.csv", verb, cfg,
        [("rf_power_dbm", "dBm"), ("slope_low_band", "1"), ("slope_high_band", "1")],
        [(p, s[0], s[1]) for p, s in zip(result.powers_dbm, slopes)],
        (f"low band {LOW_BAND[0]:g}-{LOW_BAND[1]:g} Hz, "
         f"high band {HIGH_BAND[0]:g}-{HIGH_BAND[1]:g} Hz",)))
    write_summary(out / f"{verb}_summary.json", verb, cfg, started, files,
                  {"partial": result.partial, "missing_cells": result.missing})
    return files


def ber_contour_grid(ber) -> np.ndarray:
    """log10 BER clipped to [-30, -3] for contour plots (values above -3 rounded down)."""
    with np.errstate(divide="ignore"):
        lg = np.log10(np.asarray(ber, dtype=float))
    return np.clip(lg, LOG10_BER_MIN, LOG10_BER_MAX)


def run_ber_map(cfg: ExperimentConfig) -> tuple[SweepResult, np.ndarray]:
    """BER over (power, rate): raw values plus the clipped contour grid."""
    started = time.time()
    result = run_snr_sweep(cfg, write=False, verb="ber-map")
    contour = ber_contour_grid(result.ber)
    out = _outdir(cfg)
    rows = []
    ber = result.ber
    for i, p in enumerate(result.powers_dbm):
        for j, r in enumerate(result.rates_hz):
            raw = ber[i, j]
            with np.errstate(divide="ignore", invalid="ignore"):
                lg = math.log10(raw) if raw > 0 else math.nan
            rows.append((p, r, result.snr[i, j], raw, lg, contour[i, j]))
    files = [write_csv(out / "ber_map.csv", "ber-map", cfg,
                       [("rf_power_dbm", "dBm"), ("data_rate_hz", "Hz"), ("snr", "1"),
                        ("ber", "1"), ("log10_ber", "1"), ("log10_ber_contour", "1")],
                       rows, (f"log10_ber_contour clipped to [{LOG10_BER_MIN:g}, "
                              f"{LOG10_BER_MAX:g}]; BER floor {dsp.BER_FLOOR:g}",))]
    write_summary(out / "ber-map_summary.json", "ber-map", cfg, started, files,
                  {"partial": result.partial, "missing_cells": result.missing})
    return result, contour


# ---------------------------------------------------------------------------
# spectrum


def run_spectrum(cfg: ExperimentConfig) -> tuple[optics.Spectrum, optics.Spectrum, Path]:
    """Steady-state transmission vs coupling detuning, RF off and on."""
    started = time.time()
    ladder, cell, beams = cfg.ladder(), cfg.cell_params(), cfg.beam_params()
    n = cfg.numerics
    half = 0.5 * n.spectrum_span_hz
    sweep_hz = cfg.beams.delta2_hz + np.linspace(-half, half, n.spectrum_points)
    sweep = TWO_PI * sweep_hz
    rabi = TWO_PI * cfg.rf.benchmark_rabi_hz
    with _pool(cfg) as pool:
        off = optics.eit_spectrum(ladder, cell, beams, sweep, False,
                                  n_classes=n.spectrum_velocity_classes, executor=pool)
        on = optics.eit_spectrum(ladder, cell, beams, sweep, True, rabi,
                                 n_classes=n.spectrum_velocity_classes, executor=pool)
    try:
        splitting = optics.at_splitting(on)
    except StmError as exc:
        log.warning("spectrum: no AT splitting found: %s", exc)
        splitting = math.nan
    out = _outdir(cfg)
    path = write_csv(out / "spectrum.csv", "spectrum", cfg,
                     [("delta2_hz", "Hz"), ("transmission_rf_off", "1"),
                      ("transmission_rf_on", "1")],
                     zip(sweep_hz, off.transmission, on.transmission),
                     (f"rf_rabi_hz: {cfg.rf.benchmark_rabi_hz!r}",
                      f"at_splitting_hz: {splitting / TWO_PI!r}"))
    write_summary(out / "spectrum_summary.json", "spectrum", cfg, started, [path],
                  {"at_splitting_hz": splitting / TWO_PI})
    return off, on, path
