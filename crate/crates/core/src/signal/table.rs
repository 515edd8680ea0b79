//! Precomputed per-house base demand.
//!
//! Each grid node stores the mean electrical power a lockout-free bang-bang
//! thermostat draws over five minutes, starting from the node's state. At run
//! time the aggregate base demand is the sum of per-house lookups: multilinear
//! over the air gap, mass gap and outdoor temperature, nearest-neighbour over
//! cooling capacity and thermal parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hvac::{ac_outputs, apply_action, AcParams, AcState};
use crate::thermal::{sample_thermal_params, HouseState, ThermalCoefficients, ThermalParams};

pub const TABLE_FORMAT_VERSION: u32 = 1;
const TABLE_MAGIC: &[u8; 8] = b"TCLBASE\0";

/// Residual (fraction of rated power) above which the grid is reported too coarse.
const COARSE_RESIDUAL_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// `Th − TT` axis, °C (ascending).
    pub th_gaps: Vec<f64>,
    /// `Tm − TT` axis, °C (ascending).
    pub tm_gaps: Vec<f64>,
    /// Outdoor temperature axis at the reference target, °C (ascending).
    pub outdoor: Vec<f64>,
    /// Cooling capacity axis, W.
    pub capacities: Vec<f64>,
    pub thermal_presets: Vec<ThermalParams>,
    /// Target temperature the grid was simulated at, °C.
    pub target: f64,
    pub dt: f64,
    /// Averaging window, s.
    pub duration: f64,
    pub cop: f64,
    pub latent: f64,
    /// Seed for the thermal presets and the validation sample.
    pub seed: u64,
    pub validation_samples: usize,
}

impl GridSpec {
    /// About 20k nodes: 11 To × 9 Th-gap × 5 Tm-gap × 5 Ka × 8 thermal presets.
    pub fn default_grid() -> Self {
        Self::with_presets(
            vec![-1.0, -0.5, -0.2, 0.0, 0.2, 0.5, 1.0, 2.0, 4.0],
            vec![-2.0, 0.0, 2.0, 5.0, 10.0],
            (0..11).map(|k| 20.0 + 2.0 * k as f64).collect(),
            vec![10_000.0, 12_500.0, 15_000.0, 17_500.0, 20_000.0],
            8,
            0,
        )
    }

    /// A coarse grid for quick experiments and tests.
    pub fn small() -> Self {
        Self::with_presets(
            vec![-0.5, 0.0, 0.5, 2.0],
            vec![-1.0, 0.0, 2.0],
            vec![20.0, 26.0, 32.0, 38.0],
            vec![15_000.0],
            1,
            0,
        )
    }

    /// Preset 0 is the default house; the others are seeded ±50 % perturbations.
    pub fn with_presets(
        th_gaps: Vec<f64>,
        tm_gaps: Vec<f64>,
        outdoor: Vec<f64>,
        capacities: Vec<f64>,
        presets: usize,
        seed: u64,
    ) -> Self {
        let base = ThermalParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7AB1E);
        let mut thermal_presets = vec![base];
        while thermal_presets.len() < presets.max(1) {
            thermal_presets.push(sample_thermal_params(&base, 0.5, &mut rng));
        }
        let ac = AcParams::default();
        Self {
            th_gaps,
            tm_gaps,
            outdoor,
            capacities,
            thermal_presets,
            target: 20.0,
            dt: 4.0,
            duration: 300.0,
            cop: ac.cop,
            latent: ac.latent,
            seed,
            validation_samples: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [
            ("th_gaps", &self.th_gaps),
            ("tm_gaps", &self.tm_gaps),
            ("outdoor", &self.outdoor),
            ("capacities", &self.capacities),
        ] {
            if axis.is_empty() {
                return Err(Error::config(format!("grid axis {name} is empty")));
            }
            if axis.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::config(format!("grid axis {name} must be strictly ascending")));
            }
        }
        if self.thermal_presets.is_empty() {
            return Err(Error::config("grid needs at least one thermal preset"));
        }
        for p in &self.thermal_presets {
            p.validate()?;
        }
        if !(self.dt > 0.0) || !(self.duration >= self.dt) {
            return Err(Error::config("grid dt/duration must be positive"));
        }
        let lo = self.outdoor[0] - self.target;
        let hi = self.outdoor[self.outdoor.len() - 1] - self.target;
        if lo > 6.0 || hi < 18.0 {
            return Err(Error::config(format!(
                "outdoor axis must cover at least 26-38 °C at a 20 °C target, covers {}-{}",
                lo + 20.0,
                hi + 20.0
            )));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.thermal_presets.len()
            * self.capacities.len()
            * self.outdoor.len()
            * self.th_gaps.len()
            * self.tm_gaps.len()
    }

    fn dims(&self) -> [usize; 5] {
        [
            self.thermal_presets.len(),
            self.capacities.len(),
            self.outdoor.len(),
            self.th_gaps.len(),
            self.tm_gaps.len(),
        ]
    }

    /// Row-major index over (preset, capacity, outdoor, th gap, tm gap).
    fn index(&self, idx: [usize; 5]) -> usize {
        let d = self.dims();
        (((idx[0] * d[1] + idx[1]) * d[2] + idx[2]) * d[3] + idx[3]) * d[4] + idx[4]
    }

    fn unravel(&self, mut flat: usize) -> [usize; 5] {
        let d = self.dims();
        let mut out = [0; 5];
        for k in (0..5).rev() {
            out[k] = flat % d[k];
            flat /= d[k];
        }
        out
    }

    fn query_for(&self, preset: usize, ka: f64, to: f64, th_gap: f64, tm_gap: f64) -> NodeQuery {
        NodeQuery {
            params: self.thermal_presets[preset],
            ac: AcParams {
                ka,
                cop: self.cop,
                latent: self.latent,
                lockout_max: 0.0,
            },
            state: HouseState::new(self.target + th_gap, self.target + tm_gap),
            outdoor: to,
            target: self.target,
            dt: self.dt,
            duration: self.duration,
        }
    }
}

/// One oracle simulation request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeQuery {
    pub params: ThermalParams,
    pub ac: AcParams,
    pub state: HouseState,
    pub outdoor: f64,
    pub target: f64,
    pub dt: f64,
    pub duration: f64,
}

/// Mean AC power (W) of a lockout-free bang-bang thermostat over the query window.
pub fn bang_bang_average_power(q: &NodeQuery) -> f64 {
    let Ok(coeffs) = ThermalCoefficients::new(&q.params, q.dt) else {
        return f64::NAN;
    };
    let ac = AcParams {
        lockout_max: 0.0,
        ..q.ac
    };
    let steps = (q.duration / q.dt).round().max(1.0) as usize;
    let mut state = q.state;
    let mut unit = AcState::off();
    let mut energy = 0.0;
    for _ in 0..steps {
        unit = apply_action(&unit, &ac, state.th > q.target, q.dt);
        let (qa, pa) = ac_outputs(&ac, &unit);
        energy += pa;
        state = match coeffs.step(state, q.outdoor, qa, 0.0) {
            Ok(s) => s,
            Err(_) => return f64::NAN,
        };
    }
    energy / steps as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMetadata {
    pub format_version: u32,
    pub nodes: usize,
    pub generator: String,
    /// Largest |oracle − interpolation| on the validation sample, as a fraction of rated power.
    pub max_validation_residual: f64,
    pub grid_too_coarse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseSignalTable {
    pub spec: GridSpec,
    pub metadata: TableMetadata,
    #[serde(skip)]
    values: Vec<f64>,
}

/// Run `oracle` on every grid node (in parallel) and validate the result.
pub fn build_base_table<F>(spec: &GridSpec, oracle: F) -> Result<BaseSignalTable>
where
    F: Fn(&NodeQuery) -> f64 + Sync,
{
    spec.validate()?;
    let values: Vec<f64> = (0..spec.node_count())
        .into_par_iter()
        .map(|flat| {
            let [p, k, o, h, m] = spec.unravel(flat);
            oracle(&spec.query_for(
                p,
                spec.capacities[k],
                spec.outdoor[o],
                spec.th_gaps[h],
                spec.tm_gaps[m],
            ))
        })
        .collect();
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteResult(format!("base table node {bad} is not finite")));
    }
    let mut table = BaseSignalTable {
        spec: spec.clone(),
        metadata: TableMetadata {
            format_version: TABLE_FORMAT_VERSION,
            nodes: values.len(),
            generator: "bang-bang, no lockout".to_string(),
            max_validation_residual: 0.0,
            grid_too_coarse: false,
        },
        values,
    };
    let residual = table.validation_residual(&oracle);
    table.metadata.max_validation_residual = residual;
    if residual > COARSE_RESIDUAL_FRACTION {
        table.metadata.grid_too_coarse = true;
        log::warn!(
            "GridTooCoarse: interpolation residual {:.1}% of rated power exceeds {:.0}%",
            residual * 100.0,
            COARSE_RESIDUAL_FRACTION * 100.0
        );
    }
    Ok(table)
}

/// Process-wide default table, built on first use.
pub fn default_base_table() -> Arc<BaseSignalTable> {
    static TABLE: OnceLock<Arc<BaseSignalTable>> = OnceLock::new();
    TABLE
        .get_or_init(|| {
            Arc::new(
                build_base_table(&GridSpec::default_grid(), bang_bang_average_power)
                    .expect("default grid is valid"),
            )
        })
        .clone()
}

struct AxisWeight {
    lo: usize,
    hi: usize,
    frac: f64,
    clamped: bool,
}

fn locate(axis: &[f64], x: f64) -> AxisWeight {
    let n = axis.len();
    if n == 1 {
        return AxisWeight { lo: 0, hi: 0, frac: 0.0, clamped: x != axis[0] };
    }
    if x <= axis[0] {
        return AxisWeight { lo: 0, hi: 0, frac: 0.0, clamped: x < axis[0] };
    }
    if x >= axis[n - 1] {
        return AxisWeight { lo: n - 1, hi: n - 1, frac: 0.0, clamped: x > axis[n - 1] };
    }
    let hi = axis.partition_point(|v| *v <= x);
    let lo = hi - 1;
    AxisWeight {
        lo,
        hi,
        frac: (x - axis[lo]) / (axis[hi] - axis[lo]),
        clamped: false,
    }
}

fn nearest_by<T>(items: &[T], dist: impl Fn(&T) -> f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, item) in items.iter().enumerate() {
        let d = dist(item);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

impl BaseSignalTable {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn node_value(&self, preset: usize, capacity: usize, outdoor: usize, th: usize, tm: usize) -> f64 {
        self.values[self.spec.index([preset, capacity, outdoor, th, tm])]
    }

    pub fn nearest_preset(&self, params: &ThermalParams) -> usize {
        let q = params.as_array();
        nearest_by(&self.spec.thermal_presets, |p| {
            p.as_array()
                .iter()
                .zip(q.iter())
                .map(|(a, b)| (a / b).ln().powi(2))
                .sum()
        })
    }

    pub fn nearest_capacity(&self, ka: f64) -> usize {
        nearest_by(&self.spec.capacities, |k| (k - ka).abs())
    }

    /// Base demand of one house (W) and whether the query left the grid hull.
    pub fn interpolate(
        &self,
        state: &HouseState,
        target: f64,
        outdoor: f64,
        ac: &AcParams,
        params: &ThermalParams,
    ) -> (f64, bool) {
        let preset = self.nearest_preset(params);
        let cap = self.nearest_capacity(ac.ka);
        let o = locate(&self.spec.outdoor, outdoor - target + self.spec.target);
        let h = locate(&self.spec.th_gaps, state.th - target);
        let m = locate(&self.spec.tm_gaps, state.tm - target);
        let mut value = 0.0;
        for (oi, ow) in [(o.lo, 1.0 - o.frac), (o.hi, o.frac)] {
            if ow == 0.0 {
                continue;
            }
            for (hi, hw) in [(h.lo, 1.0 - h.frac), (h.hi, h.frac)] {
                if hw == 0.0 {
                    continue;
                }
                for (mi, mw) in [(m.lo, 1.0 - m.frac), (m.hi, m.frac)] {
                    if mw == 0.0 {
                        continue;
                    }
                    value += ow * hw * mw * self.node_value(preset, cap, oi, hi, mi);
                }
            }
        }
        (value.clamp(0.0, ac.power()), o.clamped || h.clamped || m.clamped)
    }

    fn validation_residual<F: Fn(&NodeQuery) -> f64>(&self, oracle: &F) -> f64 {
        let spec = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0F_7AB1E);
        let mid = |axis: &[f64], rng: &mut ChaCha8Rng| -> f64 {
            if axis.len() == 1 {
                axis[0]
            } else {
                let i = rng.random_range(0..axis.len() - 1);
                0.5 * (axis[i] + axis[i + 1])
            }
        };
        let mut worst: f64 = 0.0;
        for _ in 0..spec.validation_samples {
            let p = rng.random_range(0..spec.thermal_presets.len());
            let k = rng.random_range(0..spec.capacities.len());
            let to = mid(&spec.outdoor, &mut rng);
            let th = mid(&spec.th_gaps, &mut rng);
            let tm = mid(&spec.tm_gaps, &mut rng);
            let q = spec.query_for(p, spec.capacities[k], to, th, tm);
            let truth = oracle(&q);
            let (approx, _) = self.interpolate(&q.state, q.target, q.outdoor, &q.ac, &q.params);
            worst = worst.max((truth - approx).abs() / q.ac.power());
        }
        worst
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    /// Binary file: magic, version, header JSON, value count, little-endian f64 values
    /// (row-major over preset, capacity, outdoor, th gap, tm gap). A readable
    /// metadata sidecar is written next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(self)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(TABLE_MAGIC)?;
        w.write_all(&TABLE_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        std::fs::write(Self::sidecar_path(path), serde_json::to_string_pretty(&self.metadata)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TABLE_MAGIC {
            return Err(Error::Format(format!("{} is not a base-signal table", path.display())));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != TABLE_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported table version {version}")));
        }
        r.read_exact(&mut u32buf)?;
        let mut header = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        r.read_exact(&mut header)?;
        let mut table: BaseSignalTable = serde_json::from_slice(&header)?;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        if count != table.spec.node_count() {
            return Err(Error::Format(format!(
                "table holds {count} values but its grid has {} nodes",
                table.spec.node_count()
            )));
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut u64buf)?;
            values.push(f64::from_le_bytes(u64buf));
        }
        table.values = values;
        Ok(table)
    }
}
