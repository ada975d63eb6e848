//! Slowdown model for concurrently running compute and transfer channels.
//!
//! Channels are compute (`C`), device-to-device collectives (`G2G`),
//! host-to-device copies (`C2G`) and device-to-host copies (`G2C`). Every
//! subset of two or more channels carries one slowdown factor per member.
//! Prediction walks the subsets from the largest down, in lexicographic
//! channel order within a size class; a row is updated by a subset only when
//! its current set of nonzero channels equals that subset exactly.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const CHANNELS: [&str; 4] = ["C", "G2G", "C2G", "G2C"];

/// Channel bitmasks in evaluation order (size 4, then 3, then 2).
const SUBSETS: [u8; 11] = [
    0b1111, // C+G2G+C2G+G2C
    0b0111, 0b1011, 0b1101, 0b1110, // triples
    0b0011, 0b0101, 0b1001, 0b0110, 0b1010, 0b1100, // pairs
];

#[derive(Debug, thiserror::Error)]
pub enum InterferenceError {
    #[error("slowdown factor {value} for `{subset}` must be finite and >= 1")]
    BadFactor { subset: String, value: f64 },
    #[error("`{subset}` needs {expected} factors, got {got}")]
    FactorCount {
        subset: String,
        expected: usize,
        got: usize,
    },
    #[error("missing factors for `{0}`")]
    MissingSubset(String),
    #[error("unknown channel subset `{0}`")]
    UnknownSubset(String),
    #[error("no observations to fit")]
    NoObservations,
    #[error("observation {index}: {msg}")]
    BadObservation { index: usize, msg: String },
    #[error("params file: {0}")]
    Format(String),
    #[error("observations CSV: {0}")]
    Csv(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Isolated durations (seconds) of the four channels over one window.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelVector {
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "G2G")]
    pub g2g: f64,
    #[serde(rename = "C2G")]
    pub c2g: f64,
    #[serde(rename = "G2C")]
    pub g2c: f64,
}

impl ChannelVector {
    pub fn new(c: f64, g2g: f64, c2g: f64, g2c: f64) -> Self {
        ChannelVector { c, g2g, c2g, g2c }
    }

    pub fn compute(c: f64) -> Self {
        Self::new(c, 0.0, 0.0, 0.0)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.c, self.g2g, self.c2g, self.g2c]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn max(&self) -> f64 {
        self.as_array().into_iter().fold(0.0, f64::max)
    }

    pub fn is_valid(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite() && *v >= 0.0)
    }

    fn mask(x: &[f64; 4]) -> u8 {
        x.iter()
            .enumerate()
            .fold(0, |m, (i, &v)| if v != 0.0 { m | (1 << i) } else { m })
    }
}

fn members(mask: u8) -> impl Iterator<Item = usize> {
    (0..4).filter(move |i| mask & (1 << i) != 0)
}

/// Canonical subset name such as `C+G2G`.
pub fn subset_name(mask: u8) -> String {
    members(mask)
        .map(|i| CHANNELS[i])
        .collect::<Vec<_>>()
        .join("+")
}

fn subset_from_name(name: &str) -> Option<u8> {
    let mut mask = 0u8;
    for part in name.split('+') {
        let i = CHANNELS.iter().position(|c| *c == part.trim())?;
        if mask & (1 << i) != 0 {
            return None;
        }
        mask |= 1 << i;
    }
    SUBSETS.contains(&mask).then_some(mask)
}

/// Slowdown factors for all eleven multi-channel subsets.
#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceParams {
    // indexed like SUBSETS; entry j is the factor of channel j (unused
    // channels hold 1)
    factors: [[f64; 4]; 11],
}

impl Default for InterferenceParams {
    /// Synthetic desk-scale factors: 1.15 for pairs, 1.25 for triples,
    /// 1.35 when all four channels run together.
    fn default() -> Self {
        let mut factors = [[1.0; 4]; 11];
        for (k, &mask) in SUBSETS.iter().enumerate() {
            let f = match mask.count_ones() {
                4 => 1.35,
                3 => 1.25,
                _ => 1.15,
            };
            for j in members(mask) {
                factors[k][j] = f;
            }
        }
        InterferenceParams { factors }
    }
}

impl InterferenceParams {
    /// All factors equal to one: perfect overlap.
    pub fn unit() -> Self {
        InterferenceParams {
            factors: [[1.0; 4]; 11],
        }
    }

    /// Builds from `subset name -> factors` (one per member, in channel
    /// order). Every subset must be present.
    pub fn from_map(map: &BTreeMap<String, Vec<f64>>) -> Result<Self, InterferenceError> {
        let mut p = Self::unit();
        let mut seen = [false; 11];
        for (name, fs) in map {
            let mask = subset_from_name(name)
                .ok_or_else(|| InterferenceError::UnknownSubset(name.clone()))?;
            let k = SUBSETS.iter().position(|&m| m == mask).expect("listed");
            let ids: Vec<usize> = members(mask).collect();
            if fs.len() != ids.len() {
                return Err(InterferenceError::FactorCount {
                    subset: subset_name(mask),
                    expected: ids.len(),
                    got: fs.len(),
                });
            }
            for (&j, &f) in ids.iter().zip(fs) {
                p.set(k, j, f)?;
            }
            seen[k] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(InterferenceError::MissingSubset(subset_name(SUBSETS[k])));
        }
        Ok(p)
    }

    pub fn to_map(&self) -> BTreeMap<String, Vec<f64>> {
        SUBSETS
            .iter()
            .enumerate()
            .map(|(k, &mask)| {
                (
                    subset_name(mask),
                    members(mask).map(|j| self.factors[k][j]).collect(),
                )
            })
            .collect()
    }

    pub fn from_toml(text: &str) -> Result<Self, InterferenceError> {
        let map: BTreeMap<String, Vec<f64>> =
            toml::from_str(text).map_err(|e| InterferenceError::Format(e.to_string()))?;
        Self::from_map(&map)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_map()).expect("factor map serializes")
    }

    pub fn load(path: &Path) -> Result<Self, InterferenceError> {
        let text = std::fs::read_to_string(path).map_err(|source| InterferenceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Factors of the subset named like `C+G2G`.
    pub fn factors(&self, subset: &str) -> Option<Vec<f64>> {
        let mask = subset_from_name(subset)?;
        let k = SUBSETS.iter().position(|&m| m == mask)?;
        Some(members(mask).map(|j| self.factors[k][j]).collect())
    }

    pub fn set_factors(&mut self, subset: &str, fs: &[f64]) -> Result<(), InterferenceError> {
        let mask = subset_from_name(subset)
            .ok_or_else(|| InterferenceError::UnknownSubset(subset.to_string()))?;
        let k = SUBSETS.iter().position(|&m| m == mask).expect("listed");
        let ids: Vec<usize> = members(mask).collect();
        if ids.len() != fs.len() {
            return Err(InterferenceError::FactorCount {
                subset: subset.to_string(),
                expected: ids.len(),
                got: fs.len(),
            });
        }
        for (&j, &f) in ids.iter().zip(fs) {
            self.set(k, j, f)?;
        }
        Ok(())
    }

    fn set(&mut self, k: usize, j: usize, f: f64) -> Result<(), InterferenceError> {
        if !(f.is_finite() && f >= 1.0) {
            return Err(InterferenceError::BadFactor {
                subset: subset_name(SUBSETS[k]),
                value: f,
            });
        }
        self.factors[k][j] = f;
        Ok(())
    }

    /// Largest factor any subset assigns to each channel.
    pub fn max_factor_per_channel(&self) -> [f64; 4] {
        let mut out = [1.0f64; 4];
        for (k, &mask) in SUBSETS.iter().enumerate() {
            for j in members(mask) {
                out[j] = out[j].max(self.factors[k][j]);
            }
        }
        out
    }

    /// Predicted wall-clock seconds for one channel vector.
    pub fn predict(&self, v: &ChannelVector) -> f64 {
        predict_row(v.as_array(), &self.factors)
    }
}

fn predict_row(mut x: [f64; 4], factors: &[[f64; 4]; 11]) -> f64 {
    let mut total = 0.0;
    let mut m = ChannelVector::mask(&x);
    for (k, &subset) in SUBSETS.iter().enumerate() {
        if m == subset {
            total += update(&mut x, subset, &factors[k]);
            m = ChannelVector::mask(&x);
        }
    }
    total + x[0] + x[1] + x[2] + x[3]
}

/// Scales the subset's members, removes the common overlap and returns it.
#[inline]
fn update(x: &mut [f64; 4], subset: u8, f: &[f64; 4]) -> f64 {
    let mut scaled = [0.0; 4];
    let mut overlap = f64::INFINITY;
    for j in 0..4 {
        if subset & (1 << j) != 0 {
            scaled[j] = x[j] * f[j];
            overlap = if scaled[j] < overlap {
                scaled[j]
            } else {
                overlap
            };
        }
    }
    for j in 0..4 {
        if subset & (1 << j) != 0 {
            // the minimal member drops to exactly zero; skip its division
            x[j] = if scaled[j] == overlap {
                0.0
            } else {
                (scaled[j] - overlap) / f[j]
            };
        }
    }
    overlap
}

/// Batched prediction. Row results equal [`InterferenceParams::predict`]
/// bitwise.
pub fn pred_intf(batch: &[ChannelVector], params: &InterferenceParams) -> Vec<f64> {
    batch
        .iter()
        .map(|v| predict_row(v.as_array(), &params.factors))
        .collect()
}

/// Batched prediction over channel columns (C, G2G, C2G, G2C), as
/// produced by a compiled [`crate::symexpr::Program`].
pub fn pred_intf_columns(cols: [&[f64]; 4], params: &InterferenceParams) -> Vec<f64> {
    let n = cols[0].len();
    assert!(cols.iter().all(|c| c.len() == n), "ragged channel columns");
    (0..n)
        .map(|i| {
            predict_row(
                [cols[0][i], cols[1][i], cols[2][i], cols[3][i]],
                &params.factors,
            )
        })
        .collect()
}

/// One measured window: isolated channel durations and the observed total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    #[serde(flatten)]
    pub channels: ChannelVector,
    pub total: f64,
}

/// Tuning knobs for [`fit_params`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Factors are searched in `[1, max_factor]`.
    pub max_factor: f64,
    /// Coarse grid points scanned before golden-section refinement.
    pub grid: usize,
    /// Golden-section interval width at which a line search stops.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_factor: 3.0,
            grid: 16,
            tol: 1e-7,
            max_sweeps: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: InterferenceParams,
    pub initial_loss: f64,
    pub loss: f64,
    pub sweeps: usize,
}

fn rel_sq(pred: f64, obs: f64) -> f64 {
    if obs == 0.0 {
        0.0
    } else {
        let r = (pred - obs) / obs;
        r * r
    }
}

/// Fits slowdown factors by coordinate descent, minimizing the mean squared
/// relative error. Each coordinate is scanned on a coarse grid and refined
/// by golden-section search around the best grid cell; a move is kept only
/// if it lowers the loss, so the result is never worse than `init`.
pub fn fit_params(
    observations: &[Observation],
    init: &InterferenceParams,
    opts: &FitOptions,
) -> Result<FitReport, InterferenceError> {
    if observations.is_empty() {
        return Err(InterferenceError::NoObservations);
    }
    for (index, o) in observations.iter().enumerate() {
        if !o.channels.is_valid() {
            return Err(InterferenceError::BadObservation {
                index,
                msg: "channel durations must be finite and nonnegative".into(),
            });
        }
        if !(o.total.is_finite() && o.total >= 0.0) {
            return Err(InterferenceError::BadObservation {
                index,
                msg: format!("total {} must be finite and nonnegative", o.total),
            });
        }
        let silent = o.channels.max() == 0.0;
        if silent && o.total != 0.0 {
            return Err(InterferenceError::BadObservation {
                index,
                msg: "all channels are zero but the total is not".into(),
            });
        }
        if !silent && o.total == 0.0 {
            return Err(InterferenceError::BadObservation {
                index,
                msg: "total is zero but some channel is busy".into(),
            });
        }
    }
    let n = observations.len() as f64;
    let mut params = init.clone();
    let mut row_loss: Vec<f64> = observations
        .iter()
        .map(|o| rel_sq(params.predict(&o.channels), o.total))
        .collect();
    let initial_loss = row_loss.iter().sum::<f64>() / n;

    // A subset can only fire on rows whose initial pattern contains it.
    let relevant: Vec<Vec<usize>> = SUBSETS
        .iter()
        .map(|&mask| {
            observations
                .iter()
                .enumerate()
                .filter(|(_, o)| {
                    let m = ChannelVector::mask(&o.channels.as_array());
                    m & mask == mask
                })
                .map(|(i, _)| i)
                .collect()
        })
        .collect();

    let mut loss = initial_loss;
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let before = loss;
        for (k, &mask) in SUBSETS.iter().enumerate() {
            let rows = &relevant[k];
            if rows.is_empty() {
                continue;
            }
            for j in members(mask) {
                let current = params.factors[k][j];
                let base: f64 = rows.iter().map(|&i| row_loss[i]).sum();
                let mut trial = params.clone();
                let mut eval = |f: f64| -> f64 {
                    trial.factors[k][j] = f;
                    rows.iter()
                        .map(|&i| {
                            let o = &observations[i];
                            rel_sq(trial.predict(&o.channels), o.total)
                        })
                        .sum()
                };
                let (best_f, best_v) = line_search(&mut eval, opts);
                if best_v < base && best_f != current {
                    params.factors[k][j] = best_f;
                    for &i in rows {
                        let o = &observations[i];
                        row_loss[i] = rel_sq(params.predict(&o.channels), o.total);
                    }
                    loss = row_loss.iter().sum::<f64>() / n;
                }
            }
        }
        if before - loss <= 1e-14 * before.max(1e-300) {
            break;
        }
    }
    Ok(FitReport {
        params,
        initial_loss,
        loss,
        sweeps,
    })
}

fn line_search(eval: &mut impl FnMut(f64) -> f64, opts: &FitOptions) -> (f64, f64) {
    let (lo, hi) = (1.0, opts.max_factor.max(1.0));
    let steps = opts.grid.max(2);
    let h = (hi - lo) / steps as f64;
    let mut best = (lo, eval(lo));
    let mut best_i = 0;
    for i in 1..=steps {
        let f = lo + h * i as f64;
        let v = eval(f);
        if v < best.1 {
            best = (f, v);
            best_i = i;
        }
    }
    let mut a = lo + h * best_i.saturating_sub(1) as f64;
    let mut b = (lo + h * (best_i + 1) as f64).min(hi);
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = eval(x1);
    let mut f2 = eval(x2);
    while b - a > opts.tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = eval(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = eval(x2);
        }
    }
    for (x, v) in [(x1, f1), (x2, f2)] {
        if v < best.1 {
            best = (x, v);
        }
    }
    best
}

/// Reads observations from CSV with columns `C,G2G,C2G,G2C,total`.
pub fn read_observations<R: Read>(reader: R) -> Result<Vec<Observation>, InterferenceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| InterferenceError::Csv(e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| InterferenceError::Csv(format!("missing column `{name}`")))
    };
    let idx = [
        col("C")?,
        col("G2G")?,
        col("C2G")?,
        col("G2C")?,
        col("total")?,
    ];
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| InterferenceError::Csv(e.to_string()))?;
        let mut v = [0.0; 5];
        for (slot, &i) in v.iter_mut().zip(&idx) {
            let field = rec.get(i).unwrap_or("");
            *slot = field.parse().map_err(|_| {
                InterferenceError::Csv(format!("row {}: bad number `{field}`", line + 1))
            })?;
        }
        out.push(Observation {
            channels: ChannelVector::new(v[0], v[1], v[2], v[3]),
            total: v[4],
        });
    }
    Ok(out)
}

pub fn write_observations<W: std::io::Write>(
    writer: W,
    obs: &[Observation],
) -> Result<(), InterferenceError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["C", "G2G", "C2G", "G2C", "total"])
        .map_err(|e| InterferenceError::Csv(e.to_string()))?;
    for o in obs {
        let c = o.channels;
        w.write_record([c.c, c.g2g, c.c2g, c.g2c, o.total].map(|v| format!("{v:?}")))
            .map_err(|e| InterferenceError::Csv(e.to_string()))?;
    }
    w.flush()
        .map_err(|e| InterferenceError::Csv(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_params(c: f64, g: f64) -> InterferenceParams {
        let mut p = InterferenceParams::unit();
        p.set_factors("C+G2G", &[c, g]).unwrap();
        p
    }

    /// Literal transcription of the published pseudocode, used as an
    /// oracle: stacked features, masks and factors indexed per level.
    fn reference(v: &ChannelVector, p: &InterferenceParams) -> f64 {
        let mut x = v.as_array();
        let mut t = 0.0;
        for n in (2..=4usize).rev() {
            let combos: Vec<Vec<usize>> = combinations(4, n);
            for ids in combos {
                let live: Vec<usize> = (0..4).filter(|&j| x[j] != 0.0).collect();
                if live != ids {
                    continue;
                }
                let name = ids
                    .iter()
                    .map(|&j| CHANNELS[j])
                    .collect::<Vec<_>>()
                    .join("+");
                let f = p.factors(&name).unwrap();
                let scaled: Vec<f64> = ids.iter().zip(&f).map(|(&j, fj)| x[j] * fj).collect();
                let overlap = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
                for ((&j, s), fj) in ids.iter().zip(&scaled).zip(&f) {
                    x[j] = (s - overlap) / fj;
                }
                t += overlap;
            }
        }
        t + x.iter().sum::<f64>()
    }

    fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
        fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for i in start..n {
                cur.push(i);
                go(i + 1, n, k, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        go(0, n, k, &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn single_channel_passes_through() {
        let p = InterferenceParams::default();
        assert_eq!(p.predict(&ChannelVector::compute(10.0)), 10.0);
        assert_eq!(p.predict(&ChannelVector::new(0.0, 0.0, 3.5, 0.0)), 3.5);
        assert_eq!(p.predict(&ChannelVector::default()), 0.0);
    }

    #[test]
    fn hand_traced_pair() {
        // scaled (12, 6), overlap 6, residues (5, 0)
        let p = pair_params(1.2, 1.5);
        let v = ChannelVector::new(10.0, 4.0, 0.0, 0.0);
        assert!((p.predict(&v) - 11.0).abs() < 1e-12);
        assert_eq!(p.predict(&v), reference(&v, &p));
    }

    #[test]
    fn unit_factors_give_max_on_integer_grid() {
        let p = InterferenceParams::unit();
        for a in 0..6 {
            for b in 0..6 {
                for c in 0..6 {
                    for d in 0..6 {
                        let v = ChannelVector::new(a as f64, b as f64, c as f64, d as f64);
                        assert_eq!(p.predict(&v), v.max());
                    }
                }
            }
        }
    }

    #[test]
    fn subset_order_is_lexicographic() {
        let names: Vec<String> = SUBSETS.iter().map(|&m| subset_name(m)).collect();
        assert_eq!(
            names,
            [
                "C+G2G+C2G+G2C",
                "C+G2G+C2G",
                "C+G2G+G2C",
                "C+C2G+G2C",
                "G2G+C2G+G2C",
                "C+G2G",
                "C+C2G",
                "C+G2C",
                "G2G+C2G",
                "G2G+G2C",
                "C2G+G2C"
            ]
        );
    }

    #[test]
    fn params_file_round_trip_and_validation() {
        let p = InterferenceParams::default();
        let back = InterferenceParams::from_toml(&p.to_toml()).unwrap();
        assert_eq!(back, p);
        let mut map = p.to_map();
        map.insert("C+G2G".into(), vec![0.9, 1.0]);
        assert!(matches!(
            InterferenceParams::from_map(&map),
            Err(InterferenceError::BadFactor { .. })
        ));
        let mut map = p.to_map();
        map.remove("C2G+G2C");
        assert!(matches!(
            InterferenceParams::from_map(&map),
            Err(InterferenceError::MissingSubset(_))
        ));
        let mut map = p.to_map();
        map.insert("C+C".into(), vec![1.0, 1.0]);
        assert!(InterferenceParams::from_map(&map).is_err());
    }

    #[test]
    fn fit_rejects_bad_input() {
        let p = InterferenceParams::default();
        let o = FitOptions::default();
        assert!(matches!(
            fit_params(&[], &p, &o),
            Err(InterferenceError::NoObservations)
        ));
        let bad = Observation {
            channels: ChannelVector::default(),
            total: 1.0,
        };
        assert!(matches!(
            fit_params(&[bad], &p, &o),
            Err(InterferenceError::BadObservation { .. })
        ));
    }

    #[test]
    fn isolated_runs_leave_init_unchanged() {
        let init = InterferenceParams::default();
        let obs: Vec<Observation> = (1..20)
            .map(|i| {
                let mut a = [0.0; 4];
                a[i % 4] = i as f64;
                Observation {
                    channels: ChannelVector::from_array(a),
                    total: i as f64 * 1.1,
                }
            })
            .collect();
        let r = fit_params(&obs, &init, &FitOptions::default()).unwrap();
        assert_eq!(r.params, init);
        assert_eq!(r.loss, r.initial_loss);
    }

    #[test]
    fn csv_round_trip() {
        let obs = vec![
            Observation {
                channels: ChannelVector::new(1.0, 2.0, 0.0, 0.5),
                total: 2.5,
            },
            Observation {
                channels: ChannelVector::compute(3.0),
                total: 3.0,
            },
        ];
        let mut buf = Vec::new();
        write_observations(&mut buf, &obs).unwrap();
        assert_eq!(read_observations(buf.as_slice()).unwrap(), obs);
        let err = read_observations("C,G2G,total\n1,2,3\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("C2G"));
        assert!(read_observations("C,G2G,C2G,G2C,total\n1,x,0,0,1\n".as_bytes()).is_err());
    }

    fn factor() -> impl Strategy<Value = f64> {
        1.0f64..2.0
    }

    fn params() -> impl Strategy<Value = InterferenceParams> {
        proptest::collection::vec(factor(), 28).prop_map(|fs| {
            let mut p = InterferenceParams::unit();
            let mut it = fs.into_iter();
            for k in 0..11 {
                for j in members(SUBSETS[k]) {
                    p.factors[k][j] = it.next().unwrap();
                }
            }
            p
        })
    }

    fn channel() -> impl Strategy<Value = f64> {
        prop_oneof![Just(0.0), 0.0f64..100.0]
    }

    fn vector() -> impl Strategy<Value = ChannelVector> {
        (channel(), channel(), channel(), channel())
            .prop_map(|(a, b, c, d)| ChannelVector::new(a, b, c, d))
    }

    proptest! {
        #[test]
        fn matches_reference_and_batch(p in params(), vs in proptest::collection::vec(vector(), 1..40)) {
            let batch = pred_intf(&vs, &p);
            for (v, got) in vs.iter().zip(&batch) {
                prop_assert_eq!(got.to_bits(), p.predict(v).to_bits());
                let r = reference(v, &p);
                prop_assert!((r - got).abs() <= 1e-9 * r.max(1.0));
            }
        }

        #[test]
        fn bounded_by_max_and_scaled_sum(p in params(), v in vector()) {
            let pred = p.predict(&v);
            let cap = p.max_factor_per_channel();
            let upper: f64 = v.as_array().iter().zip(cap).map(|(x, f)| x * f).sum();
            prop_assert!(pred >= v.max() * (1.0 - 1e-12));
            prop_assert!(pred <= upper * (1.0 + 1e-12));
        }

        #[test]
        fn monotone_under_default_params(v in vector(), j in 0usize..4, bump in 0.0f64..50.0) {
            let p = InterferenceParams::default();
            let mut a = v.as_array();
            a[j] += bump;
            let hi = p.predict(&ChannelVector::from_array(a));
            prop_assert!(hi >= p.predict(&v) * (1.0 - 1e-12));
        }
    }
}
