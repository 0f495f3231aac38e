//! Synthetic long multivariate series with planted motifs and large gaps,
//! plus standardization, encoding and the on-disk JSONL format.
//!
//! Label rule: a series is positive iff the designated motif occurs, fully
//! observed, with every step inside the designated region. Negatives carry
//! confounders: the motif outside the region, or a truncated motif inside
//! the region that runs into a gap. Carrying values forward across that gap
//! makes the truncated motif look complete, while zero-encoding keeps the gap
//! visible.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sehm_autodiff::Tensor;

use crate::error::{config_err, Result, SehmError};
use crate::rng;

/// A short multivariate pattern in units of each variable's background scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    pub name: String,
    pub variables: Vec<usize>,
    /// `length × variables.len()`, row-major.
    pub pattern: Vec<f64>,
}

impl Motif {
    pub fn len(&self) -> usize {
        self.pattern.len() / self.variables.len().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.pattern.is_empty()
    }

    fn value(&self, step: usize, k: usize) -> f64 {
        self.pattern[step * self.variables.len() + k]
    }

    /// Plateau shifted up on the first variable and down on the second.
    pub fn plateau(name: &str, vars: [usize; 2], len: usize, amplitude: f64) -> Self {
        Self {
            name: name.into(),
            variables: vars.to_vec(),
            pattern: (0..len).flat_map(|_| [amplitude, -amplitude]).collect(),
        }
    }

    /// Opposite ramps on two variables.
    pub fn ramp(name: &str, vars: [usize; 2], len: usize, amplitude: f64) -> Self {
        let denom = (len.max(2) - 1) as f64;
        Self {
            name: name.into(),
            variables: vars.to_vec(),
            pattern: (0..len)
                .flat_map(|i| {
                    let s = amplitude * (2.0 * i as f64 / denom - 1.0);
                    [s, -s]
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub length: usize,
    pub vars: usize,
    pub seed: u64,
    /// Target fraction of positives.
    pub positive_rate: f64,
    /// Observation noise in units of each variable's scale, added after labeling.
    pub noise: f64,
    /// Random gaps per variable, inclusive range.
    pub gap_count: [usize; 2],
    /// Gap lengths, inclusive range.
    pub gap_length: [usize; 2],
    pub motifs: Vec<Motif>,
    /// Index into `motifs` of the motif that defines the label.
    pub label_motif: usize,
    /// `[start, end)` steps a label motif must fall inside.
    pub region: [usize; 2],
    /// Probability that a negative carries the full motif outside the region.
    pub decoy_outside: f64,
    /// Probability that a negative carries a truncated motif inside the region,
    /// followed by a gap.
    pub decoy_truncated: f64,
    /// Probability that a positive's motif is followed by a gap.
    pub gap_after_motif: f64,
    /// Probability that each non-label motif is planted somewhere, any class.
    pub distractor_rate: f64,
    /// AR(1) coefficient of the background.
    pub ar_coefficient: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            samples: 2000,
            length: 600,
            vars: 8,
            seed: 1,
            positive_rate: 0.5,
            noise: 0.0,
            gap_count: [0, 2],
            gap_length: [20, 120],
            motifs: vec![
                Motif::plateau("plateau", [0, 1], 12, 5.0),
                Motif::ramp("ramp", [2, 3], 16, 5.0),
            ],
            label_motif: 0,
            region: [60, 300],
            decoy_outside: 0.0,
            decoy_truncated: 0.0,
            gap_after_motif: 0.3,
            distractor_rate: 0.5,
            ar_coefficient: 0.9,
        }
    }
}

impl SyntheticSpec {
    /// A task where the handling of gaps decides the label: half the
    /// negatives carry a truncated motif followed by a gap, and most
    /// positives have a gap right after the full motif. Carrying the last
    /// observation forward stretches both into long plateaus.
    pub fn gap_bearing() -> Self {
        Self {
            decoy_truncated: 0.5,
            gap_after_motif: 0.6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.length == 0 || self.vars == 0 {
            return config_err("synthetic spec needs positive samples, length and vars");
        }
        let positives = self.positive_count();
        if !(0.0..=1.0).contains(&self.positive_rate) || positives == 0 || positives == self.samples {
            return config_err(format!(
                "positive rate {} gives {positives} positives out of {}; both classes are required",
                self.positive_rate, self.samples
            ));
        }
        let [lo, hi] = self.gap_length;
        if lo == 0 || lo > hi || hi > self.length {
            return config_err(format!("gap length range [{lo}, {hi}] must lie within [1, {}]", self.length));
        }
        if self.gap_count[0] > self.gap_count[1] {
            return config_err("gap count range is reversed");
        }
        let motif = self
            .motifs
            .get(self.label_motif)
            .ok_or_else(|| SehmError::Config("label motif index out of range".into()))?;
        for m in &self.motifs {
            if m.variables.is_empty() || m.pattern.len() % m.variables.len() != 0 || m.is_empty() {
                return config_err(format!("motif '{}' has an inconsistent pattern", m.name));
            }
            if m.len() >= self.length {
                return config_err(format!("motif '{}' is not shorter than the series", m.name));
            }
            if let Some(&v) = m.variables.iter().find(|&&v| v >= self.vars) {
                return config_err(format!("motif '{}' uses variable {v} of {}", m.name, self.vars));
            }
        }
        let [start, end] = self.region;
        if end > self.length || start >= end || end - start < motif.len() {
            return config_err(format!("region [{start}, {end}) cannot hold the label motif"));
        }
        if start < motif.len() && self.length - end < motif.len() && self.decoy_outside > 0.0 {
            return config_err("no room outside the region for decoy motifs");
        }
        for (name, p) in [
            ("decoy_outside", self.decoy_outside),
            ("decoy_truncated", self.decoy_truncated),
            ("gap_after_motif", self.gap_after_motif),
            ("distractor_rate", self.distractor_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return config_err(format!("{name} must be a probability, got {p}"));
            }
        }
        if self.decoy_outside + self.decoy_truncated > 1.0 {
            return config_err("decoy probabilities sum above 1");
        }
        if !(self.ar_coefficient.abs() < 1.0) || !(self.noise >= 0.0) {
            return config_err("AR coefficient must lie in (-1, 1) and noise must be non-negative");
        }
        Ok(())
    }

    pub fn positive_count(&self) -> usize {
        (self.samples as f64 * self.positive_rate).round() as usize
    }

    fn baseline(&self, d: usize) -> (f64, f64) {
        (50.0 + 10.0 * d as f64, 5.0 + d as f64)
    }
}

/// One series; missing cells are `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub length: usize,
    pub vars: usize,
    /// `length × vars`, row-major, `NaN` where missing.
    pub values: Vec<f64>,
    pub label: u8,
}

impl Sample {
    pub fn observed(&self) -> Vec<bool> {
        self.values.iter().map(|v| !v.is_nan()).collect()
    }

    pub fn get(&self, t: usize, d: usize) -> Option<f64> {
        let v = self.values[t * self.vars + d];
        (!v.is_nan()).then_some(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| f64::from(s.label)).collect()
    }

    /// Common `(length, vars)` of all samples.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let first = self.samples.first().ok_or_else(|| SehmError::Data("dataset is empty".into()))?;
        if self.samples.iter().any(|s| s.length != first.length || s.vars != first.vars) {
            return Err(SehmError::Data("samples differ in length or variable count".into()));
        }
        Ok((first.length, first.vars))
    }
}

/// Cells overwritten by planted motifs; gaps must not touch them.
struct Protected(Vec<bool>);

impl Protected {
    fn overlaps(&self, vars: usize, d: usize, start: usize, len: usize) -> bool {
        (start..start + len).any(|t| self.0[t * vars + d])
    }
}

/// Generates a dataset; deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let positives = spec.positive_count();
    let mut labels: Vec<u8> = (0..spec.samples).map(|i| u8::from(i < positives)).collect();
    labels.shuffle(&mut rng);
    let samples = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut srng = rng::seeded(rng::derive(spec.seed, 1000 + i as u64));
            generate_one(spec, label, format!("s{i:05}"), &mut srng)
        })
        .collect();
    Ok(Dataset { samples })
}

fn generate_one(spec: &SyntheticSpec, label: u8, id: String, rng: &mut rng::Rng) -> Sample {
    let (t_len, dv) = (spec.length, spec.vars);
    let phi = spec.ar_coefficient;
    let innov = (1.0 - phi * phi).sqrt();
    // Background in standardized units.
    let mut s = vec![0.0; t_len * dv];
    for d in 0..dv {
        let mut prev: f64 = rng.sample(rand_distr::StandardNormal);
        for t in 0..t_len {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            prev = phi * prev + innov * e;
            s[t * dv + d] = prev;
        }
    }
    let mut protected = Protected(vec![false; t_len * dv]);
    let mut missing = vec![false; t_len * dv];
    let motif = &spec.motifs[spec.label_motif];
    let m = motif.len();
    let [r0, r1] = spec.region;

    let plant = |s: &mut [f64], prot: &mut Protected, motif: &Motif, start: usize, steps: usize| {
        for step in 0..steps {
            for (k, &d) in motif.variables.iter().enumerate() {
                s[(start + step) * dv + d] = motif.value(step, k);
                prot.0[(start + step) * dv + d] = true;
            }
        }
    };
    let gap_after = |missing: &mut [bool], prot: &Protected, rng: &mut rng::Rng, motif: &Motif, after: usize| {
        if after >= t_len {
            return;
        }
        let len = rng.random_range(spec.gap_length[0]..=spec.gap_length[1]).min(t_len - after);
        for &d in &motif.variables {
            for t in after..after + len {
                if !prot.0[t * dv + d] {
                    missing[t * dv + d] = true;
                }
            }
        }
    };

    if label == 1 {
        let start = rng.random_range(r0..=r1 - m);
        plant(&mut s, &mut protected, motif, start, m);
        if rng.random::<f64>() < spec.gap_after_motif {
            gap_after(&mut missing, &protected, rng, motif, start + m);
        }
    } else {
        let u: f64 = rng.random();
        if u < spec.decoy_outside {
            let mut options = Vec::new();
            if r0 >= m {
                options.push((0, r0 - m));
            }
            if t_len - r1 >= m {
                options.push((r1, t_len - m));
            }
            if let Some(&(lo, hi)) = options.choose(rng) {
                let start = rng.random_range(lo..=hi);
                plant(&mut s, &mut protected, motif, start, m);
            }
        } else if u < spec.decoy_outside + spec.decoy_truncated {
            let keep = rng.random_range((m / 4).max(1)..=(m / 2).max(1));
            let start = rng.random_range(r0..=r1 - m);
            plant(&mut s, &mut protected, motif, start, keep);
            gap_after(&mut missing, &protected, rng, motif, start + keep);
        }
    }
    for (k, other) in spec.motifs.iter().enumerate() {
        if k == spec.label_motif || rng.random::<f64>() >= spec.distractor_rate {
            continue;
        }
        let len = other.len();
        for _ in 0..20 {
            let start = rng.random_range(0..=t_len - len);
            let clash = other
                .variables
                .iter()
                .any(|&d| protected.overlaps(dv, d, start, len));
            if !clash {
                plant(&mut s, &mut protected, other, start, len);
                break;
            }
        }
    }
    for d in 0..dv {
        let count = rng.random_range(spec.gap_count[0]..=spec.gap_count[1]);
        for _ in 0..count {
            let len = rng.random_range(spec.gap_length[0]..=spec.gap_length[1]);
            for _ in 0..20 {
                let start = rng.random_range(0..=t_len - len);
                if !protected.overlaps(dv, d, start, len) {
                    for t in start..start + len {
                        missing[t * dv + d] = true;
                    }
                    break;
                }
            }
        }
    }
    let mut values = vec![0.0; t_len * dv];
    for t in 0..t_len {
        for d in 0..dv {
            let i = t * dv + d;
            if missing[i] {
                values[i] = f64::NAN;
                continue;
            }
            let (base, scale) = spec.baseline(d);
            let mut v = s[i];
            if spec.noise > 0.0 {
                v += spec.noise * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            values[i] = base + scale * v;
        }
    }
    Sample {
        id,
        length: t_len,
        vars: dv,
        values,
        label,
    }
}

/// 1 if the label motif appears fully observed and exact inside the region.
///
/// This is the generator's own rule applied to a sample, so on noiseless
/// data it classifies perfectly.
pub fn motif_match_score(sample: &Sample, spec: &SyntheticSpec) -> f64 {
    let motif = &spec.motifs[spec.label_motif];
    let m = motif.len();
    let [r0, r1] = spec.region;
    let hit = (r0..=r1.saturating_sub(m)).any(|start| {
        (0..m).all(|step| {
            motif.variables.iter().enumerate().all(|(k, &d)| {
                let (base, scale) = spec.baseline(d);
                sample
                    .get(start + step, d)
                    .is_some_and(|v| (v - (base + scale * motif.value(step, k))).abs() < 1e-9)
            })
        })
    });
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Per-variable mean and standard deviation of observed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &Dataset, indices: &[usize]) -> Result<Self> {
        let (_, dv) = data.dims()?;
        let mut sum = vec![0.0; dv];
        let mut sq = vec![0.0; dv];
        let mut count = vec![0usize; dv];
        for &i in indices {
            let s = &data.samples[i];
            for (k, v) in s.values.iter().enumerate() {
                if !v.is_nan() {
                    let d = k % dv;
                    sum[d] += v;
                    sq[d] += v * v;
                    count[d] += 1;
                }
            }
        }
        let mut mean = vec![0.0; dv];
        let mut std = vec![1.0; dv];
        for d in 0..dv {
            if count[d] > 0 {
                let n = count[d] as f64;
                mean[d] = sum[d] / n;
                let var = (sq[d] / n - mean[d] * mean[d]).max(0.0);
                std[d] = if var > 1e-24 { var.sqrt() } else { 1.0 };
            }
        }
        Ok(Self { mean, std })
    }
}

/// Turns one sample into model input `T × D`.
///
/// Observed values are standardized. With zero-encoding, missing cells are
/// 0. Otherwise the last observation is carried forward. Leading gaps take
/// the first observation. A variable that is never observed stays at 0.
pub fn encode_sample(sample: &Sample, st: &Standardizer, zero_encoding: bool) -> Vec<f64> {
    let (t_len, dv) = (sample.length, sample.vars);
    let mut out = vec![0.0; t_len * dv];
    for d in 0..dv {
        let mut last: Option<f64> = None;
        let mut leading = 0;
        for t in 0..t_len {
            let i = t * dv + d;
            match sample.get(t, d) {
                Some(v) => {
                    let z = (v - st.mean[d]) / st.std[d];
                    out[i] = z;
                    if last.is_none() && !zero_encoding {
                        for tt in 0..leading {
                            out[tt * dv + d] = z;
                        }
                    }
                    last = Some(z);
                }
                None => {
                    if zero_encoding {
                        out[i] = 0.0;
                    } else if let Some(z) = last {
                        out[i] = z;
                    } else {
                        leading += 1;
                    }
                }
            }
        }
    }
    out
}

/// Encoded inputs ready for batching.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSet {
    pub length: usize,
    pub padded: usize,
    pub vars: usize,
    /// Per sample, `padded × vars`, zero past `length`.
    pub inputs: Vec<Vec<f64>>,
    pub observed: Vec<Vec<bool>>,
    pub labels: Vec<f64>,
    pub ids: Vec<String>,
}

impl EncodedSet {
    pub fn new(
        data: &Dataset,
        indices: &[usize],
        st: &Standardizer,
        zero_encoding: bool,
        padded: usize,
    ) -> Result<Self> {
        let (length, vars) = data.dims()?;
        if padded < length {
            return config_err("padded length shorter than the series");
        }
        let mut inputs = Vec::with_capacity(indices.len());
        let mut observed = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &data.samples[i];
            let mut x = encode_sample(s, st, zero_encoding);
            x.resize(padded * vars, 0.0);
            inputs.push(x);
            observed.push(s.observed());
            labels.push(f64::from(s.label));
            ids.push(s.id.clone());
        }
        Ok(Self {
            length,
            padded,
            vars,
            inputs,
            observed,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// `[B, padded, vars]` batch of the given rows.
    pub fn batch(&self, rows: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * self.padded * self.vars);
        for &r in rows {
            data.extend_from_slice(&self.inputs[r]);
        }
        Ok(Tensor::new(vec![rows.len(), self.padded, self.vars], data)?)
    }

    /// Unpadded `T × D` input of one row.
    pub fn series(&self, row: usize) -> Result<Tensor> {
        Ok(Tensor::new(
            vec![self.length, self.vars],
            self.inputs[row][..self.length * self.vars].to_vec(),
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// 75% train / 25% test; 10% of the training part is held out for validation.
pub fn split_indices(n: usize, seed: u64) -> Result<Split> {
    if n < 8 {
        return config_err(format!("need at least 8 samples to split, got {n}"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let n_test = ((n as f64) * 0.25).round() as usize;
    let (test, rest) = idx.split_at(n_test);
    let n_val = ((rest.len() as f64) * 0.1).round().max(1.0) as usize;
    let (validation, train) = rest.split_at(n_val);
    Ok(Split {
        train: train.to_vec(),
        validation: validation.to_vec(),
        test: test.to_vec(),
    })
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    label: u8,
    values: Vec<Vec<Option<f64>>>,
}

pub fn write_jsonl(data: &Dataset, w: impl Write) -> Result<()> {
    let mut w = BufWriter::new(w);
    for s in &data.samples {
        let values = s
            .values
            .chunks(s.vars)
            .map(|row| row.iter().map(|&v| (!v.is_nan()).then_some(v)).collect())
            .collect();
        let rec = Record {
            id: s.id.clone(),
            label: s.label,
            values,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(r: impl Read) -> Result<Dataset> {
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| SehmError::Data(format!("line {}: {e}", lineno + 1)))?;
        let length = rec.values.len();
        let vars = rec.values.first().map_or(0, Vec::len);
        if length == 0 || vars == 0 || rec.values.iter().any(|r| r.len() != vars) {
            return Err(SehmError::Data(format!("line {}: ragged or empty value grid", lineno + 1)));
        }
        if rec.label > 1 {
            return Err(SehmError::Data(format!("line {}: label must be 0 or 1", lineno + 1)));
        }
        let values = rec.values.into_iter().flatten().map(|v| v.unwrap_or(f64::NAN)).collect();
        samples.push(Sample {
            id: rec.id,
            length,
            vars,
            values,
            label: rec.label,
        });
    }
    let data = Dataset { samples };
    data.dims()?;
    Ok(data)
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    write_jsonl(data, std::fs::File::create(path)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_jsonl(std::fs::File::open(path)?)
}
