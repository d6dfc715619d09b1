//! Synthetic node-regression data: mixed-type node features pushed through a
//! random teacher GCNN, plus Gaussian label noise.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gcnn::{self, Activation, InitScheme, LayerSpec, ParamSet};
use crate::graph::{build_shift, Graph, ShiftOperator, ShiftVariant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FeatureBlock {
    Uniform { width: usize, low: f64, high: f64 },
    Normal { width: usize, mean: f64, std: f64 },
    Binary { width: usize, p: f64 },
    /// A single categorical feature encoded over `k` columns.
    OneHot { k: usize },
}

impl FeatureBlock {
    pub fn width(&self) -> usize {
        match *self {
            FeatureBlock::Uniform { width, .. }
            | FeatureBlock::Normal { width, .. }
            | FeatureBlock::Binary { width, .. } => width,
            FeatureBlock::OneHot { k } => k,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            FeatureBlock::Uniform { width, low, high } => width > 0 && low < high,
            FeatureBlock::Normal { width, std, .. } => width > 0 && std >= 0.0,
            FeatureBlock::Binary { width, p } => width > 0 && (0.0..=1.0).contains(&p),
            FeatureBlock::OneHot { k } => k > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid feature block {self:?}")))
        }
    }

    fn fill(&self, rng: &mut ChaCha8Rng, row: &mut [f64]) {
        match *self {
            FeatureBlock::Uniform { low, high, .. } => {
                row.iter_mut().for_each(|v| *v = rng.random_range(low..high));
            }
            FeatureBlock::Normal { mean, std, .. } => {
                let d = Normal::new(mean, std).expect("validated std");
                row.iter_mut().for_each(|v| *v = d.sample(rng));
            }
            FeatureBlock::Binary { p, .. } => {
                let d = Bernoulli::new(p).expect("validated p");
                row.iter_mut().for_each(|v| *v = f64::from(u8::from(d.sample(rng))));
            }
            FeatureBlock::OneHot { k } => {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[rng.random_range(0..k)] = 1.0;
            }
        }
    }
}

/// Four uniform, two normal, one binary and a three-way one-hot column: ten
/// features in total.
pub fn default_feature_plan() -> Vec<FeatureBlock> {
    vec![
        FeatureBlock::Uniform {
            width: 4,
            low: 0.0,
            high: 1.0,
        },
        FeatureBlock::Normal {
            width: 2,
            mean: 0.0,
            std: 1.0,
        },
        FeatureBlock::Binary { width: 1, p: 0.5 },
        FeatureBlock::OneHot { k: 3 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub feature_plan: Vec<FeatureBlock>,
    /// Teacher layers; the output width must be 1.
    pub teacher: Vec<LayerSpec>,
    pub teacher_shift: ShiftVariant,
    pub noise_var: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_samples: 1000,
            feature_plan: default_feature_plan(),
            teacher: LayerSpec::chain(&[10, 16, 1], Activation::leaky()),
            teacher_shift: ShiftVariant::NormalizedAdjacency,
            noise_var: 0.01,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn feature_width(&self) -> usize {
        self.feature_plan.iter().map(FeatureBlock::width).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.feature_plan {
            b.validate()?;
        }
        gcnn::validate_specs(&self.teacher)?;
        check_dim("feature plan width", self.teacher[0].g_in, self.feature_width())?;
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::invalid(format!("noise variance must be >= 0, got {}", self.noise_var)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `n × g₀` node features.
    pub features: DMatrix<f64>,
    pub labels: Vec<f64>,
}

impl Sample {
    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_row(&self, i: usize) -> Vec<f64> {
        self.features.row(i).iter().copied().collect()
    }
}

/// A generated dataset together with the teacher that labeled it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub teacher: ParamSet,
    pub samples: Vec<Sample>,
}

/// Draws labeled samples from the teacher on a fixed graph.
#[derive(Debug, Clone)]
pub struct SampleSource {
    spec: DatasetSpec,
    teacher: ParamSet,
    shift: ShiftOperator,
    noise: Normal<f64>,
}

impl SampleSource {
    pub fn new(spec: &DatasetSpec, teacher: ParamSet, graph: &Graph) -> Result<Self> {
        spec.validate()?;
        Ok(SampleSource {
            spec: spec.clone(),
            teacher,
            shift: build_shift(graph, spec.teacher_shift)?,
            noise: Normal::new(0.0, spec.noise_var.sqrt()).map_err(|e| Error::invalid(e.to_string()))?,
        })
    }

    pub fn teacher(&self) -> &ParamSet {
        &self.teacher
    }

    pub fn draw_features(&self, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let n = self.shift.node_count();
        let g0 = self.spec.feature_width();
        let mut x = DMatrix::zeros(n, g0);
        let mut row = vec![0.0; g0];
        for i in 0..n {
            let mut col = 0;
            for block in &self.spec.feature_plan {
                let w = block.width();
                block.fill(rng, &mut row[col..col + w]);
                col += w;
            }
            for (c, v) in row.iter().enumerate() {
                x[(i, c)] = *v;
            }
        }
        x
    }

    /// Noise-free teacher output `Φ(X; ω)`.
    pub fn teacher_output(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        let (y, _) = gcnn::forward(&self.teacher, &self.shift, features)?;
        Ok(y.as_slice().to_vec())
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let features = self.draw_features(rng);
        let mut labels = self.teacher_output(&features)?;
        if self.spec.noise_var > 0.0 {
            labels.iter_mut().for_each(|y| *y += self.noise.sample(rng));
        }
        Ok(Sample { features, labels })
    }
}

/// Teacher weights: standard normal scaled by `1 / sqrt(g_in)`.
pub fn draw_teacher(spec: &DatasetSpec) -> Result<ParamSet> {
    gcnn::init_params(&spec.teacher, InitScheme::ScaledNormal, spec.seed ^ TEACHER_SALT)
}

const TEACHER_SALT: u64 = 0x7eac_4e55;

pub fn make_dataset(graph: &Graph, spec: &DatasetSpec) -> Result<Dataset> {
    let teacher = draw_teacher(spec)?;
    let source = SampleSource::new(spec, teacher.clone(), graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let samples = (0..spec.n_samples)
        .map(|_| source.draw(&mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        teacher,
        samples,
    })
}

/// Shuffled split with `round(fraction · N)` training samples. Both parts
/// must be non-empty.
pub fn train_test_split(samples: &[Sample], fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let n_train = (fraction * samples.len() as f64).round() as usize;
    if n_train == 0 || n_train == samples.len() {
        return Err(Error::invalid(format!(
            "split of {} samples at {fraction} leaves an empty side",
            samples.len()
        )));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |ids: &[usize]| ids.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&idx[..n_train]), pick(&idx[n_train..])))
}

/// Writes `features.csv` (`sample,node,x0..`), `labels.csv`
/// (`sample,node,y`) and `spec.json` into `dir`.
pub fn export_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let g0 = dataset.spec.feature_width();
    let mut fw = csv::Writer::from_path(dir.join("features.csv"))?;
    let mut header = vec!["sample".to_string(), "node".to_string()];
    header.extend((0..g0).map(|c| format!("x{c}")));
    fw.write_record(&header)?;
    let mut lw = csv::Writer::from_path(dir.join("labels.csv"))?;
    lw.write_record(["sample", "node", "y"])?;
    for (b, s) in dataset.samples.iter().enumerate() {
        for i in 0..s.node_count() {
            let mut rec = vec![b.to_string(), i.to_string()];
            rec.extend(s.features.row(i).iter().map(|v| format!("{v:?}")));
            fw.write_record(&rec)?;
            lw.write_record([b.to_string(), i.to_string(), format!("{:?}", s.labels[i])])?;
        }
    }
    fw.flush()?;
    lw.flush()?;
    std::fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&dataset.spec)?)?;
    Ok(())
}

/// Reads a bundle written by [`export_dataset`]. The teacher is redrawn from
/// the stored spec.
pub fn import_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let spec: DatasetSpec = serde_json::from_str(&std::fs::read_to_string(dir.join("spec.json"))?)?;
    spec.validate()?;
    let g0 = spec.feature_width();
    let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad number {s:?}")));
    let parse_idx = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse(format!("bad index {s:?}")));

    let mut rows: Vec<Vec<Vec<f64>>> = Vec::new();
    for rec in csv::Reader::from_path(dir.join("features.csv"))?.records() {
        let rec = rec?;
        check_dim("feature record", g0 + 2, rec.len())?;
        let (b, i) = (parse_idx(&rec[0])?, parse_idx(&rec[1])?);
        if b == rows.len() {
            rows.push(Vec::new());
        }
        if b + 1 != rows.len() || i != rows[b].len() {
            return Err(Error::Parse(format!("features out of order at sample {b}, node {i}")));
        }
        rows[b].push(rec.iter().skip(2).map(parse).collect::<Result<_>>()?);
    }
    let mut labels: Vec<Vec<f64>> = vec![Vec::new(); rows.len()];
    for rec in csv::Reader::from_path(dir.join("labels.csv"))?.records() {
        let rec = rec?;
        check_dim("label record", 3, rec.len())?;
        let (b, i) = (parse_idx(&rec[0])?, parse_idx(&rec[1])?);
        let slot = labels
            .get_mut(b)
            .ok_or_else(|| Error::Parse(format!("label for unknown sample {b}")))?;
        if i != slot.len() {
            return Err(Error::Parse(format!("labels out of order at sample {b}, node {i}")));
        }
        slot.push(parse(&rec[2])?);
    }
    let samples = rows
        .into_iter()
        .zip(labels)
        .map(|(r, y)| {
            check_dim("labels per sample", r.len(), y.len())?;
            let flat: Vec<f64> = r.concat();
            Ok(Sample {
                features: DMatrix::from_row_slice(y.len(), g0, &flat),
                labels: y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let teacher = draw_teacher(&spec)?;
    Ok(Dataset { spec, teacher, samples })
}

/// Random features and standard normal labels, for cost simulations and tests.
pub fn random_samples(n: usize, width: usize, count: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Sample {
            features: DMatrix::from_fn(n, width, |_, _| rng.sample(StandardNormal)),
            labels: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect()
}
