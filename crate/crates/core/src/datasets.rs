//! Labelled datasets, the synthetic region benchmark, JSON-lines I/O and
//! splitting.
//!
//! Class labels are 1-based everywhere (in memory and on disk).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distillation::TeacherPredictions;
use crate::error::{Error, Result};
use crate::numerics::{validate_probabilities, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: u64,
    pub features: Vec<f64>,
    /// Class label in `1..=num_classes`.
    pub label: usize,
    /// Region tag (synthetic benchmarks only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<u32>,
}

/// A non-empty, internally consistent collection of instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    num_classes: usize,
    feature_dim: usize,
    instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        feature_dim: usize,
        instances: Vec<Instance>,
    ) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::Schema("dataset must be non-empty".into()));
        }
        if num_classes < 2 {
            return Err(Error::Schema(format!(
                "need at least two classes, got {num_classes}"
            )));
        }
        let mut seen = HashSet::with_capacity(instances.len());
        for inst in &instances {
            if !seen.insert(inst.id) {
                return Err(Error::Schema(format!("duplicate instance id {}", inst.id)));
            }
            if inst.features.len() != feature_dim {
                return Err(Error::Schema(format!(
                    "instance {} has {} features, expected {feature_dim}",
                    inst.id,
                    inst.features.len()
                )));
            }
            if inst.label == 0 || inst.label > num_classes {
                return Err(Error::Schema(format!(
                    "instance {} has label {} outside 1..={num_classes}",
                    inst.id, inst.label
                )));
            }
            if inst.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::Schema(format!(
                    "instance {} has a non-finite feature",
                    inst.id
                )));
            }
        }
        Ok(Dataset {
            name: name.into(),
            num_classes,
            feature_dim,
            instances,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.instances.iter().map(|i| i.id)
    }

    /// Distinct region tags in ascending order.
    pub fn regions(&self) -> Vec<u32> {
        self.instances
            .iter()
            .filter_map(|i| i.region)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Copy of the dataset keeping the instances at `indices`, in that order.
    pub fn select(&self, name: impl Into<String>, indices: &[usize]) -> Result<Dataset> {
        let instances = indices
            .iter()
            .map(|&i| {
                self.instances
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(name, self.num_classes, self.feature_dim, instances)
    }

    /// Copy with labels replaced instance by instance.
    pub fn with_labels(&self, mut relabel: impl FnMut(&Instance) -> usize) -> Result<Dataset> {
        let instances = self
            .instances
            .iter()
            .map(|inst| Instance {
                label: relabel(inst),
                ..inst.clone()
            })
            .collect();
        Dataset::new(self.name.clone(), self.num_classes, self.feature_dim, instances)
    }
}

/// Fractions for a train/dev/test partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fractions = [self.train, self.dev, self.test];
        if fractions.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::invalid("split fractions must be positive"));
        }
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split fractions sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Shuffled three-way partition of `dataset`.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let n = dataset.len();
    let n_train = (spec.train * n as f64).round() as usize;
    let n_dev = (spec.dev * n as f64).round() as usize;
    if n_train == 0 || n_dev == 0 || n_train + n_dev >= n {
        return Err(Error::invalid(format!(
            "split of {n} instances leaves an empty part"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(spec.seed, "split").shuffle(&mut order);
    let base = dataset.name();
    Ok((
        dataset.select(format!("{base}-train"), &order[..n_train])?,
        dataset.select(format!("{base}-dev"), &order[n_train..n_train + n_dev])?,
        dataset.select(format!("{base}-test"), &order[n_train + n_dev..])?,
    ))
}

fn default_feature_dim() -> usize {
    8
}
fn default_cluster_std() -> f64 {
    0.4
}
fn default_class_offset() -> f64 {
    1.0
}
fn default_region_radius() -> f64 {
    4.5
}

/// Parameters of the region benchmark.
///
/// Each of `num_regions` regions sits on a circle of radius `region_radius`
/// in the first two feature dimensions. Inside a region the `num_classes`
/// class clusters sit at distance `class_offset` from the region center, and
/// their arrangement is rotated by a quarter turn from one region to the
/// next, so no single linear rule separates the classes globally. The
/// remaining `feature_dim - 2` dimensions are standard-normal distractors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadrantSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub num_classes: usize,
    pub num_regions: usize,
    pub label_noise: f64,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_cluster_std")]
    pub cluster_std: f64,
    #[serde(default = "default_class_offset")]
    pub class_offset: f64,
    #[serde(default = "default_region_radius")]
    pub region_radius: f64,
}

impl QuadrantSpec {
    pub fn new(seed: u64, counts: (usize, usize, usize), num_classes: usize, num_regions: usize, label_noise: f64) -> Self {
        QuadrantSpec {
            seed,
            n_train: counts.0,
            n_dev: counts.1,
            n_test: counts.2,
            num_classes,
            num_regions,
            label_noise,
            feature_dim: default_feature_dim(),
            cluster_std: default_cluster_std(),
            class_offset: default_class_offset(),
            region_radius: default_region_radius(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.num_regions < 2 {
            return Err(Error::invalid("need at least 2 regions"));
        }
        let min = self.num_classes * self.num_regions;
        for (name, n) in [("train", self.n_train), ("dev", self.n_dev), ("test", self.n_test)] {
            if n < min {
                return Err(Error::invalid(format!(
                    "{name} count {n} below classes x regions = {min}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::invalid(format!(
                "label noise {} outside [0, 1)",
                self.label_noise
            )));
        }
        if self.feature_dim < 2 {
            return Err(Error::invalid("feature_dim must be at least 2"));
        }
        if !(self.cluster_std > 0.0) {
            return Err(Error::invalid("cluster_std must be positive"));
        }
        Ok(())
    }

    /// Raw (unstandardized) center of the cluster for `class` (1-based) in
    /// `region` (1-based).
    pub fn cluster_center(&self, region: u32, class: usize) -> [f64; 2] {
        use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, TAU};
        let r = (region - 1) as f64;
        let region_angle = TAU * r / self.num_regions as f64 + FRAC_PI_4;
        let cx = self.region_radius * region_angle.cos();
        let cy = self.region_radius * region_angle.sin();
        let class_angle = TAU * (class - 1) as f64 / self.num_classes as f64 + FRAC_PI_2 * r;
        [
            cx + self.class_offset * class_angle.cos(),
            cy + self.class_offset * class_angle.sin(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

/// Generates the three splits of the region benchmark.
///
/// Geometry and label noise draw from separate streams, so the same seed
/// with a different noise level yields the same points.
pub fn generate_quadrant_benchmark(spec: &QuadrantSpec) -> Result<Benchmark> {
    spec.validate()?;
    let root = SeededRng::new(spec.seed, "quadrant");
    let mut next_id = 0u64;
    let mut raw = Vec::with_capacity(3);
    for (name, n) in [("train", spec.n_train), ("dev", spec.n_dev), ("test", spec.n_test)] {
        let mut geometry = root.stream(&format!("{name}/geometry"));
        let mut noise = root.stream(&format!("{name}/noise"));
        let mut order = root.stream(&format!("{name}/order"));
        let mut instances = Vec::with_capacity(n);
        for i in 0..n {
            let region = (i % spec.num_regions) as u32 + 1;
            let class = (i / spec.num_regions) % spec.num_classes + 1;
            let center = spec.cluster_center(region, class);
            let mut features = Vec::with_capacity(spec.feature_dim);
            features.push(center[0] + spec.cluster_std * geometry.normal());
            features.push(center[1] + spec.cluster_std * geometry.normal());
            for _ in 2..spec.feature_dim {
                features.push(geometry.normal());
            }
            let flip = noise.uniform() < spec.label_noise;
            let other = noise.below(spec.num_classes - 1) + 1;
            let label = if flip {
                // uniform over the other classes
                if other >= class {
                    other + 1
                } else {
                    other
                }
            } else {
                class
            };
            instances.push(Instance {
                id: 0,
                features,
                label,
                region: Some(region),
            });
        }
        order.shuffle(&mut instances);
        for inst in &mut instances {
            inst.id = next_id;
            next_id += 1;
        }
        raw.push((name, instances));
    }

    let (mean, std) = feature_moments(&raw[0].1, spec.feature_dim);
    let mut splits = raw.into_iter().map(|(name, mut instances)| {
        for inst in &mut instances {
            for (j, x) in inst.features.iter_mut().enumerate() {
                *x = (*x - mean[j]) / std[j];
            }
        }
        Dataset::new(
            format!("quadrant-{name}"),
            spec.num_classes,
            spec.feature_dim,
            instances,
        )
    });
    Ok(Benchmark {
        train: splits.next().unwrap()?,
        dev: splits.next().unwrap()?,
        test: splits.next().unwrap()?,
    })
}

fn feature_moments(instances: &[Instance], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = instances.len() as f64;
    let mut mean = vec![0.0; dim];
    for inst in instances {
        for (m, x) in mean.iter_mut().zip(&inst.features) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; dim];
    for inst in instances {
        for ((v, x), m) in var.iter_mut().zip(&inst.features).zip(&mean) {
            *v += (x - m).powi(2) / n;
        }
    }
    let std = var
        .into_iter()
        .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, std)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    num_classes: usize,
    feature_dim: usize,
    name: String,
}

pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = DatasetHeader {
        num_classes: dataset.num_classes,
        feature_dim: dataset.feature_dim,
        name: dataset.name.clone(),
    };
    let mut write_line = |line: String| writeln!(out, "{line}").map_err(|e| Error::io(path, e));
    write_line(serde_json::to_string(&header)?)?;
    for inst in &dataset.instances {
        write_line(serde_json::to_string(inst)?)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    id: u64,
    features: Vec<f64>,
    label: usize,
    #[serde(default)]
    region: Option<u32>,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    Ok(lines)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let lines = read_lines(path.as_ref())?;
    let mut iter = lines.into_iter();
    let (line_no, first) = iter
        .next()
        .ok_or_else(|| Error::Schema("dataset file is empty".into()))?;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line: line_no,
        detail: format!("bad header: {e}"),
    })?;
    let mut instances = Vec::new();
    for (line_no, text) in iter {
        let rec: InstanceRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: line_no,
            detail: e.to_string(),
        })?;
        if rec.features.len() != header.feature_dim {
            return Err(Error::Schema(format!(
                "line {line_no}: {} features, header says {}",
                rec.features.len(),
                header.feature_dim
            )));
        }
        if rec.label == 0 || rec.label > header.num_classes {
            return Err(Error::Schema(format!(
                "line {line_no}: label {} outside 1..={}",
                rec.label, header.num_classes
            )));
        }
        instances.push(Instance {
            id: rec.id,
            features: rec.features,
            label: rec.label,
            region: rec.region,
        });
    }
    Dataset::new(header.name, header.num_classes, header.feature_dim, instances)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherRowRecord {
    pub id: u64,
    /// 1-based teacher index.
    pub teacher: usize,
    pub probs: Vec<f64>,
}

/// Writes per-(instance, teacher) probability rows for `dataset` (T = 1).
pub fn save_teacher_logits(
    preds: &TeacherPredictions,
    dataset: &Dataset,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for inst in dataset.instances() {
        let view = preds.view(inst.id)?;
        for k in 0..preds.num_teachers() {
            let rec = TeacherRowRecord {
                id: inst.id,
                teacher: k + 1,
                probs: view.hard_row(k).to_vec(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads externally produced teacher probability rows for every instance of
/// `dataset` and `num_teachers` teachers.
///
/// Rows are taken as T = 1 distributions; the softened rows at
/// `temperature` are derived as `p^(1/T)` renormalized, which equals a
/// softmax of `ln p / T`.
pub fn load_teacher_logits(
    path: impl AsRef<Path>,
    dataset: &Dataset,
    num_teachers: usize,
    temperature: f64,
) -> Result<TeacherPredictions> {
    if num_teachers == 0 {
        return Err(Error::invalid("need at least one teacher"));
    }
    let c = dataset.num_classes();
    let known: HashSet<u64> = dataset.ids().collect();
    let mut rows: HashMap<(u64, usize), Vec<f64>> = HashMap::new();
    for (line_no, text) in read_lines(path.as_ref())? {
        let rec: TeacherRowRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: line_no,
            detail: e.to_string(),
        })?;
        if rec.teacher == 0 || rec.teacher > num_teachers {
            return Err(Error::InvalidRow {
                id: rec.id,
                teacher: rec.teacher,
                detail: format!("teacher index outside 1..={num_teachers}"),
            });
        }
        if !known.contains(&rec.id) {
            continue;
        }
        if rec.probs.len() != c {
            return Err(Error::InvalidRow {
                id: rec.id,
                teacher: rec.teacher,
                detail: format!("{} probabilities, expected {c}", rec.probs.len()),
            });
        }
        validate_probabilities(&rec.probs, 1e-6).map_err(|detail| Error::InvalidRow {
            id: rec.id,
            teacher: rec.teacher,
            detail,
        })?;
        if rows.insert((rec.id, rec.teacher - 1), rec.probs).is_some() {
            return Err(Error::InvalidRow {
                id: rec.id,
                teacher: rec.teacher,
                detail: "duplicate row".into(),
            });
        }
    }
    TeacherPredictions::build(dataset, num_teachers, temperature, |inst, k| {
        let row = rows.get(&(inst.id, k)).ok_or_else(|| {
            Error::Coverage(format!(
                "no row for instance {} and teacher {}",
                inst.id,
                k + 1
            ))
        })?;
        Ok(row.clone())
    })
}
