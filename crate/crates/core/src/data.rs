//! Synthetic datasets, CSV ingestion, train/test splitting and label-skewed
//! client partitioning.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{self, Normal, Purpose, NO_CLIENT};

/// Labelled samples with a fixed class count.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    input_dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, input_dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if input_dim == 0 || inputs.len() != input_dim * labels.len() {
            return Err(Error::Config(format!(
                "{} input values do not form {} rows of width {}",
                inputs.len(),
                labels.len(),
                input_dim
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Argument(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("dataset inputs must be finite".into()));
        }
        Ok(Self {
            inputs,
            input_dim,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Gathers the given rows into a new dataset with the same class count.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(inputs, self.input_dim, labels, self.num_classes)
    }

    /// Gathers the given rows into a model batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(inputs, self.input_dim, labels)
    }

    pub fn as_batch(&self) -> Batch {
        Batch::new(self.inputs.clone(), self.input_dim, self.labels.clone())
            .expect("dataset invariants imply a valid batch")
    }
}

/// Gaussian class clusters with unit within-class variance.
///
/// Labels are balanced (`i mod num_classes`) and then shuffled. Class means
/// are `class_separation / sqrt(2)` times distinct axis vectors when
/// `num_classes <= input_dim`, so every pair of means is exactly
/// `class_separation` apart; otherwise they are random unit directions scaled
/// the same way.
pub fn generate_synthetic(
    num_samples: usize,
    num_classes: usize,
    input_dim: usize,
    class_separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || num_samples == 0 {
        return Err(Error::Argument("need at least one class and one sample".into()));
    }
    if num_samples < num_classes {
        return Err(Error::Argument(format!(
            "{num_samples} samples cannot cover {num_classes} classes"
        )));
    }
    if input_dim == 0 {
        return Err(Error::Argument("input dimension must be positive".into()));
    }
    if !(class_separation >= 0.0 && class_separation.is_finite()) {
        return Err(Error::Argument(format!(
            "class separation {class_separation} must be non-negative"
        )));
    }

    let mut normal = Normal::new(rng::stream(seed, Purpose::DataGeneration, NO_CLIENT, 0));
    let radius = class_separation / std::f64::consts::SQRT_2;
    let mut means = vec![0.0; num_classes * input_dim];
    if num_classes <= input_dim {
        for c in 0..num_classes {
            means[c * input_dim + c] = radius;
        }
    } else {
        for c in 0..num_classes {
            let dir: Vec<f64> = (0..input_dim).map(|_| normal.sample()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for (m, d) in means[c * input_dim..(c + 1) * input_dim].iter_mut().zip(&dir) {
                *m = radius * d / norm;
            }
        }
    }

    let mut labels: Vec<usize> = (0..num_samples).map(|i| i % num_classes).collect();
    let mut shuffle_rng = rng::stream(seed, Purpose::DataGeneration, NO_CLIENT, 1);
    rng::shuffle(&mut labels, &mut shuffle_rng);

    let mut inputs = Vec::with_capacity(num_samples * input_dim);
    for &y in &labels {
        let mean = &means[y * input_dim..(y + 1) * input_dim];
        inputs.extend(mean.iter().map(|m| m + normal.sample()));
    }
    Dataset::new(inputs, input_dim, labels, num_classes)
}

/// Seeded shuffle, then the first `train_fraction` of rows become the
/// training split and the rest the test split.
pub fn train_test_split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "train fraction {train_fraction} must be in (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = rng::stream(seed, Purpose::Split, NO_CLIENT, 0);
    rng::shuffle(&mut order, &mut rng);
    let cut = (dataset.len() as f64 * train_fraction).round() as usize;
    if cut == 0 || cut == dataset.len() {
        return Err(Error::Argument(format!(
            "{} samples are too few for a {train_fraction} split",
            dataset.len()
        )));
    }
    Ok((dataset.subset(&order[..cut])?, dataset.subset(&order[cut..])?))
}

/// Disjoint client shards over a dataset's rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientPartition {
    shards: Vec<Vec<usize>>,
}

impl ClientPartition {
    pub fn from_shards(shards: Vec<Vec<usize>>) -> Result<Self> {
        if shards.is_empty() || shards.iter().any(|s| s.is_empty()) {
            return Err(Error::Argument("every client shard must be non-empty".into()));
        }
        Ok(Self { shards })
    }

    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    pub fn shard(&self, k: usize) -> &[usize] {
        &self.shards[k]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }
}

/// Label-skewed split into `num_clients` shards.
///
/// For every class, the class's rows (in seeded shuffled order) are cut into
/// consecutive runs whose lengths follow a Dirichlet(`beta`) draw. Shards that
/// end up empty then take one row from the currently largest shard.
pub fn partition(dataset: &Dataset, num_clients: usize, dirichlet_beta: f64, seed: u64) -> Result<ClientPartition> {
    if num_clients == 0 {
        return Err(Error::Argument("need at least one client".into()));
    }
    if !(dirichlet_beta > 0.0 && dirichlet_beta.is_finite()) {
        return Err(Error::Argument(format!(
            "dirichlet beta {dirichlet_beta} must be positive"
        )));
    }
    if num_clients > dataset.len() {
        return Err(Error::Argument(format!(
            "{num_clients} clients exceed {} samples",
            dataset.len()
        )));
    }
    let gamma = Gamma::new(dirichlet_beta, 1.0).map_err(|e| Error::Argument(e.to_string()))?;
    let mut rng = rng::stream(seed, Purpose::Partition, NO_CLIENT, 0);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }

    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for rows in by_class.iter_mut() {
        if rows.is_empty() {
            continue;
        }
        rng::shuffle(rows, &mut rng);
        let mut props: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            // every gamma draw underflowed; pick one client at random
            let k = rng.random_range(0..num_clients);
            props = vec![0.0; num_clients];
            props[k] = 1.0;
        }
        let n = rows.len();
        let mut start = 0;
        let mut acc = 0.0;
        for (k, p) in props.iter().enumerate() {
            acc += p;
            let end = if k + 1 == num_clients {
                n
            } else {
                ((acc * n as f64).round() as usize).clamp(start, n)
            };
            shards[k].extend_from_slice(&rows[start..end]);
            start = end;
        }
    }

    for k in 0..num_clients {
        if shards[k].is_empty() {
            let donor = (0..num_clients)
                .max_by_key(|&j| (shards[j].len(), std::cmp::Reverse(j)))
                .expect("at least one client");
            let row = shards[donor].pop().expect("donor has more than one row");
            shards[k].push(row);
        }
    }
    for shard in shards.iter_mut() {
        shard.sort_unstable();
    }
    ClientPartition::from_shards(shards)
}

/// Writes the dataset in the `f0,..,f{m-1},label` CSV schema. Floats use
/// Rust's shortest round-trip formatting.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for j in 0..dataset.input_dim() {
        let _ = write!(out, "f{j},");
    }
    out.push_str("label\n");
    for (i, &y) in dataset.labels().iter().enumerate() {
        for v in dataset.row(i) {
            let _ = write!(out, "{v:?},");
        }
        let _ = writeln!(out, "{y}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a CSV with header `f0,..,f{m-1},label`. The class count is one more
/// than the largest label.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    load_csv_inner(path, None)
}

/// As [`load_csv`], but labels at or above `num_classes` are rejected.
pub fn load_csv_with_classes(path: &Path, num_classes: usize) -> Result<Dataset> {
    load_csv_inner(path, Some(num_classes))
}

fn load_csv_inner(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::EmptyDataset);
    };
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let input_dim = columns.len().saturating_sub(1);
    let header_ok = input_dim > 0
        && columns.last() == Some(&"label")
        && columns[..input_dim]
            .iter()
            .enumerate()
            .all(|(j, c)| *c == format!("f{j}"));
    if !header_ok {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header f0,..,f{{m-1}},label, found {header:?}"),
        });
    }

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != input_dim + 1 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", input_dim + 1, fields.len()),
            });
        }
        for field in &fields[..input_dim] {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid number {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("non-finite value {field:?}"),
                });
            }
            inputs.push(v);
        }
        let raw = fields[input_dim];
        let label: usize = raw.parse().map_err(|_| Error::Range {
            line: line_no,
            message: format!("label {raw:?} is not a class index"),
        })?;
        if let Some(limit) = num_classes {
            if label >= limit {
                return Err(Error::Range {
                    line: line_no,
                    message: format!("label {label} out of range for {limit} classes"),
                });
            }
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(inputs, input_dim, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(1000, 10, 16, 3.0, 7).unwrap();
        let b = generate_synthetic(1000, 10, 16, 3.0, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(1000, 10, 16, 3.0, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn label_histogram_within_bounds() {
        let data = generate_synthetic(1000, 10, 16, 3.0, 7).unwrap();
        for count in data.class_counts() {
            assert!((80..=120).contains(&count), "{count}");
        }
    }

    #[test]
    fn means_are_separated_as_requested() {
        // Empirical class means approach the construction's pairwise distance.
        let data = generate_synthetic(20_000, 4, 8, 3.0, 1).unwrap();
        let mut means = vec![vec![0.0; 8]; 4];
        let counts = data.class_counts();
        for (i, &y) in data.labels().iter().enumerate() {
            for (m, x) in means[y].iter_mut().zip(data.row(i)) {
                *m += x / counts[y] as f64;
            }
        }
        let d: f64 = means[0]
            .iter()
            .zip(&means[1])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((d - 3.0).abs() < 0.15, "{d}");
    }

    #[test]
    fn generation_rejects_degenerate_arguments() {
        assert!(generate_synthetic(0, 10, 4, 1.0, 0).is_err());
        assert!(generate_synthetic(10, 0, 4, 1.0, 0).is_err());
        assert!(generate_synthetic(5, 10, 4, 1.0, 0).is_err());
    }

    #[test]
    fn single_client_gets_everything() {
        let data = generate_synthetic(200, 5, 3, 2.0, 4).unwrap();
        let p = partition(&data, 1, 0.5, 9).unwrap();
        assert_eq!(p.shard(0), (0..200).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn shards_cover_dataset_disjointly() {
        let data = generate_synthetic(500, 10, 4, 2.0, 4).unwrap();
        for (k, beta) in [(2, 0.1), (7, 0.5), (50, 0.05), (500, 1.0)] {
            let p = partition(&data, k, beta, 3).unwrap();
            let mut all: Vec<usize> = p.shards().concat();
            all.sort_unstable();
            assert_eq!(all, (0..500).collect::<Vec<_>>());
            assert_eq!(p.total(), 500);
            assert!(p.sizes().iter().all(|&n| n > 0));
        }
    }

    #[test]
    fn too_many_clients_is_rejected() {
        let data = generate_synthetic(20, 2, 2, 1.0, 0).unwrap();
        assert!(matches!(partition(&data, 21, 0.5, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn split_is_exhaustive() {
        let data = generate_synthetic(1000, 10, 4, 1.0, 2).unwrap();
        let (train, test) = train_test_split(&data, 0.8, 5).unwrap();
        assert_eq!(train.len(), 800);
        assert_eq!(test.len(), 200);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let data = generate_synthetic(100, 3, 4, 2.0, 1).unwrap();
        write_csv(&data, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.labels(), data.labels());
        for (a, b) in back.inputs().iter().zip(data.inputs()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn csv_nan_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "f0,f1,label\n1.0,2.0,0\n3.0,NaN,1\n").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::EmptyDataset)));
        fs::write(&path, "f0,label\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::EmptyDataset)));
    }

    #[test]
    fn csv_label_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "f0,label\n1.0,0\n2.0,5\n").unwrap();
        assert!(matches!(
            load_csv_with_classes(&path, 3),
            Err(Error::Range { line: 3, .. })
        ));
        fs::write(&path, "f0,label\n1.0,-1\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Range { line: 2, .. })));
    }
}
