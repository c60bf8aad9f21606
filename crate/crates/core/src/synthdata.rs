//! Synthetic distribution-shift benchmarks with group annotations.
//!
//! Examples are built from Gaussian feature blocks. An invariant block is a
//! cluster centered at `+margin * 1` for class 1 and `-margin * 1` for class 0;
//! a spurious block is the same construction keyed on a binary attribute that
//! agrees with the label at a split-dependent rate. Groups are
//! `(label, attribute)` pairs with index `2 * label + attribute`.
//!
//! Per-block noise scales off `noise_std`: the strong invariant block uses
//! half of it, the weak invariant block twice of it and the spurious block
//! exactly it.
//!
//! Group sizes within a split are apportioned exactly from the requested
//! proportions (largest remainder), so realized ratios only differ from the
//! spec by rounding. Within-group features and the row order are random.

use crate::diffcore::{Batch, Matrix};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

pub const NUM_GROUPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub strong_inv: usize,
    pub weak_inv: usize,
    pub spurious: usize,
}

/// Parameters of a synthetic shift benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Probability that the spurious attribute agrees with the label in training.
    pub spurious_ratio_train: f64,
    /// Same probability at test time; below 0.5 means the correlation is flipped.
    pub spurious_ratio_test: f64,
    /// Fraction of training examples whose invariant block encodes the other class.
    pub label_noise: f64,
    pub feature_dims: FeatureDims,
    pub strong_margin: f64,
    pub weak_margin: f64,
    pub spurious_margin: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl ShiftSpec {
    /// 80/20 spurious color, 25% label noise, 10/90 flipped test split.
    pub fn cmnist() -> Self {
        Self {
            n_train: 10_000,
            n_val: 2_000,
            n_test: 4_000,
            spurious_ratio_train: 0.8,
            spurious_ratio_test: 0.1,
            label_noise: 0.25,
            feature_dims: FeatureDims {
                strong_inv: 8,
                weak_inv: 0,
                spurious: 8,
            },
            strong_margin: 2.0,
            weak_margin: 1.0,
            spurious_margin: 1.0,
            noise_std: 1.0,
            seed: 0,
        }
    }

    /// 95/5 spurious box position, no label noise, fully flipped test beds.
    pub fn hcmnist() -> Self {
        Self {
            n_train: 10_000,
            n_val: 2_000,
            n_test: 4_000,
            spurious_ratio_train: 0.95,
            spurious_ratio_test: 0.05,
            label_noise: 0.0,
            feature_dims: FeatureDims {
                strong_inv: 8,
                weak_inv: 8,
                spurious: 8,
            },
            strong_margin: 2.0,
            weak_margin: 1.0,
            spurious_margin: 1.0,
            noise_std: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ratio_ok = |r: f64| r > 0.0 && r < 1.0;
        if !ratio_ok(self.spurious_ratio_train) || !ratio_ok(self.spurious_ratio_test) {
            return Err(Error::Config("spurious ratios must lie in (0, 1)".into()));
        }
        if !(self.label_noise >= 0.0 && self.label_noise < 1.0) {
            return Err(Error::Config("label_noise must lie in [0, 1)".into()));
        }
        for (name, v) in [
            ("strong_margin", self.strong_margin),
            ("weak_margin", self.weak_margin),
            ("spurious_margin", self.spurious_margin),
            ("noise_std", self.noise_std),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        Ok(())
    }

    fn strong_std(&self) -> f64 {
        0.5 * self.noise_std
    }

    fn weak_std(&self) -> f64 {
        2.0 * self.noise_std
    }

    fn spurious_std(&self) -> f64 {
        self.noise_std
    }
}

/// Labeled feature vectors with a group index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub group_names: Vec<String>,
}

impl GroupedDataset {
    pub fn new(
        inputs: Matrix,
        labels: Vec<usize>,
        groups: Vec<usize>,
        group_names: Vec<String>,
    ) -> Result<Self> {
        if labels.len() != inputs.rows || groups.len() != inputs.rows {
            return Err(Error::ShapeMismatch(format!(
                "{} rows, {} labels, {} groups",
                inputs.rows,
                labels.len(),
                groups.len()
            )));
        }
        if let Some(&g) = groups.iter().find(|&&g| g >= group_names.len()) {
            return Err(Error::ShapeMismatch(format!(
                "group index {g} but only {} groups declared",
                group_names.len()
            )));
        }
        Ok(Self {
            inputs,
            labels,
            groups,
            group_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols
    }

    pub fn group_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_groups()];
        for (i, &g) in self.groups.iter().enumerate() {
            out[g].push(i);
        }
        out
    }

    pub fn group_counts(&self) -> Vec<usize> {
        self.group_indices().iter().map(Vec::len).collect()
    }

    /// Batch of the given rows (repeats allowed).
    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        let cols = self.inputs.cols;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(self.inputs.row(r));
        }
        Batch::new(
            Matrix::new(rows.len(), cols, data)?,
            rows.iter().map(|&r| self.labels[r]).collect(),
        )
    }

    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.labels.clone())
    }

    /// All rows of group `g`.
    pub fn group_batch(&self, g: usize) -> Result<Batch> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.groups[i] == g).collect();
        if rows.is_empty() {
            return Err(Error::EmptyGroup(g));
        }
        self.batch(&rows)
    }

    /// Keeps only the given feature columns.
    pub fn select_columns(&self, cols: std::ops::Range<usize>) -> GroupedDataset {
        let width = cols.len();
        let mut data = Vec::with_capacity(self.len() * width);
        for r in 0..self.len() {
            data.extend_from_slice(&self.inputs.row(r)[cols.clone()]);
        }
        GroupedDataset {
            inputs: Matrix {
                rows: self.len(),
                cols: width,
                data,
            },
            labels: self.labels.clone(),
            groups: self.groups.clone(),
            group_names: self.group_names.clone(),
        }
    }

    /// Keeps only the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> GroupedDataset {
        let cols = self.inputs.cols;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(self.inputs.row(r));
        }
        GroupedDataset {
            inputs: Matrix {
                rows: rows.len(),
                cols,
                data,
            },
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            groups: rows.iter().map(|&r| self.groups[r]).collect(),
            group_names: self.group_names.clone(),
        }
    }

    /// CSV with header `x0,...,x{d-1},label,group`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        writeln!(out, "{},label,group", header.join(","))?;
        for r in 0..self.len() {
            for v in self.inputs.row(r) {
                write!(out, "{v},")?;
            }
            writeln!(out, "{},{}", self.labels[r], self.groups[r])?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R, group_names: Vec<String>) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty dataset file".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 2 || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "group" {
            return Err(Error::Parse(format!("unexpected header `{header}`")));
        }
        let dim = cols.len() - 2;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 2 {
                return Err(Error::Parse(format!(
                    "line {}: expected {} fields, got {}",
                    lineno + 2,
                    dim + 2,
                    fields.len()
                )));
            }
            for f in &fields[..dim] {
                data.push(
                    f.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?,
                );
            }
            let parse_idx = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))
            };
            labels.push(parse_idx(fields[dim])?);
            groups.push(parse_idx(fields[dim + 1])?);
        }
        let rows = labels.len();
        let n_groups = groups.iter().map(|g| g + 1).max().unwrap_or(0);
        let names = if group_names.is_empty() {
            (0..n_groups).map(|g| format!("group{g}")).collect()
        } else {
            group_names
        };
        GroupedDataset::new(Matrix::new(rows, dim, data)?, labels, groups, names)
    }
}

/// JSON sidecar written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub kind: String,
    pub split: String,
    pub spec: ShiftSpec,
    pub group_names: Vec<String>,
}

/// Writes `<stem>.csv` and `<stem>.json` under `dir`.
pub fn save_dataset(
    ds: &GroupedDataset,
    dir: &Path,
    stem: &str,
    sidecar: &DatasetSidecar,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let f = std::fs::File::create(dir.join(format!("{stem}.csv")))?;
    let mut w = std::io::BufWriter::new(f);
    ds.write_csv(&mut w)?;
    w.flush()?;
    std::fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(sidecar)?,
    )?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`]; the sidecar is optional.
pub fn load_dataset(csv_path: &Path) -> Result<(GroupedDataset, Option<DatasetSidecar>)> {
    let sidecar_path = csv_path.with_extension("json");
    let sidecar: Option<DatasetSidecar> = if sidecar_path.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)?)
    } else {
        None
    };
    let names = sidecar.as_ref().map(|s| s.group_names.clone()).unwrap_or_default();
    let f = std::fs::File::open(csv_path)?;
    let ds = GroupedDataset::read_csv(std::io::BufReader::new(f), names)?;
    Ok((ds, sidecar))
}

/// Train/validation split plus one or more named test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub kind: String,
    pub spec: ShiftSpec,
    pub train: GroupedDataset,
    pub val: GroupedDataset,
    pub tests: Vec<(String, GroupedDataset)>,
}

impl DatasetBundle {
    pub fn test(&self, name: &str) -> Option<&GroupedDataset> {
        self.tests.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut splits = vec![("train".to_string(), &self.train), ("val".to_string(), &self.val)];
        splits.extend(self.tests.iter().map(|(n, d)| (n.clone(), d)));
        for (name, ds) in splits {
            let sidecar = DatasetSidecar {
                kind: self.kind.clone(),
                split: name.clone(),
                spec: self.spec.clone(),
                group_names: ds.group_names.clone(),
            };
            save_dataset(ds, dir, &name, &sidecar)?;
        }
        Ok(())
    }

    /// Loads `train.csv`, `val.csv` and every other `*.csv` in `dir` as a test set.
    pub fn load(dir: &Path) -> Result<Self> {
        let (train, side) = load_dataset(&dir.join("train.csv"))?;
        let (val, _) = load_dataset(&dir.join("val.csv"))?;
        let mut names: Vec<String> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension()? == "csv")
                    .then(|| p.file_stem()?.to_str().map(str::to_string))
                    .flatten()
            })
            .filter(|n| n != "train" && n != "val")
            .collect();
        names.sort();
        let mut tests = Vec::new();
        for n in names {
            let (ds, _) = load_dataset(&dir.join(format!("{n}.csv")))?;
            tests.push((n, ds));
        }
        let (kind, spec) = match side {
            Some(s) => (s.kind, s.spec),
            None => ("file".to_string(), ShiftSpec::hcmnist()),
        };
        Ok(Self {
            kind,
            spec,
            train,
            val,
            tests,
        })
    }
}

fn group_names(class_attr: &str) -> Vec<String> {
    (0..NUM_GROUPS)
        .map(|g| format!("class{}_{}{}", g / 2, class_attr, g % 2))
        .collect()
}

/// Group probabilities for a binary task where the attribute agrees with the
/// balanced label with probability `agree`.
fn group_probs(agree: f64) -> [f64; NUM_GROUPS] {
    [agree / 2.0, (1.0 - agree) / 2.0, (1.0 - agree) / 2.0, agree / 2.0]
}

/// Largest-remainder apportionment of `n` items over `probs`.
fn apportion(n: usize, probs: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = probs.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remaining = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable: larger fractional part first, then lower index
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts
}

#[derive(Clone, Copy)]
enum BlockMode {
    /// Cluster keyed on the given binary value.
    Keyed,
    /// Cluster keyed on a fresh fair coin, independent of everything else.
    Scrambled,
    /// Block absent from the feature vector.
    Absent,
}

struct BlockPlan {
    dims: usize,
    margin: f64,
    std: f64,
    mode: BlockMode,
}

fn push_block(out: &mut Vec<f64>, plan: &BlockPlan, key: usize, rng: &mut ChaCha8Rng) {
    if matches!(plan.mode, BlockMode::Absent) {
        return;
    }
    let key = match plan.mode {
        BlockMode::Scrambled => rng.random_range(0..2usize),
        _ => key,
    };
    let center = if key == 1 { plan.margin } else { -plan.margin };
    for _ in 0..plan.dims {
        let z: f64 = rng.sample(StandardNormal);
        out.push(center + plan.std * z);
    }
}

struct SplitPlan {
    counts: [usize; NUM_GROUPS],
    /// Probability the strong block encodes the other class.
    invariant_flip: f64,
    strong: BlockPlan,
    weak: BlockPlan,
    spurious: BlockPlan,
}

fn build_split(plan: &SplitPlan, names: &[String], rng: &mut ChaCha8Rng) -> Result<GroupedDataset> {
    let n: usize = plan.counts.iter().sum();
    let mut groups: Vec<usize> = plan
        .counts
        .iter()
        .enumerate()
        .flat_map(|(g, &c)| std::iter::repeat(g).take(c))
        .collect();
    groups.shuffle(rng);
    let mut data = Vec::new();
    let mut labels = Vec::with_capacity(n);
    let mut dim = 0;
    for &g in &groups {
        let (label, attr) = (g / 2, g % 2);
        let before = data.len();
        let inv_class = if plan.invariant_flip > 0.0 && rng.random_bool(plan.invariant_flip) {
            1 - label
        } else {
            label
        };
        push_block(&mut data, &plan.strong, inv_class, rng);
        push_block(&mut data, &plan.weak, label, rng);
        push_block(&mut data, &plan.spurious, attr, rng);
        dim = data.len() - before;
        labels.push(label);
    }
    GroupedDataset::new(Matrix::new(n, dim, data)?, labels, groups, names.to_vec())
}

fn split_counts(n: usize, agree: f64) -> [usize; NUM_GROUPS] {
    let c = apportion(n, &group_probs(agree));
    [c[0], c[1], c[2], c[3]]
}

fn balanced_counts(n: usize) -> Result<[usize; NUM_GROUPS]> {
    if n < NUM_GROUPS {
        return Err(Error::InfeasibleSpec(format!(
            "validation split of {n} cannot hold {NUM_GROUPS} groups"
        )));
    }
    let c = apportion(n, &[0.25; NUM_GROUPS]);
    Ok([c[0], c[1], c[2], c[3]])
}

fn require_nonempty(counts: &[usize; NUM_GROUPS], split: &str) -> Result<()> {
    if let Some(g) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InfeasibleSpec(format!(
            "group {g} of the {split} split would be empty"
        )));
    }
    Ok(())
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Binary colored-digits analog: one invariant block with label noise and
/// one spurious block.
pub fn gen_cmnist_proxy(spec: &ShiftSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let names = group_names("color");
    let blocks = |flip: f64, counts| SplitPlan {
        counts,
        invariant_flip: flip,
        strong: BlockPlan {
            dims: spec.feature_dims.strong_inv,
            margin: spec.strong_margin,
            std: spec.strong_std(),
            mode: BlockMode::Keyed,
        },
        weak: BlockPlan {
            dims: 0,
            margin: spec.weak_margin,
            std: spec.weak_std(),
            mode: BlockMode::Absent,
        },
        spurious: BlockPlan {
            dims: spec.feature_dims.spurious,
            margin: spec.spurious_margin,
            std: spec.spurious_std(),
            mode: BlockMode::Keyed,
        },
    };
    let train_counts = split_counts(spec.n_train, spec.spurious_ratio_train);
    require_nonempty(&train_counts, "train")?;
    let val_counts = balanced_counts(spec.n_val)?;
    let test_counts = split_counts(spec.n_test, spec.spurious_ratio_test);
    require_nonempty(&test_counts, "test")?;

    let train = build_split(&blocks(spec.label_noise, train_counts), &names, &mut stream(spec.seed, 0))?;
    let val = build_split(&blocks(0.0, val_counts), &names, &mut stream(spec.seed, 1))?;
    let test = build_split(&blocks(0.0, test_counts), &names, &mut stream(spec.seed, 2))?;
    Ok(DatasetBundle {
        kind: "cmnist_proxy".into(),
        spec: spec.clone(),
        train,
        val,
        tests: vec![("test".into(), test)],
    })
}

pub const TESTBED1_SPU_INV: &str = "testbed1_spu_inv";
pub const TESTBED1_INV: &str = "testbed1_inv";
pub const TESTBED2_SPU_SHAPE: &str = "testbed2_spu_shape";
pub const TESTBED2_SHAPE: &str = "testbed2_shape";

/// Heterogeneous analog: a strong invariant block ("color"), a weak invariant
/// block ("shape") and a spurious block ("box position"), evaluated on four
/// test beds that remove different blocks.
///
/// A removed block keeps its marginal distribution but its cluster is chosen
/// by a fresh fair coin, so it carries no information about the label.
pub fn gen_hcmnist_proxy(spec: &ShiftSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    if spec.label_noise != 0.0 {
        return Err(Error::Config("the heterogeneous benchmark has no label noise".into()));
    }
    let names = group_names("box");
    let plan = |counts, strong: BlockMode, spurious: BlockMode| SplitPlan {
        counts,
        invariant_flip: 0.0,
        strong: BlockPlan {
            dims: spec.feature_dims.strong_inv,
            margin: spec.strong_margin,
            std: spec.strong_std(),
            mode: strong,
        },
        weak: BlockPlan {
            dims: spec.feature_dims.weak_inv,
            margin: spec.weak_margin,
            std: spec.weak_std(),
            mode: BlockMode::Keyed,
        },
        spurious: BlockPlan {
            dims: spec.feature_dims.spurious,
            margin: spec.spurious_margin,
            std: spec.spurious_std(),
            mode: spurious,
        },
    };
    use BlockMode::{Keyed, Scrambled};
    let train_counts = split_counts(spec.n_train, spec.spurious_ratio_train);
    require_nonempty(&train_counts, "train")?;
    let val_counts = balanced_counts(spec.n_val)?;
    let test_counts = split_counts(spec.n_test, spec.spurious_ratio_test);
    require_nonempty(&test_counts, "test")?;

    let train = build_split(&plan(train_counts, Keyed, Keyed), &names, &mut stream(spec.seed, 0))?;
    let val = build_split(&plan(val_counts, Keyed, Keyed), &names, &mut stream(spec.seed, 1))?;
    let beds = [
        (TESTBED1_SPU_INV, Keyed, Keyed),
        (TESTBED1_INV, Keyed, Scrambled),
        (TESTBED2_SPU_SHAPE, Scrambled, Keyed),
        (TESTBED2_SHAPE, Scrambled, Scrambled),
    ];
    let mut tests = Vec::new();
    for (i, (name, strong, spurious)) in beds.into_iter().enumerate() {
        let ds = build_split(
            &plan(test_counts, strong, spurious),
            &names,
            &mut stream(spec.seed, 2 + i as u64),
        )?;
        tests.push((name.to_string(), ds));
    }
    Ok(DatasetBundle {
        kind: "hcmnist_proxy".into(),
        spec: spec.clone(),
        train,
        val,
        tests,
    })
}

/// Column ranges of the three blocks in generated feature vectors.
pub fn block_ranges(dims: &FeatureDims, with_weak: bool) -> [std::ops::Range<usize>; 3] {
    let s = dims.strong_inv;
    let w = if with_weak { dims.weak_inv } else { 0 };
    [0..s, s..s + w, s + w..s + w + dims.spurious]
}

/// Endless stream of group-balanced minibatches.
///
/// Each batch holds `batch_size / |G|` rows per group drawn uniformly with
/// replacement inside the group; the remainder goes one each to the lowest
/// group indices.
pub struct ReweightedBatches<'a> {
    ds: &'a GroupedDataset,
    members: Vec<Vec<usize>>,
    per_group: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<'a> ReweightedBatches<'a> {
    /// Row indices of the next batch, one list per group.
    pub fn next_indices(&mut self) -> Vec<Vec<usize>> {
        self.members
            .iter()
            .zip(&self.per_group)
            .map(|(m, &k)| (0..k).map(|_| m[self.rng.random_range(0..m.len())]).collect())
            .collect()
    }

    pub fn per_group(&self) -> &[usize] {
        &self.per_group
    }
}

impl Iterator for ReweightedBatches<'_> {
    type Item = Vec<Batch>;

    fn next(&mut self) -> Option<Vec<Batch>> {
        let idx = self.next_indices();
        idx.iter()
            .map(|rows| self.ds.batch(rows))
            .collect::<Result<Vec<_>>>()
            .ok()
    }
}

pub fn reweighted_batches(
    ds: &GroupedDataset,
    batch_size: usize,
    seed: u64,
) -> Result<ReweightedBatches<'_>> {
    let g = ds.num_groups();
    if g == 0 || batch_size < g {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} smaller than group count {g}"
        )));
    }
    let members = ds.group_indices();
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        return Err(Error::EmptyGroup(empty));
    }
    let base = batch_size / g;
    let extra = batch_size % g;
    let per_group = (0..g).map(|i| base + usize::from(i < extra)).collect();
    Ok(ReweightedBatches {
        ds,
        members,
        per_group,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

/// One shuffled pass over the dataset, in chunks of `batch_size`.
pub fn uniform_epoch(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub worst: f64,
    pub per_group: Vec<f64>,
    /// Example-weighted mean, i.e. plain accuracy.
    pub average: f64,
}

pub fn worst_group_accuracy(
    preds: &[usize],
    labels: &[usize],
    groups: &[usize],
    n_groups: usize,
) -> Result<GroupAccuracy> {
    if preds.len() != labels.len() || labels.len() != groups.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions, {} labels, {} groups",
            preds.len(),
            labels.len(),
            groups.len()
        )));
    }
    let mut correct = vec![0usize; n_groups];
    let mut total = vec![0usize; n_groups];
    for ((p, y), &g) in preds.iter().zip(labels).zip(groups) {
        if g >= n_groups {
            return Err(Error::ShapeMismatch(format!("group {g} >= {n_groups}")));
        }
        total[g] += 1;
        correct[g] += usize::from(p == y);
    }
    if let Some(g) = total.iter().position(|&t| t == 0) {
        return Err(Error::EmptyGroup(g));
    }
    let per_group: Vec<f64> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| c as f64 / t as f64)
        .collect();
    let worst = per_group.iter().cloned().fold(f64::INFINITY, f64::min);
    let average = correct.iter().sum::<usize>() as f64 / total.iter().sum::<usize>() as f64;
    Ok(GroupAccuracy {
        worst,
        per_group,
        average,
    })
}
