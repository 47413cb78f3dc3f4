//! Multi-view dataset format, ingestion, stratified splitting, per-feature
//! standardization, and batching.
//!
//! A dataset directory holds a `manifest.json` naming the views, one feature
//! file per view (CSV or the `mvbin` binary format), a `labels.txt`, and an
//! optional `split.txt`.

pub mod synth;

use crate::error::{Error, Result};
use crate::numerics::matrix::{Matrix, Scalar};
use crate::numerics::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MVBIN_MAGIC: &[u8; 6] = b"MVBIN1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewFormat {
    Csv,
    Mvbin,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestView {
    pub name: String,
    pub dim: usize,
    pub file: String,
    pub format: ViewFormat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub num_classes: usize,
    pub labels: String,
    pub views: Vec<ManifestView>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ViewData {
    pub name: String,
    pub x: Matrix<f64>,
}

/// Aligned per-view feature matrices plus labels. Row `i` of every view is
/// the same sample.
#[derive(Clone, Debug)]
pub struct MultiViewDataset {
    pub name: String,
    pub num_classes: usize,
    pub views: Vec<ViewData>,
    pub labels: Vec<usize>,
    pub split: Option<Vec<Split>>,
}

impl MultiViewDataset {
    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.x.cols()).collect()
    }

    pub fn indices_of(&self, split: Split) -> Result<Vec<usize>> {
        let assignment = self
            .split
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no split assignment".into()))?;
        Ok((0..self.num_samples())
            .filter(|&i| assignment[i] == split)
            .collect())
    }

    /// Per-view matrices and labels restricted to one split.
    pub fn gather(&self, split: Split) -> Result<(Vec<Matrix<f64>>, Vec<usize>)> {
        let idx = self.indices_of(split)?;
        if idx.is_empty() {
            return Err(Error::Data(format!("split '{}' is empty", split.as_str())));
        }
        let views = self.views.iter().map(|v| v.x.gather_rows(&idx)).collect();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((views, labels))
    }

    fn validate(&self) -> Result<()> {
        for view in &self.views {
            if view.x.rows() != self.num_samples() {
                return Err(Error::Data(format!(
                    "view '{}' has {} rows but there are {} labels",
                    view.name,
                    view.x.rows(),
                    self.num_samples()
                )));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }
}

fn parse_csv_matrix(text: &str, dim: usize, name: &str) -> Result<Matrix<f64>> {
    let mut data = Vec::new();
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0;
        for field in line.split(',') {
            // files carry 32-bit floats; parse at file precision then widen
            // so csv and mvbin encodings of a matrix load identically
            let value: f32 = field.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "view '{name}' line {}: bad float '{field}'",
                    lineno + 1
                ))
            })?;
            data.push(value as f64);
            count += 1;
        }
        if count != dim {
            return Err(Error::Data(format!(
                "view '{name}' line {}: {count} columns, manifest says dim={dim}",
                lineno + 1
            )));
        }
        rows += 1;
    }
    Matrix::from_vec(rows, dim, data)
}

fn parse_mvbin(bytes: &[u8], dim: usize, name: &str) -> Result<Matrix<f64>> {
    if bytes.len() < 14 || &bytes[..6] != MVBIN_MAGIC {
        return Err(Error::Data(format!("view '{name}': not an mvbin file")));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if cols != dim {
        return Err(Error::Data(format!(
            "view '{name}': file has {cols} columns, manifest says dim={dim}"
        )));
    }
    let expected = 14 + rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "view '{name}': mvbin payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes[14..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Matrix::from_vec(rows, cols, data)
}

/// Serializes a matrix to the `mvbin` layout (32-bit floats on disk).
pub fn write_mvbin(path: &Path, m: &Matrix<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(14 + m.len() * 4);
    buf.extend_from_slice(MVBIN_MAGIC);
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn write_csv_matrix(path: &Path, m: &Matrix<f64>) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{}", *v as f32)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads a dataset directory: manifest, per-view feature files, labels, and
/// the optional split assignment.
pub fn load_dataset(dir: &Path) -> Result<MultiViewDataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Data(format!("bad manifest {}: {e}", manifest_path.display())))?;

    let labels_text = std::fs::read_to_string(dir.join(&manifest.labels))
        .map_err(|e| Error::Data(format!("cannot read labels '{}': {e}", manifest.labels)))?;
    let labels: Vec<usize> = labels_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::Data(format!("bad label line '{l}'")))
        })
        .collect::<Result<_>>()?;

    let mut views = Vec::with_capacity(manifest.views.len());
    for mv in &manifest.views {
        let path = dir.join(&mv.file);
        let x = match mv.format {
            ViewFormat::Csv => {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Data(format!("cannot read view '{}': {e}", mv.name)))?;
                parse_csv_matrix(&text, mv.dim, &mv.name)?
            }
            ViewFormat::Mvbin => {
                let bytes = std::fs::read(&path)
                    .map_err(|e| Error::Data(format!("cannot read view '{}': {e}", mv.name)))?;
                parse_mvbin(&bytes, mv.dim, &mv.name)?
            }
        };
        views.push(ViewData {
            name: mv.name.clone(),
            x,
        });
    }

    let split_path = dir.join("split.txt");
    let split = if split_path.exists() {
        let text = std::fs::read_to_string(&split_path)?;
        let assignment: Vec<Split> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Split::parse(l.trim()))
            .collect::<Result<_>>()?;
        if assignment.len() != labels.len() {
            return Err(Error::Data(format!(
                "split.txt has {} lines, expected {}",
                assignment.len(),
                labels.len()
            )));
        }
        Some(assignment)
    } else {
        None
    };

    let ds = MultiViewDataset {
        name: manifest.name,
        num_classes: manifest.num_classes,
        views,
        labels,
        split,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes a dataset directory in the manifest format.
pub fn write_dataset(dir: &Path, ds: &MultiViewDataset, format: ViewFormat) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let ext = match format {
        ViewFormat::Csv => "csv",
        ViewFormat::Mvbin => "mvbin",
    };
    let manifest = Manifest {
        name: ds.name.clone(),
        num_classes: ds.num_classes,
        labels: "labels.txt".into(),
        views: ds
            .views
            .iter()
            .enumerate()
            .map(|(v, view)| ManifestView {
                name: view.name.clone(),
                dim: view.x.cols(),
                file: format!("view{v}.{ext}"),
                format,
            })
            .collect(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?,
    )?;
    for (v, view) in ds.views.iter().enumerate() {
        let path = dir.join(format!("view{v}.{ext}"));
        match format {
            ViewFormat::Csv => write_csv_matrix(&path, &view.x)?,
            ViewFormat::Mvbin => write_mvbin(&path, &view.x)?,
        }
    }
    let labels: String = ds.labels.iter().map(|y| format!("{y}\n")).collect();
    std::fs::write(dir.join("labels.txt"), labels)?;
    if let Some(split) = &ds.split {
        let text: String = split.iter().map(|s| format!("{}\n", s.as_str())).collect();
        std::fs::write(dir.join("split.txt"), text)?;
    }
    Ok(())
}

/// Stratified 70/20/10 assignment (largest-remainder rounding per class,
/// so sizes stay within one sample of the exact ratios). Deterministic in
/// the seed. Every class must land in the train split.
pub fn split_dataset(ds: &mut MultiViewDataset, ratios: (f64, f64, f64), seed: u64) -> Result<()> {
    let (tr, va, te) = ratios;
    if (tr + va + te - 1.0).abs() > 1e-9 || tr <= 0.0 || va < 0.0 || te < 0.0 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {ratios:?}"
        )));
    }
    let n = ds.num_samples();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = Rng::stream(seed, 0x5117);
    let mut assignment = vec![Split::Train; n];
    for (class, indices) in by_class.iter_mut().enumerate() {
        if indices.len() < 3 {
            return Err(Error::Data(format!(
                "class {class} has {} samples; need at least 3 to stratify",
                indices.len()
            )));
        }
        rng.shuffle(indices);
        let counts = largest_remainder(indices.len(), &[tr, va, te]);
        let (n_tr, n_va) = (counts[0], counts[1]);
        for (k, &i) in indices.iter().enumerate() {
            assignment[i] = if k < n_tr {
                Split::Train
            } else if k < n_tr + n_va {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    ds.split = Some(assignment);
    Ok(())
}

/// Integer apportionment: floors plus leftover units by largest fractional
/// part, ties resolved in slot order (train first).
fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let targets: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for k in 0..(n - assigned) {
        counts[order[k % ratios.len()]] += 1;
    }
    counts
}

/// Per-view, per-feature train-split statistics. Applied identically to all
/// splits; standard deviations are floored at 1e-8 so constant features map
/// to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub views: Vec<ViewStats>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Standardizer {
    /// Fits on the train split of `ds`.
    pub fn fit(ds: &MultiViewDataset) -> Result<Standardizer> {
        let idx = ds.indices_of(Split::Train)?;
        if idx.is_empty() {
            return Err(Error::Data("train split is empty".into()));
        }
        let inv_n = 1.0 / idx.len() as f64;
        let mut views = Vec::with_capacity(ds.num_views());
        for view in &ds.views {
            let dim = view.x.cols();
            let mut mean = vec![0.0; dim];
            for &i in &idx {
                for (m, &v) in mean.iter_mut().zip(view.x.row(i)) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m *= inv_n;
            }
            let mut var = vec![0.0; dim];
            for &i in &idx {
                for (j, &v) in view.x.row(i).iter().enumerate() {
                    let d = v - mean[j];
                    var[j] += d * d;
                }
            }
            let std = var
                .iter()
                .map(|&v| (v * inv_n).sqrt().max(STD_FLOOR))
                .collect();
            views.push(ViewStats { mean, std });
        }
        Ok(Standardizer { views })
    }

    /// Transforms every split of the dataset in place.
    pub fn apply(&self, ds: &mut MultiViewDataset) -> Result<()> {
        if self.views.len() != ds.num_views() {
            return Err(Error::shape(
                "standardizer",
                self.views.len(),
                ds.num_views(),
            ));
        }
        for (stats, view) in self.views.iter().zip(&mut ds.views) {
            if stats.mean.len() != view.x.cols() {
                return Err(Error::shape(
                    "standardizer dims",
                    stats.mean.len(),
                    view.x.cols(),
                ));
            }
            for i in 0..view.x.rows() {
                for (j, v) in view.x.row_mut(i).iter_mut().enumerate() {
                    *v = (*v - stats.mean[j]) / stats.std[j];
                }
            }
        }
        Ok(())
    }

    /// Transforms loose view matrices (eval-time inputs).
    pub fn apply_views(&self, views: &mut [Matrix<f64>]) -> Result<()> {
        if self.views.len() != views.len() {
            return Err(Error::shape("standardizer", self.views.len(), views.len()));
        }
        for (stats, x) in self.views.iter().zip(views) {
            if stats.mean.len() != x.cols() {
                return Err(Error::shape(
                    "standardizer dims",
                    stats.mean.len(),
                    x.cols(),
                ));
            }
            for i in 0..x.rows() {
                for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                    *v = (*v - stats.mean[j]) / stats.std[j];
                }
            }
        }
        Ok(())
    }
}

/// Fits on the train split and transforms the whole dataset.
pub fn standardize_fit_apply(ds: &mut MultiViewDataset) -> Result<Standardizer> {
    let st = Standardizer::fit(ds)?;
    st.apply(ds)?;
    Ok(st)
}

/// One mini-batch: aligned per-view matrices plus the label slice.
pub struct MultiViewBatch<T: Scalar> {
    pub views: Vec<Matrix<T>>,
    pub labels: Vec<usize>,
}

/// Epoch batching: an optional shuffle, then contiguous chunks. A final
/// chunk smaller than 2 is dropped (batch norm needs at least two rows).
pub fn batch_indices(n: usize, batch_size: usize, shuffle: Option<&mut Rng>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = shuffle {
        rng.shuffle(&mut order);
    }
    let mut out: Vec<Vec<usize>> = order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect();
    if out.last().is_some_and(|last| last.len() < 2) {
        out.pop();
    }
    out
}

/// Materializes one batch, casting to the training element type.
pub fn gather_batch<T: Scalar>(
    views: &[Matrix<f64>],
    labels: &[usize],
    indices: &[usize],
) -> MultiViewBatch<T> {
    MultiViewBatch {
        views: views
            .iter()
            .map(|x| x.gather_rows(indices).cast())
            .collect(),
        labels: indices.iter().map(|&i| labels[i]).collect(),
    }
}
