//! Deterministic synthetic datasets, split assignment, subsampling, and
//! optional CSV / IDX ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{Batch, Inputs};
use crate::rng::{hash_unit, stream};

#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    Dense {
        dim: usize,
        data: Vec<f64>,
    },
    Tokens {
        seq_len: usize,
        vocab: usize,
        ids: Vec<usize>,
    },
}

/// Fractions of samples assigned to validation and test; the rest train.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            val: 0.15,
            test: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Membership of sample `i` depends only on `(seed, i)`.
    pub fn by_hash(seed: u64, n: usize, fractions: SplitFractions) -> Result<Self> {
        if fractions.val < 0.0 || fractions.test < 0.0 || fractions.val + fractions.test >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "split fractions {fractions:?} leave no training data"
            )));
        }
        let mut s = Splits {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for i in 0..n {
            let u = hash_unit(seed, "split", i as u64);
            if u < fractions.val {
                s.val.push(i);
            } else if u < fractions.val + fractions.test {
                s.test.push(i);
            } else {
                s.train.push(i);
            }
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Features,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub splits: Splits,
    pub seed: u64,
}

const DATA_MAGIC: &[u8; 8] = b"ISPDATA\0";
const DATA_VERSION: u32 = 1;

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let inputs = match &self.features {
            Features::Dense { dim, data } => Inputs::Features {
                rows: indices.len(),
                dim: *dim,
                data: indices
                    .iter()
                    .flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied())
                    .collect(),
            },
            Features::Tokens { seq_len, ids, .. } => Inputs::Tokens {
                rows: indices.len(),
                seq_len: *seq_len,
                ids: indices
                    .iter()
                    .flat_map(|&i| ids[i * seq_len..(i + 1) * seq_len].iter().copied())
                    .collect(),
            },
        };
        Batch { inputs, labels }
    }

    /// Number of ISP seed steps: batches needed to see 10% of the training split.
    pub fn seed_steps(&self, batch_size: usize) -> u64 {
        ((0.10 * self.splits.train.len() as f64) / batch_size as f64).ceil() as u64
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> u64 {
        self.splits.train.len().div_ceil(batch_size) as u64
    }

    /// Binary cache: magic, version, seed, classes, labels, feature block
    /// (`u8` kind then dims and values), and the three split index lists.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::header(DATA_MAGIC, DATA_VERSION);
        w.u64(self.seed);
        w.u64(self.classes as u64);
        w.usizes(&self.labels);
        match &self.features {
            Features::Dense { dim, data } => {
                w.u8(0);
                w.u64(*dim as u64);
                w.f64s(data);
            }
            Features::Tokens {
                seq_len,
                vocab,
                ids,
            } => {
                w.u8(1);
                w.u64(*seq_len as u64);
                w.u64(*vocab as u64);
                w.usizes(ids);
            }
        }
        for s in [&self.splits.train, &self.splits.val, &self.splits.test] {
            w.usizes(s);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, _) = Reader::with_header(bytes, "dataset", DATA_MAGIC, DATA_VERSION)?;
        let seed = r.u64()?;
        let classes = r.u64()? as usize;
        let labels = r.usizes()?;
        let features = match r.u8()? {
            0 => {
                let dim = r.u64()? as usize;
                Features::Dense {
                    dim,
                    data: r.f64s()?,
                }
            }
            1 => {
                let seq_len = r.u64()? as usize;
                let vocab = r.u64()? as usize;
                Features::Tokens {
                    seq_len,
                    vocab,
                    ids: r.usizes()?,
                }
            }
            k => {
                return Err(Error::format(
                    "dataset",
                    format!("unknown feature kind {k}"),
                ))
            }
        };
        let splits = Splits {
            train: r.usizes()?,
            val: r.usizes()?,
            test: r.usizes()?,
        };
        r.finish()?;
        Ok(Self {
            features,
            labels,
            classes,
            splits,
            seed,
        })
    }
}

/// `n_per_class` points per class from unit-variance isotropic Gaussians
/// whose means are pairwise `separation` apart (scaled simplex corners).
pub fn gen_gaussian_clusters(
    classes: usize,
    dim: usize,
    separation: f64,
    n_per_class: usize,
    seed: u64,
    fractions: SplitFractions,
) -> Result<Dataset> {
    if classes == 0 || dim < classes {
        return Err(Error::InvalidArgument(format!(
            "need 0 < classes <= dim, got classes={classes} dim={dim}"
        )));
    }
    let scale = separation / std::f64::consts::SQRT_2;
    let mut rng = stream(seed, "gaussian", &[]);
    let n = classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for d in 0..dim {
            let mean = if d == c { scale } else { 0.0 };
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(mean + z);
        }
    }
    Ok(Dataset {
        features: Features::Dense { dim, data },
        labels,
        classes,
        splits: Splits::by_hash(seed, n, fractions)?,
        seed,
    })
}

/// Sequences of filler tokens with exactly one marker token; the label is
/// the marker id. Markers are tokens `0..classes`, fillers `classes..vocab`.
pub fn gen_sequence_task(
    vocab: usize,
    seq_len: usize,
    classes: usize,
    n: usize,
    seed: u64,
    fractions: SplitFractions,
) -> Result<Dataset> {
    if classes == 0 || seq_len == 0 || vocab < classes || (seq_len > 1 && vocab == classes) {
        return Err(Error::InvalidArgument(format!(
            "sequence task needs filler tokens: vocab={vocab} classes={classes} seq_len={seq_len}"
        )));
    }
    let mut rng = stream(seed, "sequence", &[]);
    let mut ids = Vec::with_capacity(n * seq_len);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..classes);
        let at = rng.random_range(0..seq_len);
        for p in 0..seq_len {
            ids.push(if p == at {
                label
            } else {
                rng.random_range(classes..vocab)
            });
        }
        labels.push(label);
    }
    Ok(Dataset {
        features: Features::Tokens {
            seq_len,
            vocab,
            ids,
        },
        labels,
        classes,
        splits: Splits::by_hash(seed, n, fractions)?,
        seed,
    })
}

/// `⌊fraction · |split|⌋` distinct indices drawn without replacement.
pub fn subsample(split: &[usize], fraction: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} not in [0, 1]"
        )));
    }
    let k = ((fraction * split.len() as f64) + 1e-9).floor() as usize;
    let mut pool = split.to_vec();
    let (chosen, _) = pool.partial_shuffle(rng, k.min(split.len()));
    Ok(chosen.to_vec())
}

/// Reads `label,feature,...` rows (no header) into a dense dataset.
pub fn load_csv(path: &Path, seed: u64, fractions: SplitFractions) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut dim = None;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |d: String| Error::format("csv", format!("line {}: {d}", line_no + 1));
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|e| bad(format!("label: {e}")))?;
        let row: Vec<f64> = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(e.to_string()))?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => return Err(bad(format!("expected {d} features"))),
            _ => {}
        }
        labels.push(label);
        data.extend(row);
    }
    let dim = dim.ok_or_else(|| Error::format("csv", "no rows"))?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let n = labels.len();
    Ok(Dataset {
        features: Features::Dense { dim, data },
        labels,
        classes,
        splits: Splits::by_hash(seed, n, fractions)?,
        seed,
    })
}

fn read_idx(bytes: &[u8], expected_type: u8) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != expected_type {
        return Err(Error::format("idx", "bad magic"));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::format("idx", "truncated header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let numel: usize = dims.iter().product();
    if bytes.len() != header + numel {
        return Err(Error::format("idx", "payload size does not match dims"));
    }
    Ok((dims, &bytes[header..]))
}

/// Reads an IDX `ubyte` image file and matching label file; pixels are
/// scaled to `[0, 1]`.
pub fn load_idx(
    images: &Path,
    labels: &Path,
    seed: u64,
    fractions: SplitFractions,
) -> Result<Dataset> {
    let img_bytes = std::fs::read(images)?;
    let lbl_bytes = std::fs::read(labels)?;
    let (idims, pixels) = read_idx(&img_bytes, 0x08)?;
    let (ldims, lbls) = read_idx(&lbl_bytes, 0x08)?;
    if idims.is_empty() || ldims.len() != 1 || ldims[0] != idims[0] {
        return Err(Error::format("idx", "image and label counts differ"));
    }
    let n = idims[0];
    let dim = idims[1..].iter().product();
    let labels: Vec<usize> = lbls.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        features: Features::Dense {
            dim,
            data: pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        },
        labels,
        classes,
        splits: Splits::by_hash(seed, n, fractions)?,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let s = Splits::by_hash(9, 500, SplitFractions::default()).unwrap();
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort();
        assert_eq!(all, (0..500).collect::<Vec<_>>());
        let again = Splits::by_hash(9, 800, SplitFractions::default()).unwrap();
        assert!(s.val.iter().all(|i| again.val.contains(i)));
    }

    #[test]
    fn sequences_have_exactly_one_marker() {
        let d = gen_sequence_task(12, 6, 4, 300, 1, SplitFractions::default()).unwrap();
        let Features::Tokens { ids, .. } = &d.features else {
            panic!()
        };
        for (i, seq) in ids.chunks(6).enumerate() {
            let markers: Vec<_> = seq.iter().filter(|&&t| t < 4).collect();
            assert_eq!(markers, [&d.labels[i]]);
        }
    }

    #[test]
    fn single_token_sequence_is_the_label() {
        let d = gen_sequence_task(4, 1, 4, 50, 2, SplitFractions::default()).unwrap();
        let Features::Tokens { ids, .. } = &d.features else {
            panic!()
        };
        assert_eq!(ids, &d.labels);
    }

    #[test]
    fn majority_baseline_is_chance() {
        let d = gen_sequence_task(20, 5, 4, 8000, 3, SplitFractions::default()).unwrap();
        let mut counts = [0usize; 4];
        d.labels.iter().for_each(|&l| counts[l] += 1);
        let majority = *counts.iter().max().unwrap() as f64 / 8000.0;
        assert!((majority - 0.25).abs() < 0.02, "{majority}");
    }

    #[test]
    fn generators_are_pure_functions_of_seed() {
        let a = gen_gaussian_clusters(3, 4, 2.0, 40, 5, SplitFractions::default()).unwrap();
        let b = gen_gaussian_clusters(3, 4, 2.0, 40, 5, SplitFractions::default()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = gen_gaussian_clusters(3, 4, 2.0, 40, 6, SplitFractions::default()).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
        assert_eq!(Dataset::from_bytes(&a.to_bytes()).unwrap(), a);
    }

    /// Nearest-centroid classifier fitted on the train split, scored on test.
    fn centroid_probe(d: &Dataset) -> f64 {
        let Features::Dense { dim, data } = &d.features else {
            panic!()
        };
        let dim = *dim;
        let mut means = vec![vec![0.0; dim]; d.classes];
        let mut counts = vec![0usize; d.classes];
        for &i in &d.splits.train {
            counts[d.labels[i]] += 1;
            for j in 0..dim {
                means[d.labels[i]][j] += data[i * dim + j];
            }
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= *c as f64);
        }
        let dist =
            |x: &[f64], m: &[f64]| -> f64 { x.iter().zip(m).map(|(u, v)| (u - v).powi(2)).sum() };
        let correct = d
            .splits
            .test
            .iter()
            .filter(|&&i| {
                let x = &data[i * dim..(i + 1) * dim];
                let best = (0..d.classes)
                    .min_by(|&a, &b| dist(x, &means[a]).total_cmp(&dist(x, &means[b])))
                    .unwrap();
                best == d.labels[i]
            })
            .count();
        correct as f64 / d.splits.test.len() as f64
    }

    #[test]
    fn well_separated_clusters_are_linearly_separable() {
        let d = gen_gaussian_clusters(3, 3, 6.0, 2000, 11, SplitFractions::default()).unwrap();
        assert!(centroid_probe(&d) > 0.99);
    }

    #[test]
    fn zero_separation_is_chance() {
        let d = gen_gaussian_clusters(2, 2, 0.0, 4000, 12, SplitFractions::default()).unwrap();
        let acc = centroid_probe(&d);
        assert!((acc - 0.5).abs() < 0.05, "{acc}");
    }

    #[test]
    fn subsample_edges() {
        let split: Vec<usize> = (100..140).collect();
        let whole = subsample(&split, 1.0, &mut stream(1, "s", &[])).unwrap();
        let mut sorted = whole.clone();
        sorted.sort();
        assert_eq!(sorted, split);
        assert_ne!(whole, split);
        assert!(subsample(&split, 0.0, &mut stream(1, "s", &[]))
            .unwrap()
            .is_empty());
        let a = subsample(&split, 0.3, &mut stream(4, "s", &[])).unwrap();
        let b = subsample(&split, 0.3, &mut stream(4, "s", &[])).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, b);
    }

    #[test]
    fn csv_rows_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "0,1.0,2.0\n1,3.5,-1\n\n2,0,0\n").unwrap();
        let d = load_csv(&p, 1, SplitFractions::default()).unwrap();
        assert_eq!(d.labels, [0, 1, 2]);
        assert_eq!(d.classes, 3);
        let Features::Dense { dim, data } = d.features else {
            panic!()
        };
        assert_eq!((dim, data.len()), (2, 6));
        std::fs::write(&p, "0,1.0\n1,3.5,-1\n").unwrap();
        assert!(load_csv(&p, 1, SplitFractions::default()).is_err());
    }

    #[test]
    fn idx_files_load() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        let mut ib = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2];
        ib.extend([0, 255, 51, 102]);
        std::fs::write(&img, ib).unwrap();
        std::fs::write(&lbl, [0, 0, 8, 1, 0, 0, 0, 2, 1, 0]).unwrap();
        let d = load_idx(&img, &lbl, 0, SplitFractions::default()).unwrap();
        assert_eq!(d.labels, [1, 0]);
        let Features::Dense { dim, data } = d.features else {
            panic!()
        };
        assert_eq!(dim, 2);
        assert_eq!(data, [0.0, 1.0, 0.2, 0.4]);
    }
}
