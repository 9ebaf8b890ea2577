//! ECG5000 loading, stratified holdout splits and classification metrics.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const N_CLASSES: usize = 5;
pub const BEAT_LEN: usize = 140;

/// Display names of the five annotated beat classes, indexed by `label - 1`.
pub const CLASS_NAMES: [&str; N_CLASSES] = ["Normal (N)", "R-on-T PVC", "PVC", "SP or EB", "UB"];

/// One interpolated heartbeat and its 1-based class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Beat {
    pub samples: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub beats: Vec<Beat>,
    pub class_count: usize,
}

impl Dataset {
    /// Builds a dataset, checking label range and that all beats share one length.
    pub fn new(beats: Vec<Beat>, class_count: usize) -> Result<Self> {
        if let Some(first) = beats.first() {
            let len = first.samples.len();
            for (i, b) in beats.iter().enumerate() {
                if b.samples.len() != len {
                    return Err(Error::Shape(format!(
                        "beat {i} has length {}, expected {len}",
                        b.samples.len()
                    )));
                }
                if b.label < 1 || b.label > class_count {
                    return Err(Error::Domain(format!(
                        "beat {i} label {} outside 1..={class_count}",
                        b.label
                    )));
                }
            }
        }
        Ok(Self { beats, class_count })
    }

    pub fn len(&self) -> usize {
        self.beats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beats.is_empty()
    }

    pub fn beat_len(&self) -> Option<usize> {
        self.beats.first().map(|b| b.samples.len())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.beats.iter().map(|b| b.label).collect()
    }

    /// Number of beats per class, indexed by `label - 1`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for b in &self.beats {
            counts[b.label - 1] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            beats: indices.iter().map(|&i| self.beats[i].clone()).collect(),
            class_count: self.class_count,
        }
    }
}

pub fn class_name(label: usize) -> &'static str {
    CLASS_NAMES
        .get(label.wrapping_sub(1))
        .copied()
        .unwrap_or("?")
}

/// Parses UCR-style text: one beat per line, label first, comma/tab/space delimited.
pub fn parse_ucr(text: &str, expected_len: usize) -> Result<Dataset> {
    let mut beats = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != expected_len + 1 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!(
                    "expected {} fields (label + {expected_len} samples), found {}",
                    expected_len + 1,
                    fields.len()
                ),
            });
        }
        let label_val: f64 = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("label {:?} is not numeric", fields[0]),
        })?;
        if !label_val.is_finite() || label_val.fract() != 0.0 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("label {:?} is not an integer", fields[0]),
            });
        }
        if !(1.0..=N_CLASSES as f64).contains(&label_val) {
            return Err(Error::Domain(format!(
                "line {line_no}: label {label_val} outside 1..={N_CLASSES}"
            )));
        }
        let mut samples = Vec::with_capacity(expected_len);
        for (j, f) in fields[1..].iter().enumerate() {
            let v: f32 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("sample {j} ({f:?}) is not numeric"),
            })?;
            if !v.is_finite() {
                return Err(Error::Domain(format!(
                    "line {line_no}: sample {j} is not finite"
                )));
            }
            samples.push(v);
        }
        beats.push(Beat {
            samples,
            label: label_val as usize,
        });
    }
    Dataset::new(beats, N_CLASSES)
}

pub fn load_ucr(path: impl AsRef<Path>, expected_len: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ucr(&text, expected_len)
}

/// Loads `ECG5000_TRAIN` and `ECG5000_TEST` from a UCR archive directory,
/// accepting either the `.tsv` or the older `.txt` file names.
pub fn load_ecg5000_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let split = |name: &str| {
        let tsv = dir.join(format!("ECG5000_{name}.tsv"));
        let path = if tsv.exists() {
            tsv
        } else {
            dir.join(format!("ECG5000_{name}.txt"))
        };
        load_ucr(path, BEAT_LEN)
    };
    Ok((split("TRAIN")?, split("TEST")?))
}

/// Per-class stratified split into `(remaining, held_out)`.
///
/// The held-out share of each class is `floor(fraction * n_c)`, raised to one
/// for every class with at least two members, and capped at `n_c - 1`. Any
/// shortfall against `round(fraction * n)` is then handed out by largest
/// fractional remainder, so a 500-beat set at fraction 0.1 splits 450/50.
pub fn stratified_holdout(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Usage(format!(
            "holdout fraction {fraction} must lie in (0, 1)"
        )));
    }
    if fraction * (ds.len() as f64) < 1.0 {
        return Err(Error::Usage(format!(
            "holdout fraction {fraction} of {} beats selects nothing",
            ds.len()
        )));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, b) in ds.beats.iter().enumerate() {
        by_class[b.label - 1].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }

    let mut quota: Vec<usize> = by_class
        .iter()
        .map(|m| {
            let n = m.len();
            if n < 2 {
                0
            } else {
                ((fraction * n as f64).floor() as usize).clamp(1, n - 1)
            }
        })
        .collect();

    let target = (fraction * ds.len() as f64).round() as usize;
    let assigned: usize = quota.iter().sum();
    if assigned < target {
        let mut order: Vec<usize> = (0..by_class.len()).collect();
        let rem = |c: usize| {
            let exact = fraction * by_class[c].len() as f64;
            exact - exact.floor()
        };
        // Stable sort keeps the lower class first on equal remainders.
        order.sort_by(|&a, &b| rem(b).partial_cmp(&rem(a)).unwrap());
        let mut missing = target - assigned;
        while missing > 0 {
            let mut progressed = false;
            for &c in &order {
                if missing == 0 {
                    break;
                }
                if by_class[c].len() >= 2 && quota[c] < by_class[c].len() - 1 {
                    quota[c] += 1;
                    missing -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
    }

    let mut keep = Vec::new();
    let mut held = Vec::new();
    for (members, &q) in by_class.iter().zip(&quota) {
        held.extend_from_slice(&members[..q]);
        keep.extend_from_slice(&members[q..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    Ok((ds.subset(&keep), ds.subset(&held)))
}

/// `counts[t][p]`: beats of true class `t+1` predicted as `p+1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn is_diagonal(&self) -> bool {
        self.counts
            .iter()
            .enumerate()
            .all(|(t, row)| row.iter().enumerate().all(|(p, &c)| t == p || c == 0))
    }

    /// Recall of each class with at least one true member, `None` otherwise.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(t, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[t] as f64 / n as f64)
            })
            .collect()
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&p, &t) in preds.iter().zip(labels) {
        if p < 1 || p > k || t < 1 || t > k {
            return Err(Error::Domain(format!(
                "class pair ({t}, {p}) outside 1..={k}"
            )));
        }
        cm.counts[t - 1][p - 1] += 1;
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetric);
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Macro-averaged recall over classes that occur in the evaluated labels.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::UndefinedMetric);
    }
    let present: Vec<f64> = cm.recalls().into_iter().flatten().collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}
