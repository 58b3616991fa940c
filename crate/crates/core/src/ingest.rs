//! LIBSVM dataset parsing, train/validation splitting and i.i.d. sharding.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sparse feature vector; indices are 0-based and strictly increasing.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseRow {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseRow {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }
}

/// Labelled sparse dataset. `label_names[c]` is the raw label text that was
/// mapped to class `c` (first appearance order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub rows: Vec<SparseRow>,
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.label_names.len()
    }

    /// Rows at `idx`, in the given order, sharing this dataset's label map.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            dim: self.dim,
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            label_names: self.label_names.clone(),
        }
    }

    /// Keeps the first `n` rows after a seeded shuffle (desk-scale runs).
    pub fn subsample(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        self.select(&idx)
    }

    /// Count of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Parses LIBSVM text: `label idx:val idx:val ...` with 1-based indices.
///
/// Blank lines and lines starting with `#` are skipped; trailing `# ...`
/// comments are ignored. Labels are mapped to classes by first appearance.
/// `dim` forces the feature dimension; otherwise it is `1 + max index`.
pub fn parse_libsvm<R: BufRead>(reader: R, dim: Option<usize>) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut label_names: Vec<String> = Vec::new();
    let mut max_index = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let content = match line.find('#') {
            Some(pos) => &line[..pos],
            None => &line[..],
        };
        let mut tokens = content.split_ascii_whitespace();
        let Some(label_tok) = tokens.next() else {
            continue;
        };
        label_tok.parse::<f64>().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("label `{label_tok}` is not numeric"),
        })?;
        let class = match label_names.iter().position(|l| l == label_tok) {
            Some(c) => c,
            None => {
                label_names.push(label_tok.to_string());
                label_names.len() - 1
            }
        };

        let mut row = SparseRow::default();
        for tok in tokens {
            let (idx, val) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("token `{tok}` is missing ':'"),
            })?;
            let idx: usize = idx.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("index `{idx}` is not a positive integer"),
            })?;
            if idx == 0 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "indices are 1-based".into(),
                });
            }
            let val: f64 = val.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("value `{val}` is not numeric"),
            })?;
            let zero_based = idx - 1;
            if let Some(&last) = row.indices.last() {
                if zero_based as u32 <= last {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("index {idx} does not increase"),
                    });
                }
            }
            max_index = max_index.max(idx);
            row.indices.push(zero_based as u32);
            row.values.push(val);
        }
        rows.push(row);
        labels.push(class);
    }

    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = match dim {
        Some(d) if d < max_index => {
            return Err(Error::Config(format!(
                "forced dimension {d} is below the largest index {max_index}"
            )))
        }
        Some(d) => d,
        None => max_index,
    };
    Ok(Dataset {
        dim,
        rows,
        labels,
        label_names,
    })
}

/// Writes LIBSVM text that [`parse_libsvm`] reads back to an equal dataset.
pub fn write_libsvm<W: Write>(data: &Dataset, mut out: W) -> Result<()> {
    for (row, &label) in data.rows.iter().zip(&data.labels) {
        out.write_all(data.label_names[label].as_bytes())?;
        for (i, v) in row.iter() {
            // `{:?}` on f64 prints the shortest representation that round-trips
            write!(out, " {}:{:?}", i + 1, v)?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Random disjoint split with `|val| = round(val_frac * n)`.
pub fn split_train_val(data: &Dataset, val_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_frac > 0.0 && val_frac < 1.0) {
        return Err(Error::Config(format!(
            "val_frac must lie in (0, 1), got {val_frac}"
        )));
    }
    let n = data.len();
    let n_val = (val_frac * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val, train) = idx.split_at(n_val);
    Ok((data.select(train), data.select(val)))
}

/// Assignment of samples to nodes: a seeded permutation cut into `K`
/// contiguous blocks whose sizes differ by at most one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub nodes: usize,
    pub seed: u64,
    pub permutation: Vec<usize>,
    /// Block boundaries into `permutation`; node `k` owns `offsets[k]..offsets[k+1]`.
    pub offsets: Vec<usize>,
}

impl ShardPlan {
    pub fn block(&self, node: usize) -> &[usize] {
        &self.permutation[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Materializes every node's shard.
    pub fn apply(&self, data: &Dataset) -> Vec<Dataset> {
        (0..self.nodes)
            .map(|k| data.select(self.block(k)))
            .collect()
    }
}

pub fn shard_iid(data: &Dataset, nodes: usize, seed: u64) -> Result<ShardPlan> {
    let n = data.len();
    if nodes == 0 {
        return Err(Error::Config("need at least one node".into()));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if nodes > n {
        return Err(Error::Config(format!("{nodes} nodes but only {n} samples")));
    }
    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / nodes;
    let extra = n % nodes;
    let mut offsets = Vec::with_capacity(nodes + 1);
    offsets.push(0);
    for k in 0..nodes {
        let size = base + usize::from(k < extra);
        offsets.push(offsets[k] + size);
    }
    Ok(ShardPlan {
        nodes,
        seed,
        permutation,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Dataset> {
        parse_libsvm(s.as_bytes(), None)
    }

    #[test]
    fn reads_basic_format() {
        let d = parse("1 1:0.5 3:-2\n-1 2:1").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim, 3);
        assert_eq!(d.rows[0].indices, vec![0, 2]);
        assert_eq!(d.rows[0].values, vec![0.5, -2.0]);
        assert_eq!(d.rows[1].indices, vec![1]);
        assert_eq!(d.labels, vec![0, 1]);
        assert_eq!(d.label_names, vec!["1", "-1"]);
    }

    #[test]
    fn skips_blank_and_comment_lines() {
        let d = parse("# header\n\n+1 1:1e-3 # trailing\n  \n-1 4:2E2\n").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.rows[0].values, vec![1e-3]);
        assert_eq!(d.rows[1].values, vec![200.0]);
        assert_eq!(d.dim, 4);
    }

    #[test]
    fn rows_without_features_are_kept() {
        let d = parse("1\n2 1:1").unwrap();
        assert_eq!(d.rows[0].nnz(), 0);
        assert_eq!(d.labels, vec![0, 1]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("1 1:0.5\nx 2:1", 2),
            ("1 3:1 2:1", 1),
            ("1 3:1 3:1", 1),
            ("1 1:1\n1 2=1", 2),
            ("1 a:1", 1),
            ("1 1:abc", 1),
            ("1 0:1", 1),
        ];
        for (text, line) in cases {
            match parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn empty_input() {
        assert!(matches!(parse(""), Err(Error::EmptyDataset)));
        assert!(matches!(parse("# nothing\n\n"), Err(Error::EmptyDataset)));
    }

    #[test]
    fn forced_dimension() {
        let d = parse_libsvm("1 2:1".as_bytes(), Some(10)).unwrap();
        assert_eq!(d.dim, 10);
        assert!(parse_libsvm("1 12:1".as_bytes(), Some(10)).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let text: String = (0..10).map(|i| format!("{} 1:{}\n", i % 2, i)).collect();
        let d = parse(&text).unwrap();
        let (tr, va) = split_train_val(&d, 0.3, 7).unwrap();
        assert_eq!((tr.len(), va.len()), (7, 3));
        let (tr2, va2) = split_train_val(&d, 0.3, 7).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(va, va2);
        assert!(split_train_val(&d, 0.0, 1).is_err());
        assert!(split_train_val(&d, 1.0, 1).is_err());
    }

    #[test]
    fn shard_sizes() {
        let text: String = (0..9).map(|i| format!("1 1:{i}\n")).collect();
        let d = parse(&text).unwrap();
        let plan = shard_iid(&d, 2, 3).unwrap();
        assert_eq!(plan.sizes(), vec![5, 4]);
        let text8: String = (0..8).map(|i| format!("1 1:{i}\n")).collect();
        let d8 = parse(&text8).unwrap();
        assert_eq!(shard_iid(&d8, 8, 0).unwrap().sizes(), vec![1; 8]);
        assert!(shard_iid(&d8, 9, 0).is_err());
    }
}
