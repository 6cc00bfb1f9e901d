//! Pool of real motions for the motion discriminator, stored as `PP1`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flowpose_tensor::Tensor;
use rand::Rng;

use super::motion::gen_motion;
use crate::body_model::BodyTemplate;
use crate::container::{self, FormatError, NamedArray};
use crate::error::{Error, Result};

const MAGIC: &str = "PP1";

/// Axis-angle pose sequences, each `[T, K * 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosePool {
    pub sequences: Vec<Tensor>,
    pub source: String,
}

impl PosePool {
    pub fn new(source: &str) -> Self {
        Self {
            sequences: Vec::new(),
            source: source.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn seq_len(&self) -> Option<usize> {
        self.sequences.first().map(|s| s.shape()[0])
    }

    pub fn push(&mut self, seq: Tensor) -> Result<()> {
        if seq.ndim() != 2 || seq.shape()[1] % 3 != 0 {
            return Err(Error::Representation(format!("pose sequence must be [T, K * 3], got {:?}", seq.shape())));
        }
        if let Some(t) = self.seq_len() {
            if seq.shape() != self.sequences[0].shape() {
                return Err(Error::shape("PosePool::push", &[t, self.sequences[0].shape()[1]], seq.shape()));
            }
        }
        if !seq.all_finite() {
            return Err(Error::Representation("pose sequence contains non-finite values".into()));
        }
        self.sequences.push(seq);
        Ok(())
    }

    pub fn sample<'a>(&'a self, rng: &mut impl Rng) -> &'a Tensor {
        &self.sequences[rng.random_range(0..self.sequences.len())]
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        container::write_magic(w, MAGIC)?;
        container::write_u64(w, self.sequences.len() as u64)?;
        container::write_string(w, &self.source)?;
        for (i, s) in self.sequences.iter().enumerate() {
            container::write_array(w, &NamedArray::f64(&format!("seq{i}"), s))?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        container::read_magic(r, MAGIC)?;
        let n = container::read_u64(r)? as usize;
        let mut pool = PosePool::new(&container::read_string(r)?);
        for _ in 0..n {
            let a = container::read_array(r)?;
            pool.push(a.to_tensor()?).map_err(|e| FormatError::Malformed(e.to_string()))?;
        }
        Ok(pool)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Append a text file of whitespace- or comma-separated axis-angle rows.
    pub fn import_text(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.push(parse_pose_text(&text)?)
    }
}

/// Parse one sequence of `K * 3` axis-angle values per line. Blank lines
/// and lines starting with `#` are skipped.
pub fn parse_pose_text(text: &str) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Representation(format!("line {}: {e}", n + 1)))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Representation(format!(
                    "line {} has {} values, expected {}",
                    n + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    let width = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || width % 3 != 0 {
        return Err(Error::Representation(format!("expected rows of K * 3 values, got {width}")));
    }
    Ok(Tensor::from_vec(&[rows.len(), width], rows.concat()))
}

/// Synthetic motions from `seeds`, which must not meet `training_seeds`.
pub fn build_pose_pool(
    tpl: &BodyTemplate,
    seeds: &[u64],
    training_seeds: &[u64],
    len: usize,
    smoothness: f64,
) -> Result<PosePool> {
    let train: BTreeSet<u64> = training_seeds.iter().copied().collect();
    if let Some(&s) = seeds.iter().find(|s| train.contains(s)) {
        return Err(Error::SeedOverlap(s));
    }
    let mut pool = PosePool::new("synthetic");
    for &s in seeds {
        let m = gen_motion(tpl, s, len, smoothness)?;
        let k = m.pose.shape()[1];
        pool.push(m.pose.reshaped(&[len, k * 3]))?;
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disjoint_seeds_build_a_pool() {
        let tpl = BodyTemplate::toy();
        let seeds: Vec<u64> = (1000..1010).collect();
        let train: Vec<u64> = (0..100).collect();
        let pool = build_pose_pool(&tpl, &seeds, &train, 8, 1.0).unwrap();
        assert_eq!(pool.len(), 10);
        assert_eq!(pool.sequences[0].shape(), &[8, 72]);
    }

    #[test]
    fn shared_seed_is_an_overlap_error() {
        let tpl = BodyTemplate::toy();
        let err = build_pose_pool(&tpl, &[1000, 42], &[42], 8, 1.0).unwrap_err();
        assert!(matches!(err, Error::SeedOverlap(42)));
    }

    #[test]
    fn imported_text_matches_file_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("walk.txt");
        let rows: Vec<Vec<f64>> = (0..5).map(|t| (0..72).map(|i| (t * 72 + i) as f64 * 0.001 - 0.1).collect()).collect();
        let mut text = String::from("# frames x 72\n");
        for r in &rows {
            text += &r.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        let mut pool = PosePool::new("imported");
        pool.import_text(&path).unwrap();
        let got = &pool.sequences[0];
        assert_eq!(got.shape(), &[5, 72]);
        for (t, r) in rows.iter().enumerate() {
            for (i, v) in r.iter().enumerate() {
                assert_eq!(got.get(&[t, i]), *v);
            }
        }
    }

    #[test]
    fn ragged_or_bad_text_is_rejected() {
        assert!(parse_pose_text("1 2 3\n1 2\n").is_err());
        assert!(parse_pose_text("1 2 3 4\n").is_err());
        assert!(parse_pose_text("1 x 3\n").is_err());
        assert!(parse_pose_text("").is_err());
    }

    #[test]
    fn pool_file_round_trips() {
        let tpl = BodyTemplate::toy();
        let pool = build_pose_pool(&tpl, &[7, 8], &[], 4, 1.0).unwrap();
        let mut buf = Vec::new();
        pool.write_to(&mut buf).unwrap();
        assert_eq!(PosePool::read_from(&mut &buf[..]).unwrap(), pool);
        assert!(PosePool::read_from(&mut &buf[..buf.len() - 1]).is_err());
    }
}
