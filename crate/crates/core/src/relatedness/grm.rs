//! Genetic relationship matrix from a genotype dosage table.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GRM1";

/// Dosage matrix, individuals by variants. `None` marks a missing call.
#[derive(Debug, Clone, PartialEq)]
pub struct Genotypes {
    n: usize,
    r: usize,
    /// Variant-major: `calls[k * n + i]`.
    calls: Vec<Option<u8>>,
}

impl Genotypes {
    /// Builds from per-individual rows.
    pub fn from_rows(rows: &[Vec<Option<u8>>]) -> Result<Genotypes> {
        let n = rows.len();
        let r = rows.first().map_or(0, Vec::len);
        let mut calls = vec![None; n * r];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != r {
                return Err(Error::LengthMismatch {
                    what: format!("genotype row {i}"),
                    left: row.len(),
                    right: r,
                });
            }
            for (k, &v) in row.iter().enumerate() {
                if let Some(x) = v {
                    if x > 2 {
                        return Err(Error::invalid(format!(
                            "genotype {x} at individual {i}, variant {k} is not 0, 1 or 2"
                        )));
                    }
                }
                calls[k * n + i] = v;
            }
        }
        Ok(Genotypes { n, r, calls })
    }

    /// Reads a CSV of dosages (0, 1, 2, NA or empty). A first line containing
    /// anything else is treated as a header.
    pub fn from_csv(path: &Path) -> Result<Genotypes> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| Error::Format {
                path: path.into(),
                reason: e.to_string(),
            })?;
        let mut rows = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let parsed: std::result::Result<Vec<Option<u8>>, String> = record
                .iter()
                .map(|f| match f.trim() {
                    "" | "NA" | "na" | "NaN" => Ok(None),
                    "0" => Ok(Some(0)),
                    "1" => Ok(Some(1)),
                    "2" => Ok(Some(2)),
                    other => Err(other.to_string()),
                })
                .collect();
            match parsed {
                Ok(row) => rows.push(row),
                Err(_) if line == 0 => continue,
                Err(bad) => {
                    return Err(Error::Format {
                        path: path.into(),
                        reason: format!("line {}: `{bad}` is not a dosage", line + 1),
                    })
                }
            }
        }
        Genotypes::from_rows(&rows)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_variants(&self) -> usize {
        self.r
    }

    fn variant(&self, k: usize) -> &[Option<u8>] {
        &self.calls[k * self.n..(k + 1) * self.n]
    }
}

/// Symmetric GRM stored as its lower triangle (row-major, `j <= i`).
#[derive(Debug, Clone, PartialEq)]
pub struct Grm {
    n: usize,
    variants_used: usize,
    frequency_hash: [u8; 32],
    lower: Vec<f64>,
    /// Indices of input variants dropped as monomorphic.
    pub monomorphic: Vec<usize>,
}

fn tri(i: usize, j: usize) -> usize {
    let (i, j) = if j > i { (j, i) } else { (i, j) };
    i * (i + 1) / 2 + j
}

impl Grm {
    pub fn from_lower(
        n: usize,
        variants_used: usize,
        frequency_hash: [u8; 32],
        lower: Vec<f64>,
    ) -> Result<Grm> {
        if lower.len() != n * (n + 1) / 2 {
            return Err(Error::LengthMismatch {
                what: "GRM lower triangle".into(),
                left: lower.len(),
                right: n * (n + 1) / 2,
            });
        }
        if lower.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GRM entries".into()));
        }
        Ok(Grm {
            n,
            variants_used,
            frequency_hash,
            lower,
            monomorphic: Vec::new(),
        })
    }

    /// Builds from a full square matrix, using its lower triangle.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Grm> {
        let n = rows.len();
        let mut lower = Vec::with_capacity(n * (n + 1) / 2);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::LengthMismatch {
                    what: "GRM row".into(),
                    left: row.len(),
                    right: n,
                });
            }
            lower.extend_from_slice(&row[..=i]);
        }
        Grm::from_lower(n, 0, [0; 32], lower)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn variants_used(&self) -> usize {
        self.variants_used
    }

    pub fn frequency_hash(&self) -> String {
        hex::encode(self.frequency_hash)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lower[tri(i, j)]
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
        put(MAGIC)?;
        put(&(self.n as u64).to_le_bytes())?;
        put(&(self.variants_used as u64).to_le_bytes())?;
        put(&self.frequency_hash)?;
        for v in &self.lower {
            put(&v.to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Grm> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |reason: &str| Error::Format {
            path: path.into(),
            reason: reason.into(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("missing GRM1 magic bytes"));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)
            .map_err(|_| bad("truncated header"))?;
        let n = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)
            .map_err(|_| bad("truncated header"))?;
        let variants_used = u64::from_le_bytes(word) as usize;
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash)
            .map_err(|_| bad("truncated header"))?;
        let len = n
            .checked_mul(n + 1)
            .map(|v| v / 2)
            .ok_or_else(|| bad("implausible dimension"))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() != len * 8 {
            return Err(bad(&format!(
                "expected {} bytes of entries, found {}",
                len * 8,
                bytes.len()
            )));
        }
        let lower = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Grm::from_lower(n, variants_used, hash, lower)
    }
}

/// `G_ij = 1/(R-1) Σ_k (s_ik - 2p_k)(s_jk - 2p_k) / (2 p_k (1 - p_k))` over
/// polymorphic variants, with missing calls contributing zero. Variants are
/// processed in blocks of `block` columns; output rows are computed in
/// parallel.
pub fn compute_grm(genotypes: &Genotypes, block: usize) -> Result<Grm> {
    let n = genotypes.n();
    if n < 2 {
        return Err(Error::invalid(format!(
            "GRM needs at least 2 individuals, got {n}"
        )));
    }
    let block = block.max(1);
    let mut used = Vec::new();
    let mut freqs = Vec::new();
    let mut monomorphic = Vec::new();
    for k in 0..genotypes.n_variants() {
        let calls = genotypes.variant(k);
        let (sum, count) = calls
            .iter()
            .flatten()
            .fold((0u64, 0u64), |(s, c), &v| (s + u64::from(v), c + 1));
        let p = if count == 0 {
            0.0
        } else {
            sum as f64 / (2 * count) as f64
        };
        if p > 0.0 && p < 1.0 {
            used.push(k);
            freqs.push(p);
        } else {
            monomorphic.push(k);
        }
    }
    if used.is_empty() {
        return Err(Error::invalid("every variant is monomorphic"));
    }
    if used.len() < 2 {
        return Err(Error::invalid("GRM needs at least 2 polymorphic variants"));
    }
    let mut hasher = Sha256::new();
    for p in &freqs {
        hasher.update(p.to_le_bytes());
    }
    let hash: [u8; 32] = hasher.finalize().into();
    let scale = 1.0 / (used.len() - 1) as f64;
    let mut lower = vec![0.0; n * (n + 1) / 2];
    for chunk in used.chunks(block).zip(freqs.chunks(block)) {
        let (ks, ps) = chunk;
        let b = ks.len();
        // Individual-major centred block z[i * b + t] and per-variant weights.
        let mut z = vec![0.0; n * b];
        let weights: Vec<f64> = ps.iter().map(|p| 1.0 / (2.0 * p * (1.0 - p))).collect();
        for (t, (&k, &p)) in ks.iter().zip(ps).enumerate() {
            for (i, call) in genotypes.variant(k).iter().enumerate() {
                if let Some(s) = call {
                    z[i * b + t] = f64::from(*s) - 2.0 * p;
                }
            }
        }
        let mut rows: Vec<&mut [f64]> = Vec::with_capacity(n);
        let mut rest = lower.as_mut_slice();
        for i in 0..n {
            let (head, tail) = rest.split_at_mut(i + 1);
            rows.push(head);
            rest = tail;
        }
        rows.into_par_iter().enumerate().for_each(|(i, row)| {
            let zi = &z[i * b..(i + 1) * b];
            for (j, cell) in row.iter_mut().enumerate() {
                let zj = &z[j * b..(j + 1) * b];
                let dot: f64 = (0..b).map(|t| zi[t] * zj[t] * weights[t]).sum();
                *cell += dot * scale;
            }
        });
    }
    let mut grm = Grm::from_lower(n, used.len(), hash, lower)?;
    grm.monomorphic = monomorphic;
    Ok(grm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let g = Genotypes::from_rows(&[
            vec![Some(0), Some(2)],
            vec![Some(2), Some(0)],
            vec![Some(1), Some(1)],
        ])
        .unwrap();
        let grm = compute_grm(&g, 1).unwrap();
        assert_eq!(grm.get(0, 1), -4.0);
        assert_eq!(grm.get(1, 0), -4.0);
        assert_eq!(grm.get(0, 2), 0.0);
        assert_eq!(grm.get(0, 0), 4.0);
    }

    #[test]
    fn monomorphic_variants_are_reported() {
        let g = Genotypes::from_rows(&[
            vec![Some(0), Some(1), Some(0), None],
            vec![Some(2), Some(1), Some(1), Some(0)],
            vec![Some(1), Some(1), Some(2), Some(0)],
        ])
        .unwrap();
        let grm = compute_grm(&g, 2).unwrap();
        assert_eq!(grm.monomorphic, vec![3]);
        assert_eq!(grm.variants_used(), 3);
        let mono = Genotypes::from_rows(&[vec![Some(0)], vec![Some(0)]]).unwrap();
        assert!(compute_grm(&mono, 1).is_err());
    }

    #[test]
    fn file_round_trip() {
        let g = Genotypes::from_rows(&[
            vec![Some(0), Some(2), Some(1)],
            vec![Some(2), Some(0), Some(1)],
            vec![Some(1), None, Some(0)],
        ])
        .unwrap();
        let grm = compute_grm(&g, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        grm.write(&path).unwrap();
        let back = Grm::read(&path).unwrap();
        assert_eq!(back.lower(), grm.lower());
        assert_eq!(back.frequency_hash(), grm.frequency_hash());
        std::fs::write(&path, b"GRM0").unwrap();
        assert!(Grm::read(&path).is_err());
    }

    #[test]
    fn block_size_does_not_change_result() {
        let rows: Vec<Vec<Option<u8>>> = (0..40)
            .map(|i| {
                (0..25)
                    .map(|k| Some(((i * 7 + k * 3 + i * k) % 3) as u8))
                    .collect()
            })
            .collect();
        let g = Genotypes::from_rows(&rows).unwrap();
        let a = compute_grm(&g, 1).unwrap();
        let b = compute_grm(&g, 25).unwrap();
        for (x, y) in a.lower().iter().zip(b.lower()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
