//! Columnar binary draw files and run manifests.
//!
//! `draws.bin` layout, little endian: magic `BGDRAWS1`, then `u64`
//! n_chains, n_aes, n_coef; per chain `u64` seed and length followed by
//! the β columns (one per AE), δ columns as bytes, α columns (AE-major,
//! coefficient-minor) and the deviance column.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::ChainDraws;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BGDRAWS1";

fn put_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s<W: Write, I: IntoIterator<Item = f64>>(w: &mut W, it: I) -> std::io::Result<()> {
    for v in it {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_draws<W: Write>(mut w: W, chains: &[ChainDraws], seeds: &[u64]) -> std::io::Result<()> {
    let (j_n, p) = chains.first().map_or((0, 0), |c| (c.n_aes, c.n_coef));
    w.write_all(MAGIC)?;
    put_u64(&mut w, chains.len() as u64)?;
    put_u64(&mut w, j_n as u64)?;
    put_u64(&mut w, p as u64)?;
    for (c, &seed) in chains.iter().zip(seeds) {
        let n = c.len();
        put_u64(&mut w, seed)?;
        put_u64(&mut w, n as u64)?;
        for j in 0..j_n {
            put_f64s(&mut w, (0..n).map(|t| c.beta_at(t, j)))?;
        }
        for j in 0..j_n {
            let col: Vec<u8> = (0..n).map(|t| c.delta[t * j_n + j]).collect();
            w.write_all(&col)?;
        }
        for j in 0..j_n {
            for l in 0..p {
                put_f64s(&mut w, (0..n).map(|t| c.alpha_at(t, j, l)))?;
            }
        }
        put_f64s(&mut w, c.deviance.iter().copied())?;
    }
    w.flush()
}

pub fn write_draws_file(path: &Path, chains: &[ChainDraws], seeds: &[u64]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_draws(BufWriter::new(f), chains, seeds).map_err(|e| Error::io(path, e))
}

fn get_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// Reads chains and their seeds.
pub fn read_draws<R: Read>(mut r: R) -> std::io::Result<(Vec<ChainDraws>, Vec<u64>)> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a draws file"));
    }
    let n_chains = get_u64(&mut r)? as usize;
    let j_n = get_u64(&mut r)? as usize;
    let p = get_u64(&mut r)? as usize;
    let mut chains = Vec::with_capacity(n_chains);
    let mut seeds = Vec::with_capacity(n_chains);
    for _ in 0..n_chains {
        seeds.push(get_u64(&mut r)?);
        let n = get_u64(&mut r)? as usize;
        let mut c = ChainDraws {
            n_aes: j_n,
            n_coef: p,
            beta: vec![0.0; n * j_n],
            delta: vec![0; n * j_n],
            alpha: vec![0.0; n * j_n * p],
            deviance: Vec::new(),
        };
        for j in 0..j_n {
            for (t, v) in get_f64s(&mut r, n)?.into_iter().enumerate() {
                c.beta[t * j_n + j] = v;
            }
        }
        for j in 0..j_n {
            let mut col = vec![0u8; n];
            r.read_exact(&mut col)?;
            for (t, v) in col.into_iter().enumerate() {
                c.delta[t * j_n + j] = v;
            }
        }
        for j in 0..j_n {
            for l in 0..p {
                for (t, v) in get_f64s(&mut r, n)?.into_iter().enumerate() {
                    c.alpha[(t * j_n + j) * p + l] = v;
                }
            }
        }
        c.deviance = get_f64s(&mut r, n)?;
        chains.push(c);
    }
    Ok((chains, seeds))
}

pub fn read_draws_file(path: &Path) -> Result<(Vec<ChainDraws>, Vec<u64>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_draws(BufReader::new(f)).map_err(|e| Error::io(path, e))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Self-describing record of a run. Holds no timestamps so identical
/// inputs give identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub epsilon: Option<crate::ontology::Epsilon>,
    pub inputs: Vec<FileHash>,
    /// Output files relative to the run directory.
    pub outputs: Vec<FileHash>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(Error::from)
    }
}
