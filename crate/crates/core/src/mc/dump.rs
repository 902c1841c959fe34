//! Binary dump of a `PathEnsemble` for cross-language regression.
//!
//! Little-endian layout:
//!
//! ```text
//! header:  n_paths u64 | K u64 | n u64 | m u64 | dt f64 | seed u64
//! states:      n_paths × (K+1) × n   f64, row-major
//! increments:  n_paths × K × m       f64, row-major
//! weights:     n_paths               f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{McError, PathEnsemble};

pub fn write_ensemble(path: &Path, ens: &PathEnsemble) -> Result<(), McError> {
    let mut w = BufWriter::new(File::create(path)?);
    let k = ens.n_steps() as u64;
    for v in [ens.n_paths() as u64, k, ens.n as u64, ens.m as u64] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&ens.dt.to_le_bytes())?;
    w.write_all(&ens.seed.to_le_bytes())?;
    for chunk in [ens.raw_states(), ens.raw_increments(), ens.weights()] {
        for v in chunk {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_ensemble(path: &Path) -> Result<PathEnsemble, McError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut u64_buf = [0u8; 8];
    let mut read_u64 = |r: &mut BufReader<File>| -> Result<u64, McError> {
        r.read_exact(&mut u64_buf)?;
        Ok(u64::from_le_bytes(u64_buf))
    };
    let n_paths = read_u64(&mut r)? as usize;
    let k = read_u64(&mut r)? as usize;
    let n = read_u64(&mut r)? as usize;
    let m = read_u64(&mut r)? as usize;
    let mut f64_buf = [0u8; 8];
    r.read_exact(&mut f64_buf)?;
    let dt = f64::from_le_bytes(f64_buf);
    r.read_exact(&mut f64_buf)?;
    let seed = u64::from_le_bytes(f64_buf);

    let read_block = |r: &mut BufReader<File>, len: usize| -> Result<Vec<f64>, McError> {
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };
    let states = read_block(&mut r, n_paths * (k + 1) * n)?;
    let increments = read_block(&mut r, n_paths * k * m)?;
    let weights = read_block(&mut r, n_paths)?;
    let time_grid = (0..=k).map(|i| i as f64 * dt).collect();
    Ok(PathEnsemble::from_raw(
        n, m, dt, seed, time_grid, states, increments, weights,
    ))
}
