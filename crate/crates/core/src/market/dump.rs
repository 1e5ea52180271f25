//! Little-endian binary dump of a [`PathEnsemble`].
//!
//! Layout: magic `BSDEPATH` (8 bytes), version `u32`, then `M`, `N`, `d`, `J`
//! as `u64` (`J = 0` when no fine data), followed by row-major `f64` arrays:
//! the coarse times `t_0..t_N`, `X[M][N+1][d]`, `dW[M][N][d]` and, when
//! `J > 0`, the fine states `X[M][N*J+1][d]` and increments `dW[M][N*J][d]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{MarketError, PathEnsemble, TimeGrid};
use crate::rng::{RandomSpec, Stream};

pub const DUMP_MAGIC: &[u8; 8] = b"BSDEPATH";
pub const DUMP_VERSION: u32 = 1;

pub fn write_dump(path: &Path, ensemble: &PathEnsemble) -> Result<(), MarketError> {
    let mut w = BufWriter::new(File::create(path)?);
    let (states, increments, fine) = ensemble.raw_parts();
    let j = ensemble.substeps().unwrap_or(0);
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    for v in [ensemble.count(), ensemble.steps(), ensemble.dim(), j] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    let grid = ensemble.grid();
    for k in 0..=grid.steps() {
        w.write_all(&grid.time(k).to_le_bytes())?;
    }
    write_f64s(&mut w, states)?;
    write_f64s(&mut w, increments)?;
    if let Some((fs, fi)) = fine {
        write_f64s(&mut w, fs)?;
        write_f64s(&mut w, fi)?;
    }
    w.flush()?;
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a dump back. The seed and stream are not part of the format, so the
/// returned ensemble carries `seed = 0` on a custom stream.
pub fn read_dump(path: &Path) -> Result<PathEnsemble, MarketError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(MarketError::Dump("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != DUMP_VERSION {
        return Err(MarketError::Dump(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for v in dims.iter_mut() {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        *v = u64::from_le_bytes(b8) as usize;
    }
    let [m, n, d, j] = dims;
    let times = read_f64s(&mut r, n + 1)?;
    let grid = TimeGrid::new(times[n], n, j.max(1))?;
    let states = read_f64s(&mut r, m * (n + 1) * d)?;
    let increments = read_f64s(&mut r, m * n * d)?;
    let fine = if j > 0 {
        Some((read_f64s(&mut r, m * (n * j + 1) * d)?, read_f64s(&mut r, m * n * j * d)?))
    } else {
        None
    };
    Ok(PathEnsemble::from_raw_parts(
        grid,
        m,
        d,
        RandomSpec::new(0, Stream::Custom(0)),
        states,
        increments,
        fine,
    ))
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>, MarketError> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| MarketError::Dump(format!("truncated array: {e}")))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}
