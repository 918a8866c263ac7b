//! Binary grid files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "HCBF" | version: u32 | ndim: u32 | ndim × { count: u32, lower: f64, upper: f64 } | values: f64…
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Axis, Grid, GridFn, MAX_DIM};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HCBF";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_grid(f: &GridFn, w: &mut impl Write) -> std::io::Result<()> {
    let g = f.grid();
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(g.ndim() as u32).to_le_bytes())?;
    for a in g.axes() {
        w.write_all(&(a.count as u32).to_le_bytes())?;
        w.write_all(&a.lower.to_le_bytes())?;
        w.write_all(&a.upper.to_le_bytes())?;
    }
    for v in f.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_grid(f: &GridFn, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_grid(f, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("unexpected end of data".into()),
            _ => Error::Format(e.to_string()),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }
}

pub fn read_grid(r: impl Read) -> Result<GridFn> {
    let mut c = Cursor { inner: r };
    if &c.take::<4>()? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let ndim = c.u32()? as usize;
    if ndim == 0 || ndim > MAX_DIM {
        return Err(Error::Format(format!("bad ndim {ndim}")));
    }
    let mut axes = Vec::with_capacity(ndim);
    for k in 0..ndim {
        let count = c.u32()? as usize;
        let lower = c.f64()?;
        let upper = c.f64()?;
        if count < 3 || !(lower < upper) {
            return Err(Error::Format(format!(
                "bad axis {k}: count {count}, bounds [{lower}, {upper}]"
            )));
        }
        axes.push(Axis::new(count, lower, upper));
    }
    let grid = Grid::new(axes).map_err(|e| Error::Format(e.to_string()))?;
    let mut values = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        values.push(c.f64()?);
    }
    let mut probe = [0u8; 1];
    if c.inner.read(&mut probe).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(Error::Format("trailing data after values".into()));
    }
    GridFn::new(grid, values).map_err(|e| Error::Format(e.to_string()))
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<GridFn> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_grid(BufReader::new(file))
}
