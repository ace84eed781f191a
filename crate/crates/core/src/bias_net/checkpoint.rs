//! Binary model checkpoints. All integers are little-endian `u32`, all reals
//! little-endian IEEE-754 `f64`:
//!
//! ```text
//! magic         8 bytes  "IVIOBNET"
//! version       u32      1
//! epochs        u32      training epochs completed
//! window        u32
//! kernel        u32
//! stem width    u32
//! block count   u32      B
//! blocks        B × (channels u32, stride u32)
//! output scale  f64
//! input mean    6 × f64  (ωx ωy ωz ax ay az)
//! input std     6 × f64
//! tensor count  u32      T
//! tensors       T × (rows u32, cols u32, rows·cols × f64 row-major)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, Vector6};

use super::{Architecture, BiasNet, BlockSpec, Normalization};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IVIOBNET";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::invalid(format!("{v} does not fit the checkpoint format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes `net` into the checkpoint layout.
pub fn write_checkpoint<W: Write>(net: &BiasNet, mut w: W) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
    put_u32(&mut out, net.epochs as usize)?;
    let a = &net.arch;
    put_u32(&mut out, a.window)?;
    put_u32(&mut out, a.kernel)?;
    put_u32(&mut out, a.stem_channels)?;
    put_u32(&mut out, a.blocks.len())?;
    for b in &a.blocks {
        put_u32(&mut out, b.channels)?;
        put_u32(&mut out, b.stride)?;
    }
    put_f64(&mut out, a.output_scale);
    for v in net.norm.mean.iter().chain(net.norm.std.iter()) {
        put_f64(&mut out, *v);
    }
    put_u32(&mut out, net.params.len())?;
    for p in &net.params {
        put_u32(&mut out, p.nrows())?;
        put_u32(&mut out, p.ncols())?;
        for r in 0..p.nrows() {
            for c in 0..p.ncols() {
                put_f64(&mut out, p[(r, c)]);
            }
        }
    }
    w.write_all(&out)
        .map_err(|e| Error::Data(format!("writing checkpoint: {e}")))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint, validating the layout against its architecture.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<BiasNet> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::Data(format!("reading checkpoint: {e}")))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Data(
            "not a bias network checkpoint (bad magic)".into(),
        ));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let epochs = c.u32()? as u32;
    let window = c.u32()?;
    let kernel = c.u32()?;
    let stem_channels = c.u32()?;
    let nblocks = c.u32()?;
    if nblocks > 1024 {
        return Err(Error::Data(format!("implausible block count {nblocks}")));
    }
    let mut blocks = Vec::with_capacity(nblocks);
    for _ in 0..nblocks {
        blocks.push(BlockSpec {
            channels: c.u32()?,
            stride: c.u32()?,
        });
    }
    let output_scale = c.f64()?;
    let arch = Architecture {
        window,
        kernel,
        stem_channels,
        blocks,
        output_scale,
    };
    arch.validate()
        .map_err(|e| Error::Data(format!("checkpoint architecture: {e}")))?;
    let mut mean = Vector6::zeros();
    let mut std = Vector6::zeros();
    for i in 0..6 {
        mean[i] = c.f64()?;
    }
    for i in 0..6 {
        std[i] = c.f64()?;
    }
    let shapes = arch.parameter_shapes();
    let count = c.u32()?;
    if count != shapes.len() {
        return Err(Error::Data(format!(
            "checkpoint has {count} tensors, architecture needs {}",
            shapes.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for (i, &(rows, cols)) in shapes.iter().enumerate() {
        let (r, cc) = (c.u32()?, c.u32()?);
        if (r, cc) != (rows, cols) {
            return Err(Error::Data(format!(
                "tensor {i} is {r}x{cc}, expected {rows}x{cols}"
            )));
        }
        let mut m = DMatrix::zeros(rows, cols);
        for ri in 0..rows {
            for ci in 0..cols {
                m[(ri, ci)] = c.f64()?;
            }
        }
        params.push(m);
    }
    if c.pos != buf.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after checkpoint",
            buf.len() - c.pos
        )));
    }
    if params
        .iter()
        .flat_map(|p| p.iter())
        .chain(mean.iter())
        .chain(std.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::Data("checkpoint contains non-finite values".into()));
    }
    Ok(BiasNet {
        arch,
        params,
        norm: Normalization { mean, std },
        epochs,
    })
}

pub fn save_checkpoint(net: &BiasNet, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(net, std::io::BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<BiasNet> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let mut net = BiasNet::new(Architecture::tiny(16), 9).unwrap();
        net.epochs = 7;
        net.norm.mean[2] = -0.25;
        net.norm.std[4] = 3.5;
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.params, net.params);
        assert_eq!(back.arch, net.arch);
        assert_eq!(back.norm, net.norm);
        assert_eq!(back.epochs, 7);
    }

    #[test]
    fn header_layout() {
        let net = BiasNet::new(Architecture::tiny(16), 9).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"IVIOBNET");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 16);
        // first stem weight, row-major
        let nblocks = net.arch.blocks.len();
        let off = 8 + 4 * 6 + 8 * nblocks + 8 + 96 + 4 + 8;
        assert_eq!(
            f64::from_le_bytes(buf[off..off + 8].try_into().unwrap()),
            net.params[0][(0, 0)]
        );
        assert_eq!(
            f64::from_le_bytes(buf[off + 8..off + 16].try_into().unwrap()),
            net.params[0][(0, 1)]
        );
        let total: usize = net.params.iter().map(|p| 8 + 8 * p.len()).sum();
        assert_eq!(buf.len(), off - 8 + total);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let net = BiasNet::new(Architecture::tiny(16), 9).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra[..]).is_err());
    }
}
