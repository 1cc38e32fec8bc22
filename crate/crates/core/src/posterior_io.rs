//! Binary posterior files, the only artifact passed between stages.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "BMFPOST1"
//! version    u32      1
//! k          u32
//! side       u8       0 = X, 1 = W
//! kind       u8       0 = MM, 1 = DM, 2 = GMM
//! row_start  u64      first permuted row/column position covered
//! row_end    u64      one past the last
//! then per row:
//!   c        u32      number of components (1 unless kind = GMM)
//!   per component:
//!     weight     f64
//!     mean       k x f64
//!     precision  k(k+1)/2 x f64, upper triangle row by row
//! ```
//!
//! Files are written to a temporary sibling and renamed into place, so a
//! reader never observes a partial write.

use std::fs;
use std::ops::Range;
use std::path::Path;

use nalgebra::DVector;

use crate::approx::{ApproxKind, GmmComponent, GmmPosterior, RowPosterior, SidePosteriors};
use crate::error::{Error, Result};
use crate::linalg::{pack_upper, unpack_upper};
use crate::sampler::Side;

pub const MAGIC: &[u8; 8] = b"BMFPOST1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorFile {
    pub k: usize,
    pub side: Side,
    pub kind: ApproxKind,
    pub rows: Range<usize>,
    pub posteriors: SidePosteriors,
}

impl PosteriorFile {
    pub fn new(
        k: usize,
        side: Side,
        kind: ApproxKind,
        rows: Range<usize>,
        posteriors: SidePosteriors,
    ) -> Result<Self> {
        let file = PosteriorFile {
            k,
            side,
            kind,
            rows,
            posteriors,
        };
        file.check().map_err(Error::Validation)?;
        Ok(file)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.posteriors.len() != self.rows.len() {
            return Err(format!(
                "{} posteriors for row range {:?}",
                self.posteriors.len(),
                self.rows
            ));
        }
        let dims_ok = match &self.posteriors {
            SidePosteriors::Gaussian(v) => v.iter().all(|p| p.k() == self.k),
            SidePosteriors::Gmm(v) => v.iter().all(|g| {
                g.components
                    .iter()
                    .all(|c| c.mean.len() == self.k && c.precision.nrows() == self.k)
            }),
        };
        if !dims_ok {
            return Err(format!("posterior dimension differs from K = {}", self.k));
        }
        if matches!(self.posteriors, SidePosteriors::Gmm(_)) != (self.kind == ApproxKind::Gmm) {
            return Err("mixture posteriors must be tagged GMM and vice versa".into());
        }
        Ok(())
    }
}

fn put_component(out: &mut Vec<u8>, weight: f64, mean: &DVector<f64>, prec: &nalgebra::DMatrix<f64>) {
    out.extend_from_slice(&weight.to_le_bytes());
    for v in mean.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in pack_upper(prec) {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(file: &PosteriorFile) -> Vec<u8> {
    let k = file.k;
    let per_comp = 8 * (1 + k + k * (k + 1) / 2);
    let mut out = Vec::with_capacity(38 + file.rows.len() * (4 + per_comp));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.push(match file.side {
        Side::X => 0,
        Side::W => 1,
    });
    out.push(file.kind.code());
    out.extend_from_slice(&(file.rows.start as u64).to_le_bytes());
    out.extend_from_slice(&(file.rows.end as u64).to_le_bytes());
    match &file.posteriors {
        SidePosteriors::Gaussian(v) => {
            for p in v {
                out.extend_from_slice(&1u32.to_le_bytes());
                put_component(&mut out, 1.0, &p.mean, &p.precision);
            }
        }
        SidePosteriors::Gmm(v) => {
            for g in v {
                out.extend_from_slice(&(g.components.len() as u32).to_le_bytes());
                for c in &g.components {
                    put_component(&mut out, c.weight, &c.mean, &c.precision);
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<PosteriorFile, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let k = r.u32()? as usize;
    if k == 0 {
        return Err("K = 0".into());
    }
    let side = match r.u8()? {
        0 => Side::X,
        1 => Side::W,
        s => return Err(format!("unknown side tag {s}")),
    };
    let kind = ApproxKind::from_code(r.u8()?).ok_or("unknown approximation kind")?;
    let start = r.u64()? as usize;
    let end = r.u64()? as usize;
    if end < start {
        return Err(format!("row range {start}..{end} is reversed"));
    }
    let n_upper = k * (k + 1) / 2;
    let mut gaussians = Vec::new();
    let mut mixtures = Vec::new();
    for row in 0..end - start {
        let c = r.u32()? as usize;
        if c == 0 || (kind != ApproxKind::Gmm && c != 1) {
            return Err(format!("row {row}: {c} components under kind {kind:?}"));
        }
        let mut comps = Vec::with_capacity(c);
        for _ in 0..c {
            let weight = r.f64s(1)?[0];
            let mean = DVector::from_vec(r.f64s(k)?);
            let precision = unpack_upper(k, &r.f64s(n_upper)?);
            comps.push(GmmComponent {
                weight,
                mean,
                precision,
            });
        }
        if kind == ApproxKind::Gmm {
            mixtures.push(GmmPosterior { components: comps });
        } else {
            let c = comps.pop().unwrap();
            gaussians.push(RowPosterior {
                mean: c.mean,
                precision: c.precision,
            });
        }
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let posteriors = if kind == ApproxKind::Gmm {
        SidePosteriors::Gmm(mixtures)
    } else {
        SidePosteriors::Gaussian(gaussians)
    };
    Ok(PosteriorFile {
        k,
        side,
        kind,
        rows: start..end,
        posteriors,
    })
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<PosteriorFile> {
    parse(bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn write_posterior_file(path: impl AsRef<Path>, file: &PosteriorFile) -> Result<()> {
    let path = path.as_ref();
    file.check().map_err(Error::Validation)?;
    let tmp = path.with_extension("post.tmp");
    fs::write(&tmp, encode(file)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_posterior_file(path: impl AsRef<Path>) -> Result<PosteriorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
