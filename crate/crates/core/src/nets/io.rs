//! `AMNP` parameter files.
//!
//! ```text
//! "AMNP" | family u8 | L u32 | h u32 | d u32 | c u32 | n_x u32 | flags u8 | alpha f64 | beta f64
//! tensors, f64 LE, in `NetParams::slices` order
//! ```
//!
//! Flag bit 0 is `residual`, bit 1 is `homogenize`.

use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Family, Model, NetParams, NetSpec};
use crate::binio;
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"AMNP";
const FLAG_RESIDUAL: u8 = 1;
const FLAG_HOMOGENIZE: u8 = 2;

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = &model.spec;
    let mut w = binio::create(path)?;
    let io = |e| Error::io(path, e);
    std::io::Write::write_all(&mut w, PARAMS_MAGIC).map_err(io)?;
    w.write_u8(match s.family {
        Family::SupportNet => 0,
        Family::KeyNet => 1,
    })
    .map_err(io)?;
    for v in [s.depth, s.width, s.input_dim, s.clusters, s.reinject] {
        w.write_u32::<LittleEndian>(v as u32).map_err(io)?;
    }
    let mut flags = 0;
    if s.residual {
        flags |= FLAG_RESIDUAL;
    }
    if s.homogenize {
        flags |= FLAG_HOMOGENIZE;
    }
    w.write_u8(flags).map_err(io)?;
    w.write_f64::<LittleEndian>(s.alpha).map_err(io)?;
    w.write_f64::<LittleEndian>(s.beta).map_err(io)?;
    for t in model.params.slices() {
        for &v in t {
            w.write_f64::<LittleEndian>(v).map_err(io)?;
        }
    }
    binio::finish(path, w)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let mut r = binio::open(path)?;
    binio::expect_magic(&mut r, PARAMS_MAGIC)?;
    let family = match binio::read_u8(&mut r, "family")? {
        0 => Family::SupportNet,
        1 => Family::KeyNet,
        other => return Err(Error::format("family", format!("unknown tag {other}"))),
    };
    let mut dims = [0usize; 5];
    for (v, name) in dims.iter_mut().zip(["L", "h", "d", "c", "n_x"]) {
        *v = r.read_u32::<LittleEndian>().map_err(binio::truncated(name))? as usize;
    }
    let flags = binio::read_u8(&mut r, "flags")?;
    if flags & !(FLAG_RESIDUAL | FLAG_HOMOGENIZE) != 0 {
        return Err(Error::format("flags", format!("unknown bits {flags:#04x}")));
    }
    let alpha = r.read_f64::<LittleEndian>().map_err(binio::truncated("alpha"))?;
    let beta = r.read_f64::<LittleEndian>().map_err(binio::truncated("beta"))?;
    let spec = NetSpec {
        family,
        depth: dims[0],
        width: dims[1],
        input_dim: dims[2],
        clusters: dims[3],
        reinject: dims[4],
        residual: flags & FLAG_RESIDUAL != 0,
        homogenize: flags & FLAG_HOMOGENIZE != 0,
        alpha,
        beta,
    };
    spec.validate()
        .map_err(|e| Error::format("spec", e.to_string()))?;
    let mut params = NetParams::zeros(&spec);
    for t in params.slices_mut() {
        r.read_f64_into::<LittleEndian>(t)
            .map_err(binio::truncated("tensors"))?;
    }
    binio::expect_eof(&mut r, "tensors")?;
    if !params.all_finite() {
        return Err(Error::format("tensors", "non-finite parameter"));
    }
    Model::new(spec, params)
}
