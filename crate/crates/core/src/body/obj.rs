use std::fmt::Write as _;
use std::path::Path;

use crate::body::BodyMesh;
use crate::error::{io_err, Error, Result};

/// Writes `mesh` as Wavefront OBJ with 1-based face indices.
pub fn export_obj(mesh: &BodyMesh, faces: &[[usize; 3]], path: &Path) -> Result<()> {
    let nv = mesh.vertices.len() / 3;
    if nv == 0 {
        return Err(Error::InvalidParams("mesh has no vertices".into()));
    }
    if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= nv)) {
        return Err(Error::InvalidParams(format!("face {f:?} indexes past {nv} vertices")));
    }
    let mut text = String::with_capacity(nv * 40 + faces.len() * 20);
    for v in mesh.vertices.chunks(3) {
        writeln!(text, "v {:.9} {:.9} {:.9}", v[0], v[1], v[2]).expect("string write");
    }
    for f in faces {
        writeln!(text, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).expect("string write");
    }
    std::fs::write(path, text).map_err(io_err(path))
}
