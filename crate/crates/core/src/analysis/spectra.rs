use std::path::{Path, PathBuf};

use crate::backbone::Backbone;
use crate::error::{ensure, Error, Result};
use crate::lowpass::spectrum;
use crate::tensor::Scalar;

/// Writes `<name>.csv` and `<name>.pgm` for every depthwise or downsampling kernel.
pub fn export_spectra<T: Scalar>(model: &mut Backbone<T>, out_dir: &Path, grid: usize) -> Result<Vec<PathBuf>> {
    let kernels = model.spatial_kernels()?;
    ensure!(!kernels.is_empty(), "model has no depthwise or downsampling kernels");
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (name, side, taps) in kernels {
        let s = spectrum(&taps, side, side, grid.max(side))?;
        let csv = out_dir.join(format!("{name}.csv"));
        std::fs::write(&csv, s.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let pgm = out_dir.join(format!("{name}.pgm"));
        std::fs::write(&pgm, s.to_pgm()).map_err(|e| Error::io(&pgm, e))?;
        written.push(csv);
        written.push(pgm);
    }
    Ok(written)
}
