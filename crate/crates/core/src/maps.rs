//! Export of TokenLearner spatial attention maps as 8-bit PGM images.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::error::Result;
use crate::model::{build_model, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::load_weights;

/// Binary (`P5`) PGM of an `h×w` map with values in `[0, 1]`, scaled by 255 and rounded.
pub fn encode_pgm(values: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Writes one file per (frame, token) of the first TokenLearner's weight
/// maps, named `frame{t}_token{s}.pgm`. Returns the paths in frame-major order.
pub fn export_attention_maps(model: &Model, sample: &Tensor, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let maps = model.first_tokenlearner_maps(sample)?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (t, m) in maps.iter().enumerate() {
        let [h, w, s] = [m.shape()[0], m.shape()[1], m.shape()[2]];
        for token in 0..s {
            let plane: Vec<f64> = (0..h * w).map(|p| m.data()[p * s + token]).collect();
            let path = dir.join(format!("frame{t}_token{token}.pgm"));
            fs::write(&path, encode_pgm(&plane, h, w))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// [`export_attention_maps`] for a model restored from a checkpoint.
pub fn export_from_checkpoint(
    cfg: &ModelConfig,
    ckpt: impl AsRef<Path>,
    sample: &Tensor,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let mut model = build_model(cfg, 0)?;
    load_weights(&mut model, &checkpoint::load(ckpt)?)?;
    export_attention_maps(&model, sample, dir)
}
