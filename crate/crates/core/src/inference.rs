//! Inference from files: one proposal face and one voice, or a grid of faces
//! by voices.

use std::path::{Path, PathBuf};

use crate::audio::{self, MelSpectrogram};
use crate::data::{load_face, load_wav, save_face};
use crate::error::{Error, Result};
use crate::generator::FaceImage;
use crate::training::TrainedModels;

pub fn load_voice(path: &Path, sample_rate: u32) -> Result<MelSpectrogram> {
    audio::voice_features(&load_wav(path)?, sample_rate)
}

/// Morphs `face` towards the owner of `voice`.
pub fn infer(models: &TrainedModels, face: &FaceImage, voice: &MelSpectrogram) -> Result<FaceImage> {
    models.generator.generate(face, &models.embed(voice)?)
}

pub fn infer_files(
    models: &TrainedModels,
    face_path: &Path,
    voice_path: &Path,
    out_path: &Path,
    sample_rate: u32,
) -> Result<FaceImage> {
    let face = load_face(face_path)?;
    let voice = load_voice(voice_path, sample_rate)?;
    let out = infer(models, &face, &voice)?;
    save_face(&out, out_path)?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub face: usize,
    pub voice: usize,
    pub image: FaceImage,
}

/// Every face paired with every voice, faces outermost.
pub fn grid(models: &TrainedModels, faces: &[FaceImage], voices: &[MelSpectrogram]) -> Result<Vec<GridCell>> {
    if faces.is_empty() || voices.is_empty() {
        return Err(Error::InvalidInput("grid needs at least one face and one voice".into()));
    }
    let embeddings = voices.iter().map(|v| models.embed(v)).collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::with_capacity(faces.len() * voices.len());
    for (i, f) in faces.iter().enumerate() {
        for (j, e) in embeddings.iter().enumerate() {
            cells.push(GridCell {
                face: i,
                voice: j,
                image: models.generator.generate(f, e)?,
            });
        }
    }
    Ok(cells)
}

pub fn grid_file_name(face: usize, voice: usize) -> String {
    format!("face{face:02}_voice{voice:02}.png")
}

/// Writes one PNG per grid cell into `out_dir` and returns the paths.
pub fn grid_files(
    models: &TrainedModels,
    face_paths: &[PathBuf],
    voice_paths: &[PathBuf],
    out_dir: &Path,
    sample_rate: u32,
) -> Result<Vec<PathBuf>> {
    let faces = face_paths.iter().map(|p| load_face(p)).collect::<Result<Vec<_>>>()?;
    let voices = voice_paths
        .iter()
        .map(|p| load_voice(p, sample_rate))
        .collect::<Result<Vec<_>>>()?;
    let mut written = Vec::new();
    for cell in grid(models, &faces, &voices)? {
        let path = out_dir.join(grid_file_name(cell.face, cell.voice));
        save_face(&cell.image, &path)?;
        written.push(path);
    }
    Ok(written)
}
