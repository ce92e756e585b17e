//! On-disk synthetic faces and pair lists.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::Landmarks;
use crate::error::{Error, Result};
use crate::faceworld::{render_face, FaceParams};
use crate::numerics::Rng;

use super::evaluate::SwapPair;
use super::io::{load_png, save_png};

/// Sidecar written next to every dataset image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceRecord {
    pub params: FaceParams,
    pub landmarks: Landmarks,
}

/// One line of a pairs file; relative paths resolve against the file's
/// directory. `landmarks` may name a sidecar or a bare landmark map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub source: PathBuf,
    pub target: PathBuf,
    pub landmarks: PathBuf,
}

/// Reads landmarks from a [`FaceRecord`] sidecar or a plain name → point map.
pub fn load_landmarks(path: &Path) -> Result<Landmarks> {
    let text = fs::read_to_string(path)?;
    if let Ok(rec) = serde_json::from_str::<FaceRecord>(&text) {
        return Ok(rec.landmarks);
    }
    Ok(serde_json::from_str(&text)?)
}

/// Renders `count` faces as `face_NNNN.png` plus `face_NNNN.json`, and a
/// `pairs.json` that swaps each even-numbered face into the next one.
pub fn write_dataset(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    if count == 0 {
        return Err(Error::config("dataset count must be positive"));
    }
    fs::create_dir_all(dir)?;
    let mut rng = Rng::with_stream(seed, 0xda);
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let params = FaceParams::random(&mut rng);
        let r = render_face(&params, size)?;
        let stem = format!("face_{i:04}");
        let png = dir.join(format!("{stem}.png"));
        save_png(&png, &r.image)?;
        let rec = FaceRecord { params, landmarks: r.landmarks };
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&rec)?)?;
        images.push(png);
    }
    let pairs: Vec<PairEntry> = (0..count / 2)
        .map(|k| PairEntry {
            source: format!("face_{:04}.png", 2 * k).into(),
            target: format!("face_{:04}.png", 2 * k + 1).into(),
            landmarks: format!("face_{:04}.json", 2 * k + 1).into(),
        })
        .collect();
    fs::write(dir.join("pairs.json"), serde_json::to_string_pretty(&pairs)?)?;
    Ok(images)
}

/// Loads every pair named in a pairs file.
pub fn load_pairs(path: &Path) -> Result<Vec<SwapPair>> {
    let entries: Vec<PairEntry> = serde_json::from_str(&fs::read_to_string(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    entries
        .iter()
        .map(|e| {
            Ok(SwapPair {
                source: load_png(&base.join(&e.source))?,
                target: load_png(&base.join(&e.target))?,
                target_landmarks: load_landmarks(&base.join(&e.landmarks))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let files = write_dataset(dir.path(), 3, 32, 5).unwrap();
        assert_eq!(files.len(), 3);
        let pairs = load_pairs(&dir.path().join("pairs.json")).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].source.shape(), &[3, 32, 32]);
        let rec: FaceRecord = serde_json::from_str(&fs::read_to_string(dir.path().join("face_0001.json")).unwrap()).unwrap();
        assert_eq!(pairs[0].target_landmarks, rec.landmarks);
    }

    #[test]
    fn bare_landmark_maps_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.json");
        fs::write(&p, r#"{"nose_tip": [10.5, 12.0]}"#).unwrap();
        assert_eq!(load_landmarks(&p).unwrap().get("nose_tip"), Some([10.5, 12.0]));
        fs::write(&p, r#"{"nose_tip": "x"}"#).unwrap();
        assert!(load_landmarks(&p).is_err());
        assert!(write_dataset(dir.path(), 0, 32, 1).is_err());
    }
}
