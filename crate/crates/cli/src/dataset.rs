//! On-disk layout shared by `synth` and `bench`:
//!
//! ```text
//! <dir>/dataset.toml          classes = K
//! <dir>/rig.toml              calibration rig
//! <dir>/frames/NNNN/cloud.flpc
//! <dir>/frames/NNNN/camC.flfm one per rig camera
//! ```

use std::path::{Path, PathBuf};

use fuselab::calib::CalibrationRig;
use fuselab::eval::Frame;
use fuselab::fusion::FeatureMap;
use fuselab::pointcloud::{load_cloud, save_cloud, LabelArray, PointCloud};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    classes: usize,
}

pub fn frame_dir(root: &Path, index: usize) -> PathBuf {
    root.join("frames").join(format!("{index:04}"))
}

pub fn write_manifest(root: &Path, classes: usize) -> Result<(), CliError> {
    let text = toml::to_string(&Manifest { classes }).map_err(|e| CliError::Usage(e.to_string()))?;
    let path = root.join("dataset.toml");
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

pub fn write_frame(
    root: &Path,
    index: usize,
    cloud: &PointCloud,
    labels: &LabelArray,
    maps: &[FeatureMap],
) -> Result<(), CliError> {
    let dir = frame_dir(root, index);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    save_cloud(cloud, Some(labels), &dir.join("cloud.flpc"))?;
    for (cam, map) in maps.iter().enumerate() {
        map.save(&dir.join(format!("cam{cam}.flfm")))?;
    }
    Ok(())
}

fn read_classes(root: &Path) -> Result<usize, CliError> {
    let path = root.join("dataset.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if manifest.classes == 0 {
        return Err(CliError::Usage(format!("{}: classes must be positive", path.display())));
    }
    Ok(manifest.classes)
}

/// Loads every frame under `root/frames`, ordered by directory name. Frame
/// ids are the positions in that order.
pub fn load_dataset(root: &Path) -> Result<Vec<Frame>, CliError> {
    let classes = read_classes(root)?;
    let rig = CalibrationRig::load(&root.join("rig.toml"))?;
    let frames_dir = root.join("frames");
    let mut dirs = std::fs::read_dir(&frames_dir)
        .map_err(|e| CliError::io(&frames_dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| CliError::io(&frames_dir, e)))
        .collect::<Result<Vec<_>, _>>()?;
    dirs.retain(|p| p.is_dir());
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Usage(format!("{} holds no frames", frames_dir.display())));
    }
    dirs.iter()
        .enumerate()
        .map(|(id, dir)| {
            let (cloud, labels) = load_cloud(&dir.join("cloud.flpc"), classes)?;
            let labels = labels
                .ok_or_else(|| CliError::Usage(format!("{}: cloud has no labels", dir.display())))?;
            let maps = (0..rig.len())
                .map(|cam| FeatureMap::load(&dir.join(format!("cam{cam}.flfm"))))
                .collect::<fuselab::Result<Vec<_>>>()?;
            Ok(Frame {
                id: id as u64,
                cloud,
                labels,
                rig: rig.clone(),
                maps,
            })
        })
        .collect()
}
