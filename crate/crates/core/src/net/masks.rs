use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use super::ForwardOutputs;
use crate::error::{Error, Result};
use crate::synth::PixelBox;

/// Spatial attention of one branch (or the shared block) at input resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchMask {
    pub name: String,
    pub size: usize,
    /// One `size × size` row-major map per sample, values in (0, 1).
    pub maps: Vec<Vec<f64>>,
}

fn group_of(mask_name: &str) -> &str {
    mask_name.split('.').next().unwrap_or(mask_name)
}

/// Per-branch masks: the mean of a branch's gate masks after nearest-neighbour
/// upsampling to the input size. The shared block's gate forms its own group.
pub fn attention_masks(outputs: &ForwardOutputs) -> Result<Vec<BranchMask>> {
    if outputs.masks.is_empty() {
        return Err(Error::NoAttention);
    }
    let size = outputs.image_size;
    let n = outputs.len();
    let mut groups: Vec<BranchMask> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for (name, mask) in &outputs.masks {
        let group = group_of(name);
        let idx = match groups.iter().position(|g| g.name == group) {
            Some(i) => i,
            None => {
                groups.push(BranchMask { name: group.to_string(), size, maps: vec![vec![0.0; size * size]; n] });
                counts.push(0);
                groups.len() - 1
            }
        };
        counts[idx] += 1;
        let (h, w) = (mask.shape()[2], mask.shape()[3]);
        for (s, map) in groups[idx].maps.iter_mut().enumerate() {
            let plane = &mask.data()[s * h * w..(s + 1) * h * w];
            for y in 0..size {
                for x in 0..size {
                    map[y * size + x] += plane[(y * h / size) * w + x * w / size];
                }
            }
        }
    }
    for (g, &c) in groups.iter_mut().zip(&counts) {
        for map in &mut g.maps {
            map.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    Ok(groups)
}

/// Fraction of a map's total mass that falls inside `area`.
pub fn mask_mass_inside(map: &[f64], size: usize, area: &PixelBox) -> f64 {
    let total: f64 = map.iter().sum();
    let inside: f64 = (0..size * size).filter(|i| area.contains(i % size, i / size)).map(|i| map[i]).sum();
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}

/// Writes sample `index` of every branch mask as `<dir>/<prefix>_<branch>.png`
/// (grayscale, 0 → black, 1 → white).
pub fn export_masks(masks: &[BranchMask], index: usize, dir: impl AsRef<Path>, prefix: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir.as_ref())?;
    let mut paths = Vec::new();
    for m in masks {
        let map = m.maps.get(index).ok_or(Error::OutOfRange { what: "sample", id: index, limit: m.maps.len() })?;
        let img = GrayImage::from_fn(m.size as u32, m.size as u32, |x, y| {
            Luma([(map[y as usize * m.size + x as usize] * 255.0).round().clamp(0.0, 255.0) as u8])
        });
        let path = dir.as_ref().join(format!("{prefix}_{}.png", m.name));
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
