use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Top-left corners of the crop windows for one image, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPlan {
    pub crop: usize,
    pub positions: Vec<(usize, usize)>,
}

impl CropPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Offsets `0, step, 2·step, …` along an axis of length `dim`, plus a final
/// window snapped to the far border when the grid stops short of it.
pub fn axis_positions(dim: usize, crop: usize, step: usize) -> Vec<usize> {
    let last = dim - crop;
    let mut out: Vec<usize> = (0..=last).step_by(step).collect();
    if !last.is_multiple_of(step) {
        out.push(last);
    }
    out
}

/// Number of windows along one axis: `⌊(dim−crop)/step⌋ + 1`, plus one when
/// the grid misses the border.
pub fn axis_count(dim: usize, crop: usize, step: usize) -> usize {
    let span = dim - crop;
    span / step + 1 + usize::from(!span.is_multiple_of(step))
}

pub fn plan_crops(width: usize, height: usize, crop: usize, step: usize) -> Result<CropPlan> {
    if crop == 0 || step == 0 {
        return Err(invalid!("crop and step must be positive (crop {crop}, step {step})"));
    }
    if width < crop || height < crop {
        return Err(invalid!("image {width}x{height} smaller than crop {crop}"));
    }
    let xs = axis_positions(width, crop, step);
    let ys = axis_positions(height, crop, step);
    let positions = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect();
    Ok(CropPlan { crop, positions })
}
