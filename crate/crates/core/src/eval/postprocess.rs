use std::collections::VecDeque;

use crate::data::volume::{BinaryMask3D, ProbabilityMap};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Binarizes a probability volume: `p >= theta` is foreground.
pub fn threshold(prob: &ProbabilityMap, theta: f32) -> Result<BinaryMask3D> {
    if let Some(&bad) = prob.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("probability {bad} outside [0, 1]")));
    }
    let data = prob.data().iter().map(|&p| (p >= theta) as u8).collect();
    BinaryMask3D::new(prob.dims(), prob.spacing_mm(), data)
}

const FACE: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

fn step(dims: [usize; 3], zyx: [usize; 3], d: [isize; 3]) -> Option<[usize; 3]> {
    let mut out = [0; 3];
    for i in 0..3 {
        let v = zyx[i] as isize + d[i];
        if v < 0 || v >= dims[i] as isize {
            return None;
        }
        out[i] = v as usize;
    }
    Some(out)
}

fn unravel(dims: [usize; 3], i: usize) -> [usize; 3] {
    [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
}

fn ravel(dims: [usize; 3], p: [usize; 3]) -> usize {
    (p[0] * dims[1] + p[1]) * dims[2] + p[2]
}

/// Fills every background region that is not 6-connected to the volume border.
pub fn fill_holes_3d(mask: &BinaryMask3D) -> BinaryMask3D {
    let dims = mask.dims();
    let data = mask.data();
    let mut outside = vec![false; data.len()];
    let mut queue = VecDeque::new();
    for (i, &v) in data.iter().enumerate() {
        let p = unravel(dims, i);
        let on_border = (0..3).any(|a| p[a] == 0 || p[a] + 1 == dims[a]);
        if v == 0 && on_border {
            outside[i] = true;
            queue.push_back(p);
        }
    }
    while let Some(p) = queue.pop_front() {
        for d in FACE {
            if let Some(q) = step(dims, p, d) {
                let j = ravel(dims, q);
                if data[j] == 0 && !outside[j] {
                    outside[j] = true;
                    queue.push_back(q);
                }
            }
        }
    }
    let filled = outside.iter().map(|&o| (!o) as u8).collect();
    BinaryMask3D::new(dims, mask.spacing_mm(), filled).expect("binary by construction")
}

/// 26-connected component labels (1-based, in order of first voxel) and sizes.
pub fn label_components(mask: &BinaryMask3D) -> (Vec<u32>, Vec<usize>) {
    let dims = mask.dims();
    let data = mask.data();
    let mut labels = vec![0u32; data.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if data[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(unravel(dims, start));
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let Some(q) = step(dims, p, [dz, dy, dx]) else { continue };
                        let j = ravel(dims, q);
                        if data[j] == 1 && labels[j] == 0 {
                            labels[j] = label;
                            queue.push_back(q);
                        }
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps the largest 26-connected component. Ties go to the component whose
/// first voxel comes earliest in linear order.
pub fn largest_component(mask: &BinaryMask3D) -> Result<BinaryMask3D> {
    let (labels, sizes) = label_components(mask);
    let mut best = None;
    for (i, &s) in sizes.iter().enumerate() {
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((i as u32 + 1, s));
        }
    }
    let (keep, _) = best.ok_or_else(|| Error::Degenerate("mask has no foreground component".into()))?;
    let data = labels.iter().map(|&l| (l == keep) as u8).collect();
    BinaryMask3D::new(mask.dims(), mask.spacing_mm(), data)
}

/// Hole filling followed by largest-component selection.
pub fn clean_mask(mask: &BinaryMask3D) -> Result<BinaryMask3D> {
    largest_component(&fill_holes_3d(mask))
}

/// Threshold, 3D hole filling, largest connected component.
pub fn postprocess(prob: &ProbabilityMap, theta: f32) -> Result<BinaryMask3D> {
    clean_mask(&threshold(prob, theta)?)
}
