use crate::data::volume::BinaryMask3D;
use crate::error::{Error, Result};

fn check_same_dims(x: &BinaryMask3D, y: &BinaryMask3D) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::shape(format!(
            "mask dims differ: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    Ok(())
}

/// Dice similarity coefficient `2|X∩Y| / (|X| + |Y|)`.
pub fn dsc(x: &BinaryMask3D, y: &BinaryMask3D) -> Result<f64> {
    check_same_dims(x, y)?;
    let (mut both, mut nx, mut ny) = (0usize, 0usize, 0usize);
    for (&a, &b) in x.data().iter().zip(y.data()) {
        both += (a & b) as usize;
        nx += a as usize;
        ny += b as usize;
    }
    if nx + ny == 0 {
        return Err(Error::Degenerate("dice of two empty masks is undefined".into()));
    }
    Ok(2.0 * both as f64 / (nx + ny) as f64)
}

/// Foreground voxels with at least one face neighbour that is background or
/// outside the volume.
pub fn boundary(mask: &BinaryMask3D) -> BinaryMask3D {
    let [nz, ny, nx] = mask.dims();
    let mut out = BinaryMask3D::zeros(mask.dims(), mask.spacing_mm()).expect("dims already valid");
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.get(z, y, x) {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == nz || y + 1 == ny || x + 1 == nx;
                let exposed = edge
                    || !mask.get(z - 1, y, x)
                    || !mask.get(z + 1, y, x)
                    || !mask.get(z, y - 1, x)
                    || !mask.get(z, y + 1, x)
                    || !mask.get(z, y, x - 1)
                    || !mask.get(z, y, x + 1);
                out.set(z, y, x, exposed);
            }
        }
    }
    out
}

/// Exact squared distance transform of one line (lower envelope of parabolas),
/// with sample spacing `step`. `f` holds 0 at sites and `inf` elsewhere, or the
/// partial result of a previous axis.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let a = step * step;
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_infinite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let (qf, pf) = (q as f64, p as f64);
            let s = ((fq + a * qf * qf) - (f[p] + a * pf * pf)) / (2.0 * a * (qf - pf));
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = a * d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest voxel of
/// `sites`. `spacing_mm` is `[x, y, z]`.
pub fn squared_distance_transform(sites: &BinaryMask3D, spacing_mm: [f64; 3]) -> Vec<f64> {
    let dims = sites.dims();
    let step = [spacing_mm[2], spacing_mm[1], spacing_mm[0]];
    let mut g: Vec<f64> = sites
        .data()
        .iter()
        .map(|&s| if s == 1 { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let len = dims[axis];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for start in 0..g.len() {
            if (start / strides[axis]) % len != 0 {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = g[start + i * strides[axis]];
            }
            edt_1d(&line, step[axis], &mut out, &mut v, &mut z);
            for (i, &o) in out.iter().enumerate() {
                g[start + i * strides[axis]] = o;
            }
        }
    }
    g
}

/// Nearest-rank percentile: the `⌈q·n/100⌉`-th smallest value (1-based).
pub fn nearest_rank_percentile(values: &mut [f64], q: u32) -> Result<f64> {
    if values.is_empty() || q == 0 || q > 100 {
        return Err(Error::invalid("nearest-rank percentile needs values and q in 1..=100"));
    }
    let n = values.len();
    let rank = (q as usize * n).div_ceil(100);
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*v)
}

fn directed_hd95(from: &BinaryMask3D, to_sq_dist: &[f64]) -> Result<f64> {
    let mut d: Vec<f64> = from
        .data()
        .iter()
        .zip(to_sq_dist)
        .filter(|(&b, _)| b == 1)
        .map(|(_, &sq)| sq.sqrt())
        .collect();
    nearest_rank_percentile(&mut d, 95)
}

/// 95th-percentile Hausdorff distance in mm between the boundaries of two
/// masks. `spacing_mm` is `[x, y, z]`.
pub fn hd95(x: &BinaryMask3D, y: &BinaryMask3D, spacing_mm: [f64; 3]) -> Result<f64> {
    check_same_dims(x, y)?;
    if spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::invalid(format!("spacing {spacing_mm:?} must be positive")));
    }
    if x.count() == 0 || y.count() == 0 {
        return Err(Error::Degenerate("hausdorff distance needs two non-empty masks".into()));
    }
    let (bx, by) = (boundary(x), boundary(y));
    let dx = squared_distance_transform(&bx, spacing_mm);
    let dy = squared_distance_transform(&by, spacing_mm);
    Ok(directed_hd95(&bx, &dy)?.max(directed_hd95(&by, &dx)?))
}
