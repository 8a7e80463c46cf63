//! Independent reference implementations used to check the evaluation stack.

use std::collections::{HashSet, VecDeque};

use dceseg_core::data::volume::{BinaryMask3D, ProbabilityMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Voxel = (usize, usize, usize);

fn voxels(m: &BinaryMask3D) -> HashSet<Voxel> {
    let [nz, ny, nx] = m.dims();
    let mut s = HashSet::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if m.get(z, y, x) {
                    s.insert((z, y, x));
                }
            }
        }
    }
    s
}

pub fn dsc(a: &BinaryMask3D, b: &BinaryMask3D) -> f64 {
    let (sa, sb) = (voxels(a), voxels(b));
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

fn surface_points(m: &BinaryMask3D, spacing: [f64; 3]) -> Vec<[f64; 3]> {
    let set = voxels(m);
    let [nz, ny, nx] = m.dims();
    let inside = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < nz
            && (y as usize) < ny
            && (x as usize) < nx
            && set.contains(&(z as usize, y as usize, x as usize))
    };
    let mut pts = Vec::new();
    for &(z, y, x) in &set {
        let (zi, yi, xi) = (z as isize, y as isize, x as isize);
        let neighbours = [
            (zi - 1, yi, xi),
            (zi + 1, yi, xi),
            (zi, yi - 1, xi),
            (zi, yi + 1, xi),
            (zi, yi, xi - 1),
            (zi, yi, xi + 1),
        ];
        if neighbours.iter().any(|&(a, b, c)| !inside(a, b, c)) {
            pts.push([x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]]);
        }
    }
    pts
}

fn directed(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .map(|p| {
            to.iter()
                .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = d.len();
    let mut k = 1;
    while 100 * k < 95 * n {
        k += 1;
    }
    d[k - 1]
}

/// All-pairs 95th-percentile Hausdorff distance. `spacing` is `[x, y, z]`.
pub fn hd95(a: &BinaryMask3D, b: &BinaryMask3D, spacing: [f64; 3]) -> f64 {
    let (pa, pb) = (surface_points(a, spacing), surface_points(b, spacing));
    directed(&pa, &pb).max(directed(&pb, &pa))
}

fn gamma_half_integer(two_x: u64) -> f64 {
    let mut g = if two_x % 2 == 0 { 1.0 } else { std::f64::consts::PI.sqrt() };
    let mut k = if two_x % 2 == 0 { 2 } else { 1 };
    while k < two_x {
        g *= k as f64 / 2.0;
        k += 2;
    }
    g
}

/// Two-sided Student-t p-value by Simpson integration of the density.
pub fn t_test_p(t: f64, df: u64) -> f64 {
    let nu = df as f64;
    let norm = gamma_half_integer(df + 1) / ((nu * std::f64::consts::PI).sqrt() * gamma_half_integer(df));
    let density = |x: f64| norm * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
    let b = t.abs();
    let steps = 200_000;
    let h = b / steps as f64;
    let mut s = density(0.0) + density(b);
    for i in 1..steps {
        s += density(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    (1.0 - 2.0 * s * h / 3.0).clamp(0.0, 1.0)
}

pub fn t_statistic(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    mean / (sd / n.sqrt())
}

/// Exact two-sided Wilcoxon signed-rank p-value by enumerating every sign
/// assignment of the (average) ranks.
pub fn wilcoxon_p(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|&v| {
            let below = abs.iter().filter(|&&u| u < v).count() as f64;
            let equal = abs.iter().filter(|&&u| u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let w_minus: f64 = ranks.iter().sum::<f64>() - w_plus;
    let w = w_plus.min(w_minus);
    let mut at_most = 0u64;
    for signs in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s <= w {
            at_most += 1;
        }
    }
    (2.0 * at_most as f64 / (1u64 << n) as f64).min(1.0)
}

/// Union of random boxes and ellipsoids plus scattered voxels.
pub fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3]) -> BinaryMask3D {
    let mut m = BinaryMask3D::zeros(dims, spacing).unwrap();
    let blobs = rng.random_range(1..4);
    let shapes: Vec<([f64; 3], [f64; 3], bool)> = (0..blobs)
        .map(|_| {
            let c = dims.map(|d| rng.random_range(0.0..d as f64));
            let r = dims.map(|d| rng.random_range(1.0..(d as f64 / 3.0).max(1.5)));
            (c, r, rng.random_bool(0.5))
        })
        .collect();
    let [nz, ny, nx] = dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [z as f64, y as f64, x as f64];
                let hit = shapes.iter().any(|(c, r, ellipsoid)| {
                    if *ellipsoid {
                        (0..3).map(|i| ((p[i] - c[i]) / r[i]).powi(2)).sum::<f64>() <= 1.0
                    } else {
                        (0..3).all(|i| (p[i] - c[i]).abs() <= r[i])
                    }
                });
                if hit || rng.random_bool(0.01) {
                    m.set(z, y, x, true);
                }
            }
        }
    }
    if m.count() == 0 {
        m.set(0, 0, 0, true);
    }
    m
}

/// Spatially smoothed uniform noise in [0, 1].
pub fn random_probability(seed: u64, dims: [usize; 3]) -> ProbabilityMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nz, ny, nx] = dims;
    let raw: Vec<f32> = (0..nz * ny * nx).map(|_| rng.random_range(0.0..1.0)).collect();
    let at = |z: isize, y: isize, x: isize| {
        let c = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        raw[(c(z, nz) * ny + c(y, ny)) * nx + c(x, nx)]
    };
    let mut out = Vec::with_capacity(raw.len());
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                let mut s = 0.0;
                for d in [(0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
                    s += at(z + d.0, y + d.1, x + d.2);
                }
                out.push(s / 7.0);
            }
        }
    }
    ProbabilityMap::new(dims, [1.0; 3], out).unwrap()
}

fn bfs(m: &BinaryMask3D, starts: Vec<Voxel>, value: bool, diagonal: bool) -> HashSet<Voxel> {
    let [nz, ny, nx] = m.dims();
    let mut seen: HashSet<Voxel> = starts.iter().copied().collect();
    let mut q: VecDeque<Voxel> = starts.into();
    while let Some((z, y, x)) = q.pop_front() {
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let steps = dz.abs() + dy.abs() + dx.abs();
                    if steps == 0 || (!diagonal && steps > 1) {
                        continue;
                    }
                    let (a, b, c) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    if a < 0 || b < 0 || c < 0 || a >= nz as isize || b >= ny as isize || c >= nx as isize {
                        continue;
                    }
                    let v = (a as usize, b as usize, c as usize);
                    if m.get(v.0, v.1, v.2) == value && seen.insert(v) {
                        q.push_back(v);
                    }
                }
            }
        }
    }
    seen
}

/// Every background voxel is 6-connected to the border.
pub fn has_no_cavity(m: &BinaryMask3D) -> bool {
    let [nz, ny, nx] = m.dims();
    let mut border = Vec::new();
    let mut background = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if m.get(z, y, x) {
                    continue;
                }
                background += 1;
                if z == 0 || y == 0 || x == 0 || z + 1 == nz || y + 1 == ny || x + 1 == nx {
                    border.push((z, y, x));
                }
            }
        }
    }
    bfs(m, border, false, false).len() == background
}

/// The foreground forms one 26-connected component.
pub fn is_connected(m: &BinaryMask3D) -> bool {
    let all = voxels(m);
    let Some(&start) = all.iter().min() else { return false };
    bfs(m, vec![start], true, true).len() == all.len()
}
