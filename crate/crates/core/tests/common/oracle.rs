//! Independent brute-force implementations on 6^3 grids.

use cyclereg::eval::{dsc, neg_jacobian_fraction};
use cyclereg::grid::LabelVolume;
use cyclereg::transform::{compose, jacobian, DisplacementField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SHAPE: [usize; 3] = [6, 6, 6];

pub fn smooth_field(seed: u64, amp: f64) -> DisplacementField {
    DisplacementField::from_tensor(&super::smooth_tensor(seed, 3, SHAPE, amp, 0.0)).unwrap()
}

pub fn idx(x: usize, y: usize, z: usize) -> usize {
    x + SHAPE[0] * (y + SHAPE[1] * z)
}

fn voxels() -> impl Iterator<Item = [usize; 3]> {
    (0..SHAPE[2]).flat_map(|z| (0..SHAPE[1]).flat_map(move |y| (0..SHAPE[0]).map(move |x| [x, y, z])))
}

/// Trilinear sample of one component at a continuous point, clamping each
/// coordinate to the grid first.
fn sample(f: &DisplacementField, c: usize, p: [f64; 3]) -> f64 {
    let comp = f.component(c);
    let mut lo = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let n = SHAPE[a];
        let q = p[a].clamp(0.0, (n - 1) as f64);
        let i = (q.floor() as usize).min(n - 2);
        lo[a] = i;
        t[a] = q - i as f64;
    }
    let mut s = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { t[0] } else { 1.0 - t[0] })
                    * (if dy == 1 { t[1] } else { 1.0 - t[1] })
                    * (if dz == 1 { t[2] } else { 1.0 - t[2] });
                s += w * comp[idx(lo[0] + dx, lo[1] + dy, lo[2] + dz)];
            }
        }
    }
    s
}

/// Largest deviation of `compose` from `u_B(x) + u_A(x + u_B(x))`.
pub fn compose_error(seed: u64) -> f64 {
    let a = smooth_field(seed, 2.5);
    let b = smooth_field(seed + 100, 2.5);
    let c = compose(&a, &b).unwrap();
    let mut worst: f64 = 0.0;
    for [x, y, z] in voxels() {
        let v = idx(x, y, z);
        let ub = b.at(v);
        let p = [x as f64 + ub[0], y as f64 + ub[1], z as f64 + ub[2]];
        for k in 0..3 {
            worst = worst.max((c.at(v)[k] - (ub[k] + sample(&a, k, p))).abs());
        }
    }
    worst
}

fn finite_difference(comp: &[f64], at: [usize; 3], axis: usize) -> f64 {
    let mut p = at;
    let i = p[axis];
    let n = SHAPE[axis];
    let mut get = |k: usize| {
        p[axis] = k;
        comp[idx(p[0], p[1], p[2])]
    };
    if i == 0 {
        get(1) - get(0)
    } else if i == n - 1 {
        get(n - 1) - get(n - 2)
    } else {
        (get(i + 1) - get(i - 1)) / 2.0
    }
}

/// Largest deviation of `jacobian` from `I + du/dx` by explicit differences.
pub fn jacobian_error(seed: u64) -> f64 {
    let f = smooth_field(seed, 3.0);
    let jac = jacobian(&f);
    let mut worst: f64 = 0.0;
    for at in voxels() {
        let m = jac.data[idx(at[0], at[1], at[2])];
        for i in 0..3 {
            for j in 0..3 {
                let delta = if i == j { 1.0 } else { 0.0 };
                let expect = delta + finite_difference(f.component(i), at, j);
                worst = worst.max((m[i][j] - expect).abs());
            }
        }
    }
    worst
}

pub fn det(m: &[[f64; 3]; 3]) -> f64 {
    // Cofactor expansion along the second row.
    -m[1][0] * (m[0][1] * m[2][2] - m[0][2] * m[2][1]) + m[1][1] * (m[0][0] * m[2][2] - m[0][2] * m[2][0])
        - m[1][2] * (m[0][0] * m[2][1] - m[0][1] * m[2][0])
}

/// Fields of growing amplitude whose fold percentage disagrees with a
/// direct count, and how many of them fold at all.
pub fn negjac_mismatches() -> (usize, usize) {
    let (mut wrong, mut folding) = (0, 0);
    for seed in 0..8 {
        let f = smooth_field(seed, 0.8 * seed as f64);
        let neg = jacobian(&f).data.iter().filter(|m| det(m) < 0.0).count();
        folding += (neg > 0) as usize;
        let n = SHAPE.iter().product::<usize>() as f64;
        wrong += (neg_jacobian_fraction(&f) != 100.0 * neg as f64 / n) as usize;
    }
    (wrong, folding)
}

/// Random label pairs whose Dice disagrees with a direct count.
pub fn dice_mismatches() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = SHAPE.iter().product::<usize>();
    let mut wrong = 0;
    for trial in 0..20u16 {
        let n_classes = 2 + trial % 4;
        let mut draw = || -> Vec<u16> { (0..n).map(|_| rng.random_range(0..n_classes)).collect() };
        let (da, db) = (draw(), draw());
        let a = LabelVolume::new(SHAPE, da.clone(), n_classes).unwrap();
        let b = LabelVolume::new(SHAPE, db.clone(), n_classes).unwrap();
        let d = dsc(&a, &b, n_classes).unwrap();
        let mut scores = Vec::new();
        for k in 1..n_classes {
            let in_a = da.iter().filter(|&&v| v == k).count();
            let in_b = db.iter().filter(|&&v| v == k).count();
            let both = da.iter().zip(&db).filter(|(&x, &y)| x == k && y == k).count();
            let expect = (in_a + in_b > 0).then(|| 2.0 * both as f64 / (in_a + in_b) as f64);
            wrong += (d.per_class[k as usize] != expect) as usize;
            scores.extend(expect);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        wrong += ((d.mean - mean).abs() > 1e-15) as usize;
    }
    wrong
}
