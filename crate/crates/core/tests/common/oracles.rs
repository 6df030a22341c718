//! Independent references: brute-force metrics and frozen high-precision values.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.gen_bool(p)).collect()
}

pub fn coords(i: usize, d: [usize; 3]) -> [usize; 3] {
    [i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1])]
}

pub fn brute_dice(a: &[bool], b: &[bool]) -> f64 {
    let na = a.iter().filter(|&&v| v).count();
    let nb = b.iter().filter(|&&v| v).count();
    let nab = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * nab as f64 / (na + nb) as f64
    }
}

pub fn brute_boundary(m: &[bool], d: [usize; 3]) -> Vec<bool> {
    (0..m.len())
        .map(|i| {
            if !m[i] {
                return false;
            }
            let c = coords(i, d);
            let mut edge = false;
            for axis in 0..3 {
                for step in [-1i64, 1] {
                    let mut n = [c[0] as i64, c[1] as i64, c[2] as i64];
                    n[axis] += step;
                    if n[axis] < 0 || n[axis] >= d[axis] as i64 {
                        edge = true;
                    } else if !m[n[0] as usize + d[0] * (n[1] as usize + d[1] * n[2] as usize)] {
                        edge = true;
                    }
                }
            }
            edge
        })
        .collect()
}

pub fn brute_d2(a: [usize; 3], b: [usize; 3], s: [f64; 3]) -> f64 {
    let d = |k: usize| (a[k] as f64 - b[k] as f64) * s[k];
    let (x, y, z) = (d(0), d(1), d(2));
    (x * x + y * y) + z * z
}

pub fn brute_surface_dice(a: &[bool], b: &[bool], d: [usize; 3], s: [f64; 3], tau: f64) -> f64 {
    let ba: Vec<usize> = brute_boundary(a, d).iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
    let bb: Vec<usize> = brute_boundary(b, d).iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
    if ba.is_empty() && bb.is_empty() {
        return 1.0;
    }
    if ba.is_empty() || bb.is_empty() {
        return 0.0;
    }
    let within = |from: &[usize], to: &[usize]| from.iter().filter(|&&i| to.iter().any(|&j| brute_d2(coords(i, d), coords(j, d), s) <= tau * tau)).count();
    (within(&ba, &bb) + within(&bb, &ba)) as f64 / (ba.len() + bb.len()) as f64
}

// Standard normal CDF tabulated at 40 significant digits.
pub const PHI_GRID: [(f64, f64); 41] = [
    (-5.00, 0.00000028665157187919391),
    (-4.75, 0.0000010170832425687032),
    (-4.50, 0.0000033976731247300604),
    (-4.25, 0.00001068852577493442),
    (-4.00, 0.000031671241833119921),
    (-3.75, 0.000088417285200803868),
    (-3.50, 0.00023262907903552504),
    (-3.25, 0.00057702504239076704),
    (-3.00, 0.0013498980316300945),
    (-2.75, 0.0029797632350545568),
    (-2.50, 0.0062096653257761352),
    (-2.25, 0.012224472655044703),
    (-2.00, 0.022750131948179207),
    (-1.75, 0.04005915686381709),
    (-1.50, 0.066807201268858066),
    (-1.25, 0.10564977366685526),
    (-1.00, 0.15865525393145705),
    (-0.75, 0.2266273523768682),
    (-0.50, 0.3085375387259869),
    (-0.25, 0.40129367431707628),
    (0.00, 0.5),
    (0.25, 0.59870632568292372),
    (0.50, 0.6914624612740131),
    (0.75, 0.7733726476231318),
    (1.00, 0.84134474606854295),
    (1.25, 0.89435022633314474),
    (1.50, 0.93319279873114193),
    (1.75, 0.95994084313618291),
    (2.00, 0.97724986805182079),
    (2.25, 0.9877755273449553),
    (2.50, 0.99379033467422386),
    (2.75, 0.99702023676494544),
    (3.00, 0.99865010196836991),
    (3.25, 0.99942297495760923),
    (3.50, 0.99976737092096447),
    (3.75, 0.9999115827147992),
    (4.00, 0.99996832875816688),
    (4.25, 0.99998931147422507),
    (4.50, 0.99999660232687527),
    (4.75, 0.99999898291675743),
    (5.00, 0.99999971334842812),
];

/// Fisher comparison of r=0.9 (n=33) against r=0.3 (n=55), at 40 digits.
pub const FISHER_Z: f64 = 5.0713432056785835816;
pub const FISHER_P: f64 = 3.9501764627684861282e-7;
