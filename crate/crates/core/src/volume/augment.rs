use rand::Rng;

/// Half-sample symmetric reflection into `[0, n)`. With a symmetric kernel
/// this keeps the blur operator doubly stochastic, so the mean is preserved.
fn mirror(i: isize, n: usize) -> usize {
    let p = 2 * n as isize;
    let m = i.rem_euclid(p) as usize;
    if m >= n {
        p as usize - 1 - m
    } else {
        m
    }
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut w: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian blur of a cubic `size^3` patch.
pub fn blur_gaussian(patch: &[f32], size: usize, sigma: f64) -> Vec<f32> {
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let mut cur: Vec<f64> = patch.iter().map(|&v| v as f64).collect();
    let strides = [1, size, size * size];
    for &st in &strides {
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let c = (i / st) % size;
            let base = i - c * st;
            let mut acc = 0.0;
            for (k, &w) in taps.iter().enumerate() {
                let j = mirror(c as isize + k as isize - r, size);
                acc += w * cur[base + j * st];
            }
            *out = acc;
        }
        cur = next;
    }
    cur.into_iter().map(|v| v as f32).collect()
}

/// Blur with `sigma ~ U[0.5, 1.5]` voxels.
pub fn augment_gaussian(patch: &[f32], size: usize, rng: &mut impl Rng) -> Vec<f32> {
    let sigma = rng.gen_range(0.5..=1.5);
    blur_gaussian(patch, size, sigma)
}

/// `mean + f * (x - mean)`.
pub fn scale_contrast(patch: &[f32], f: f64) -> Vec<f32> {
    let mean = patch.iter().map(|&v| v as f64).sum::<f64>() / patch.len().max(1) as f64;
    patch.iter().map(|&v| (mean + f * (v as f64 - mean)) as f32).collect()
}

/// Contrast scaling about the patch mean with `f ~ U[0.5, 1.5]`.
pub fn augment_contrast(patch: &[f32], rng: &mut impl Rng) -> Vec<f32> {
    let f = rng.gen_range(0.5..=1.5);
    scale_contrast(patch, f)
}
