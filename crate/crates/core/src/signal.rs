//! Small 1D/2D signal helpers shared by the degradation model, the FBP
//! pre-filter and the edge detector.

/// Normalized Gaussian taps, radius `ceil(3 sigma)`. Empty for `sigma <= 0`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return Vec::new();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Convolves `line` in place with `kernel`, replicating edge samples.
pub fn convolve_replicate(line: &mut [f64], kernel: &[f64], scratch: &mut Vec<f64>) {
    if kernel.len() <= 1 || line.is_empty() {
        return;
    }
    let r = (kernel.len() / 2) as isize;
    let n = line.len() as isize;
    scratch.clear();
    scratch.extend_from_slice(line);
    for (i, out) in line.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, &w) in kernel.iter().enumerate() {
            let src = (i as isize + j as isize - r).clamp(0, n - 1);
            acc += w * scratch[src as usize];
        }
        *out = acc;
    }
}

/// Gaussian blur of an `f32` line (computed in `f64`).
pub fn blur_f32(line: &mut [f32], kernel: &[f64]) {
    if kernel.len() <= 1 {
        return;
    }
    let mut buf: Vec<f64> = line.iter().map(|&v| v as f64).collect();
    let mut scratch = Vec::with_capacity(buf.len());
    convolve_replicate(&mut buf, kernel, &mut scratch);
    for (o, v) in line.iter_mut().zip(buf) {
        *o = v as f32;
    }
}

/// Separable Gaussian blur of a row-major `w x h` image.
pub fn blur_2d(img: &mut [f64], w: usize, h: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    if k.len() <= 1 {
        return;
    }
    let mut scratch = Vec::new();
    for row in img.chunks_exact_mut(w) {
        convolve_replicate(row, &k, &mut scratch);
    }
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = img[y * w + x];
        }
        convolve_replicate(&mut col, &k, &mut scratch);
        for y in 0..h {
            img[y * w + x] = col[y];
        }
    }
}
