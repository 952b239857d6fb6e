//! Separable Gaussian smoothing on x-fastest grids.

/// Normalised 1D kernel truncated at 3σ (at least radius 1).
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.into_iter().map(|v| v as f32).collect()
}

/// Blurs in place along each axis with its own σ (in voxels). σ ≤ 0 skips
/// that axis. Borders replicate the edge value.
pub fn gaussian_blur(data: &mut [f32], dims: [usize; 3], sigma: [f64; 3]) {
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    for axis in 0..3 {
        if sigma[axis] <= 0.0 || dims[axis] == 1 {
            continue;
        }
        let k = gaussian_kernel(sigma[axis]);
        let r = (k.len() / 2) as i64;
        let n = dims[axis];
        let stride = strides[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[o2] {
            for a in 0..dims[o1] {
                let base = a * strides[o1] + b * strides[o2];
                line.clear();
                line.extend((0..n).map(|i| data[base + i * stride]));
                for i in 0..n {
                    let mut acc = 0f32;
                    for (j, &w) in k.iter().enumerate() {
                        let src = (i as i64 + j as i64 - r).clamp(0, n as i64 - 1) as usize;
                        acc += w * line[src];
                    }
                    data[base + i * stride] = acc;
                }
            }
        }
    }
}
