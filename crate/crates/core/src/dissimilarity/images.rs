/// Rotates a row-major `h×w` image by `theta` radians about its center with
/// bilinear resampling; samples falling outside the image read as 0.
pub fn rotate_bilinear(img: &[f64], h: usize, w: usize, theta: f64) -> Vec<f64> {
    debug_assert_eq!(img.len(), h * w);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            img[r as usize * w + c as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let dx = c as f64 - cx;
            let dy = r as f64 - cy;
            // Inverse map: rotate the output coordinate by −θ.
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            out[r * w + c] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rotation_is_identity() {
        let img: Vec<f64> = (0..20).map(|v| v as f64 / 20.0).collect();
        let r = rotate_bilinear(&img, 4, 5, 0.0);
        for (a, b) in img.iter().zip(&r) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn half_turn_reverses_pixels() {
        let img: Vec<f64> = (0..12).map(|v| v as f64 / 12.0).collect();
        let r = rotate_bilinear(&img, 3, 4, std::f64::consts::PI);
        for k in 0..12 {
            assert!((r[k] - img[11 - k]).abs() < 1e-12);
        }
    }
}
