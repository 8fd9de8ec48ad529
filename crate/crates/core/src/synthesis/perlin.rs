use rand::Rng;

/// Gradient-lattice noise summed over octaves and divided by the total
/// amplitude, so every value lies in `[-1, 1]`. Row-major `height × width`.
///
/// Octave `o` uses cells of `cell_size / 2^o` pixels and amplitude `0.5^o`;
/// octaves whose cell would shrink below one pixel are dropped. The lattice
/// is padded when `cell_size` does not divide the dimensions.
pub fn perlin_field<R: Rng + ?Sized>(width: usize, height: usize, cell_size: usize, octaves: u32, rng: &mut R) -> Vec<f32> {
    let mut acc = vec![0.0f64; width * height];
    let mut total_amp = 0.0;
    let mut amp = 1.0;
    let mut cell = cell_size.max(1);
    for _ in 0..octaves.max(1) {
        add_octave(&mut acc, width, height, cell, amp, rng);
        total_amp += amp;
        amp *= 0.5;
        if cell == 1 {
            break;
        }
        cell /= 2;
    }
    acc.into_iter().map(|v| (v / total_amp).clamp(-1.0, 1.0) as f32).collect()
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn add_octave<R: Rng + ?Sized>(acc: &mut [f64], width: usize, height: usize, cell: usize, amp: f64, rng: &mut R) {
    let gx = width.div_ceil(cell) + 1;
    let gy = height.div_ceil(cell) + 1;
    let grads: Vec<(f64, f64)> = (0..gx * gy)
        .map(|_| {
            let a = rng.random::<f64>() * std::f64::consts::TAU;
            (a.cos(), a.sin())
        })
        .collect();
    let dot = |ix: usize, iy: usize, dx: f64, dy: f64| {
        let (gx_, gy_) = grads[iy * gx + ix];
        gx_ * dx + gy_ * dy
    };
    for y in 0..height {
        let cy = y / cell;
        let ty = (y % cell) as f64 / cell as f64;
        let v = fade(ty);
        for x in 0..width {
            let cx = x / cell;
            let tx = (x % cell) as f64 / cell as f64;
            let u = fade(tx);
            let n00 = dot(cx, cy, tx, ty);
            let n10 = dot(cx + 1, cy, tx - 1.0, ty);
            let n01 = dot(cx, cy + 1, tx, ty - 1.0);
            let n11 = dot(cx + 1, cy + 1, tx - 1.0, ty - 1.0);
            let nx0 = n00 + u * (n10 - n00);
            let nx1 = n01 + u * (n11 - n01);
            acc[y * width + x] += amp * (nx0 + v * (nx1 - nx0));
        }
    }
}
