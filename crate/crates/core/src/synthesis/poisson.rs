use super::{Planes, SynthError};
use crate::imaging::Mask;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendParams {
    pub max_iters: usize,
    /// Stop once the max interior residual (pixel scale 0..1) drops below this.
    pub tol: f64,
    /// Over-relaxation factor; `None` picks the optimum for the region size,
    /// `Some(1.0)` is plain Gauss–Seidel.
    pub omega: Option<f64>,
}

impl Default for BlendParams {
    fn default() -> Self {
        Self {
            max_iters: 5_000,
            tol: 1e-4,
            omega: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlendOutcome {
    pub result: Planes,
    pub iterations: usize,
    /// Final max |Δ result − Δ source| over interior pixels and channels.
    pub residual: f64,
    /// `false` when `max_iters` ran out first; `result` is the last iterate.
    pub converged: bool,
}

const RESIDUAL_EVERY: usize = 4;

/// Seamless cloning: inside the interior of `region` (placed at `offset` in
/// `target`) the result's discrete Laplacian matches the source patch's;
/// every other pixel keeps the target value and acts as a Dirichlet boundary.
/// Interior pixels are region pixels whose four neighbours are also region
/// pixels of the patch.
pub fn poisson_blend(
    target: &Planes,
    source: &Planes,
    region: &Mask,
    offset: (usize, usize),
    params: BlendParams,
) -> Result<BlendOutcome, SynthError> {
    let (pw, ph) = (source.width, source.height);
    if region.width() != pw || region.height() != ph {
        return Err(SynthError::Contract(format!(
            "region {}x{} does not match patch {pw}x{ph}",
            region.width(),
            region.height()
        )));
    }
    let (ox, oy) = offset;
    if ox + pw > target.width || oy + ph > target.height {
        return Err(SynthError::Contract(format!(
            "patch {pw}x{ph} at ({ox},{oy}) leaves the {}x{} target",
            target.width, target.height
        )));
    }
    let interior: Vec<(usize, usize)> = (1..ph.saturating_sub(1))
        .flat_map(|y| (1..pw.saturating_sub(1)).map(move |x| (x, y)))
        .filter(|&(x, y)| {
            region.get(x, y) && region.get(x - 1, y) && region.get(x + 1, y) && region.get(x, y - 1) && region.get(x, y + 1)
        })
        .collect();
    if interior.is_empty() {
        return Err(SynthError::Contract("blend region has an empty interior".into()));
    }

    let tw = target.width;
    let mut out = target.clone();
    // guidance field: Laplacian of the source at each interior pixel
    let mut guidance = vec![0.0f32; interior.len() * 3];
    for c in 0..3 {
        let s = source.channel(c);
        for (i, &(x, y)) in interior.iter().enumerate() {
            let at = |x: usize, y: usize| s[y * pw + x];
            guidance[i * 3 + c] = 4.0 * at(x, y) - at(x - 1, y) - at(x + 1, y) - at(x, y - 1) - at(x, y + 1);
        }
    }

    let omega = params.omega.unwrap_or_else(|| {
        let (ny, nx) = (ph.saturating_sub(2).max(1) as f64, pw.saturating_sub(2).max(1) as f64);
        let rho = 0.5 * ((std::f64::consts::PI / (nx + 1.0)).cos() + (std::f64::consts::PI / (ny + 1.0)).cos());
        2.0 / (1.0 + (1.0 - rho * rho).sqrt())
    }) as f32;

    let idx: Vec<usize> = interior.iter().map(|&(x, y)| (oy + y) * tw + ox + x).collect();
    let residual_of = |planes: &Planes| -> f64 {
        let mut worst = 0.0f64;
        for c in 0..3 {
            let p = planes.channel(c);
            for (i, &k) in idx.iter().enumerate() {
                let lap = 4.0 * p[k] - p[k - 1] - p[k + 1] - p[k - tw] - p[k + tw];
                worst = worst.max((lap - guidance[i * 3 + c]).abs() as f64);
            }
        }
        worst
    };

    let mut residual = residual_of(&out);
    let mut iterations = 0;
    while residual >= params.tol && iterations < params.max_iters {
        for c in 0..3 {
            let p = out.channel_mut(c);
            for (i, &k) in idx.iter().enumerate() {
                let gs = (p[k - 1] + p[k + 1] + p[k - tw] + p[k + tw] + guidance[i * 3 + c]) * 0.25;
                p[k] += omega * (gs - p[k]);
            }
        }
        iterations += 1;
        if iterations % RESIDUAL_EVERY == 0 || iterations == params.max_iters {
            residual = residual_of(&out);
        }
    }
    let converged = residual < params.tol;
    if !converged {
        log::warn!("poisson blend stopped after {iterations} iterations with residual {residual:.2e}");
    }
    Ok(BlendOutcome {
        result: out,
        iterations,
        residual,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Image;
    use crate::rng::seeded;
    use rand::Rng;

    fn full_region(w: usize, h: usize) -> Mask {
        Mask::from_bits(w, h, vec![true; w * h]).unwrap()
    }

    #[test]
    fn identical_source_leaves_target_untouched() {
        let mut rng = seeded(4);
        let raw: Vec<u8> = (0..20 * 16 * 3).map(|_| rng.random()).collect();
        let target = Planes::from_image(&Image::from_raw(20, 16, raw).unwrap());
        let patch = target.crop(3, 2, 10, 9);
        let out = poisson_blend(&target, &patch, &full_region(10, 9), (3, 2), BlendParams::default()).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.residual, 0.0);
        assert_eq!(out.result, target);
    }

    #[test]
    fn constant_patch_into_constant_target_takes_target_colour() {
        let target = Planes::from_image(&Image::filled(16, 16, [40, 90, 200]));
        let patch = Planes::from_image(&Image::filled(8, 8, [250, 10, 10]));
        let out = poisson_blend(&target, &patch, &full_region(8, 8), (4, 4), BlendParams::default()).unwrap();
        assert_eq!(out.result.to_image(), Image::filled(16, 16, [40, 90, 200]));
    }

    #[test]
    fn plain_gauss_seidel_and_sor_agree() {
        let mut rng = seeded(9);
        let t: Vec<u8> = (0..24 * 24 * 3).map(|_| rng.random()).collect();
        let s: Vec<u8> = (0..12 * 12 * 3).map(|_| rng.random()).collect();
        let target = Planes::from_image(&Image::from_raw(24, 24, t).unwrap());
        let patch = Planes::from_image(&Image::from_raw(12, 12, s).unwrap());
        let region = full_region(12, 12);
        let gs = BlendParams {
            omega: Some(1.0),
            tol: 1e-5,
            ..Default::default()
        };
        let sor = BlendParams { omega: None, ..gs };
        let a = poisson_blend(&target, &patch, &region, (5, 6), gs).unwrap();
        let b = poisson_blend(&target, &patch, &region, (5, 6), sor).unwrap();
        assert!(a.converged && b.converged);
        assert!(b.iterations < a.iterations);
        let max_diff = a
            .result
            .data
            .iter()
            .zip(&b.result.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 2e-3, "{max_diff}");
    }

    #[test]
    fn non_convergence_returns_best_iterate() {
        let target = Planes::from_image(&Image::filled(30, 30, [0, 0, 0]));
        let patch = Planes::from_image(&Image::filled(20, 20, [255, 255, 255]));
        let mut grad = patch.clone();
        grad.channel_mut(0)[10 * 20 + 10] = 0.0;
        let out = poisson_blend(
            &target,
            &grad,
            &full_region(20, 20),
            (5, 5),
            BlendParams {
                max_iters: 3,
                tol: 1e-9,
                omega: Some(1.0),
            },
        )
        .unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 3);
        assert!(out.residual.is_finite());
    }

    #[test]
    fn rejects_degenerate_regions() {
        let target = Planes::from_image(&Image::filled(8, 8, [0, 0, 0]));
        let patch = Planes::from_image(&Image::filled(2, 2, [9, 9, 9]));
        assert!(poisson_blend(&target, &patch, &full_region(2, 2), (0, 0), BlendParams::default()).is_err());
        let patch = Planes::from_image(&Image::filled(4, 4, [9, 9, 9]));
        assert!(poisson_blend(&target, &patch, &full_region(3, 4), (0, 0), BlendParams::default()).is_err());
        assert!(poisson_blend(&target, &patch, &full_region(4, 4), (6, 0), BlendParams::default()).is_err());
    }
}
