mod common;

use common::{checkerboard, laplacian_residual, noisy_texture, random_planes, rng};
use proptest::prelude::*;
use sha2::{Digest, Sha256};
use tab_core::imaging::{Image, Mask, Rect};
use tab_core::synthesis::{
    apply_hard_pastes, apply_nsa_pastes, perlin_field, poisson_blend, seam_gradient, synth_nsa, synth_simple, synthesize, BlendParams,
    Paste, SynthConfig, SynthMethod,
};

#[test]
fn random_16x16_blends_meet_the_residual_bound() {
    let params = BlendParams::default();
    for case in 0..25u64 {
        let target = random_planes(24, 24, 1000 + case);
        let patch = random_planes(16, 16, 2000 + case);
        let region = Mask::from_bits(16, 16, vec![true; 256]).unwrap();
        let out = poisson_blend(&target, &patch, &region, (4, 3), params).unwrap();
        assert!(out.converged, "case {case}");
        let res = laplacian_residual(&out.result, &patch, &region, 4, 3);
        assert!(res < 10.0 * params.tol, "case {case}: residual {res}");
    }
}

#[test]
fn irregular_region_keeps_outside_pixels() {
    let target = random_planes(20, 20, 5);
    let patch = random_planes(12, 12, 6);
    let mut region = Mask::empty(12, 12);
    for y in 0..12 {
        for x in 0..12 {
            let (dx, dy) = (x as f64 - 5.5, y as f64 - 5.5);
            region.set(x, y, dx * dx + dy * dy < 30.0);
        }
    }
    let out = poisson_blend(&target, &patch, &region, (4, 4), BlendParams::default()).unwrap();
    assert!(laplacian_residual(&out.result, &patch, &region, 4, 4) < 1e-3);
    for c in 0..3 {
        for y in 0..20 {
            for x in 0..20 {
                let interior = (4..16).contains(&x) && (4..16).contains(&y) && {
                    let (px, py) = (x - 4, y - 4);
                    px > 0 && py > 0 && px < 11 && py < 11 && [(px, py), (px - 1, py), (px + 1, py), (px, py - 1), (px, py + 1)].iter().all(|&(a, b)| region.get(a, b))
                };
                if !interior {
                    let k = c * 400 + y * 20 + x;
                    assert_eq!(out.result.data[k], target.data[k]);
                }
            }
        }
    }
}

#[test]
fn self_paste_at_source_location_is_a_no_op() {
    let img = noisy_texture(48, 48, 3);
    let r = Rect::new(10, 12, 20, 14);
    let s = apply_nsa_pastes(&img, &img, &[Paste { src: r, dst: r }], &SynthConfig::default()).unwrap();
    assert!(s.noop);
    assert!(s.mask.is_empty());
    assert_eq!(s.anomaly, img);
}

#[test]
fn cutpaste_onto_itself_is_a_no_op() {
    let img = noisy_texture(32, 32, 1);
    let r = Rect::new(3, 4, 10, 9);
    let s = apply_hard_pastes(&img, &img, &[Paste { src: r, dst: r }]).unwrap();
    assert!(s.noop);
    assert_eq!(s.anomaly, img);
}

#[test]
fn nsa_mask_stays_inside_pasted_rectangles() {
    let cfg = SynthConfig::default();
    for seed in 0..40 {
        let n = noisy_texture(64, 64, seed);
        let src = noisy_texture(64, 64, seed + 500);
        let s = synth_nsa(&n, &src, &cfg, &mut rng(seed)).unwrap();
        s.check(&cfg).unwrap();
        let mut rects = Mask::empty(64, 64);
        for p in &s.record.pastes {
            rects.fill_rect(p.dst);
        }
        let allowed = rects.dilate();
        for y in 0..64 {
            for x in 0..64 {
                assert!(!s.mask.get(x, y) || allowed.get(x, y), "seed {seed} ({x},{y})");
            }
        }
    }
}

#[test]
fn mask_method_changes_exactly_the_rectangle() {
    let cfg = SynthConfig::with_method(SynthMethod::Mask);
    for seed in 0..30 {
        let img = checkerboard(64, 64, 8, [20, 20, 20], [230, 230, 230]);
        let s = synth_simple(&img, &cfg, &mut rng(seed)).unwrap();
        let rect = s.record.pastes[0].dst;
        assert_eq!(s.mask, Mask::from_rect(64, 64, rect));
        let fill = s.record.fill.unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let expect = if rect.contains(x, y) { fill } else { img.get(x, y) };
                assert_eq!(s.anomaly.get(x, y), expect);
            }
        }
    }
}

#[test]
fn perlin_blobs_respect_area_bounds() {
    let cfg = SynthConfig::with_method(SynthMethod::Perlin);
    let img = noisy_texture(64, 64, 9);
    let mut noops = 0;
    for seed in 0..100 {
        let s = synth_simple(&img, &cfg, &mut rng(seed)).unwrap();
        s.check(&cfg).unwrap();
        if s.noop {
            noops += 1;
            continue;
        }
        let frac = s.mask.area() as f64 / 4096.0;
        assert!(frac >= cfg.mask_area[0] && frac <= cfg.mask_area[1]);
    }
    assert!(noops <= 10, "{noops} perlin draws were skipped");
}

#[test]
fn every_method_honours_the_contracts() {
    for method in SynthMethod::ALL {
        let cfg = SynthConfig::with_method(method);
        let mut noops = 0;
        for seed in 0..250u64 {
            let n = noisy_texture(48, 48, seed % 17);
            let src = noisy_texture(48, 48, 100 + seed % 13);
            let s = synthesize(&n, Some(&src), &cfg, &mut rng(seed)).unwrap();
            s.check(&cfg).unwrap_or_else(|e| panic!("{method} seed {seed}: {e}"));
            noops += s.noop as u32;
        }
        assert!(noops < 25, "{method}: {noops} no-ops");
    }
}

#[test]
fn nsa_seams_are_softer_than_hard_pastes() {
    let cfg = SynthConfig::default();
    let (mut nsa, mut hard) = (Vec::new(), Vec::new());
    for seed in 0..20 {
        let n = noisy_texture(64, 64, seed);
        let src = checkerboard(64, 64, 6, [250, 240, 30], [10, 30, 200]);
        let s = synth_nsa(&n, &src, &cfg, &mut rng(seed)).unwrap();
        if s.noop {
            continue;
        }
        let h = apply_hard_pastes(&n, &src, &s.record.pastes).unwrap();
        nsa.push(seam_gradient(&s.anomaly, &s.mask).unwrap());
        hard.push(seam_gradient(&h.anomaly, &h.mask).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(nsa.len() >= 15);
    assert!(mean(&nsa) <= 3.0 * mean(&hard), "nsa {} hard {}", mean(&nsa), mean(&hard));
}

#[test]
fn seeded_checkerboard_sample_matches_golden_digest() {
    let n = checkerboard(64, 64, 8, [200, 40, 40], [40, 40, 200]);
    let src = checkerboard(64, 64, 5, [240, 240, 240], [20, 120, 20]);
    let s = synth_nsa(&n, &src, &SynthConfig::default(), &mut rng(7)).unwrap();
    let mut h = Sha256::new();
    h.update(s.anomaly.as_raw());
    h.update(s.mask.bits().iter().map(|&b| b as u8).collect::<Vec<_>>());
    let digest: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(digest, GOLDEN);
}

const GOLDEN: &str = "4f3996156c5a2bac3f84738363a877b3b25865e5b34074874a8f8c68319b5dee";

#[test]
fn invalid_configs_are_rejected() {
    let img = Image::filled(16, 16, [1, 2, 3]);
    let bad = [
        SynthConfig {
            patch_scale: [0.4, 0.1],
            ..Default::default()
        },
        SynthConfig {
            repeats: [0, 2],
            ..Default::default()
        },
        SynthConfig {
            resize_scale: [-1.0, 2.0],
            ..Default::default()
        },
    ];
    for cfg in bad {
        assert!(synthesize(&img, None, &cfg, &mut rng(0)).is_err());
    }
    assert!(synth_nsa(&img, &Image::filled(8, 8, [0, 0, 0]), &SynthConfig::default(), &mut rng(0)).is_err());
}

#[test]
fn method_names_roundtrip() {
    for m in SynthMethod::ALL {
        assert_eq!(m.name().parse::<SynthMethod>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
    }
    assert!("poisson".parse::<SynthMethod>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn untouched_pixels_are_byte_identical(seed in 0u64..10_000, m in 0usize..4) {
        let cfg = SynthConfig::with_method(SynthMethod::ALL[m]);
        let n = noisy_texture(32, 32, seed);
        let src = noisy_texture(32, 32, seed ^ 77);
        let s = synthesize(&n, Some(&src), &cfg, &mut rng(seed)).unwrap();
        let grown = s.mask.dilate();
        for y in 0..32 {
            for x in 0..32 {
                if !grown.get(x, y) {
                    prop_assert_eq!(s.anomaly.get(x, y), n.get(x, y));
                }
            }
        }
    }

    #[test]
    fn perlin_values_are_bounded(seed in 0u64..10_000, w in 1usize..40, h in 1usize..40, cell in 1usize..20, oct in 1u32..5) {
        let f = perlin_field(w, h, cell, oct, &mut rng(seed));
        prop_assert_eq!(f.len(), w * h);
        prop_assert!(f.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
