use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinyface::pyramid::{
    build_pyramid, decode_f32raster, decode_ppm, encode_f32raster, encode_ppm, pad_crop, resample, scaled_dim, Raster,
};

fn random_raster(w: usize, h: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Raster::new(w, h, (0..w * h * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn overlap(a0: i64, len_a: i64, b0: i64, len_b: i64) -> i64 {
    ((a0 + len_a).min(b0 + len_b) - a0.max(b0)).max(0)
}

#[test]
fn crop_mask_matches_rectangle_arithmetic() {
    let img = random_raster(37, 23, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let size = rng.gen_range(1..60usize);
        let x = rng.gen_range(-70..50i64);
        let y = rng.gen_range(-70..40i64);
        let crop = pad_crop(&img, x, y, size, [0.5; 3]).unwrap();
        let inside = overlap(x, size as i64, 0, 37) * overlap(y, size as i64, 0, 23);
        assert_eq!(crop.filled_pixels() as i64, (size * size) as i64 - inside);
        assert_eq!(crop.raster.width(), size);
    }
}

#[test]
fn crop_edge_cases() {
    let img = random_raster(10, 10, 3);
    let inside = pad_crop(&img, 2, 3, 5, [0.0; 3]).unwrap();
    assert_eq!(inside.filled_pixels(), 0);
    assert_eq!(inside.raster.get(0, 0, 1), img.get(2, 3, 1));
    let outside = pad_crop(&img, 20, 20, 4, [0.25, 0.5, 0.75]).unwrap();
    assert_eq!(outside.filled_pixels(), 16);
    assert!(outside.raster.data().chunks(3).all(|p| p == [0.25, 0.5, 0.75]));
    assert!(pad_crop(&img, 0, 0, 0, [0.0; 3]).is_err());
}

#[test]
fn pyramid_levels_have_rounded_sizes() {
    let img = random_raster(33, 17, 4);
    let p = build_pyramid(&img, &[0.5, 1.0, 2.0]).unwrap();
    let dims: Vec<(usize, usize)> = [0.5, 1.0, 2.0].iter().map(|&s| {
        let l = p.level(s).unwrap();
        (l.width(), l.height())
    }).collect();
    assert_eq!(dims, vec![(17, 9), (33, 17), (66, 34)]);
    assert_eq!(p.level(1.0).unwrap(), &img);
    assert_eq!(scaled_dim(1, 0.1), 1);
}

#[test]
fn bad_scale_is_rejected() {
    let img = random_raster(4, 4, 5);
    assert!(resample(&img, 0.0).is_err());
    assert!(resample(&img, f64::NAN).is_err());
}

proptest! {
    #[test]
    fn resampling_preserves_constants(w in 1usize..40, h in 1usize..40, s in prop::sample::select(vec![0.25, 0.5, 0.7, 1.5, 2.0, 3.0]), v in 0.0..1.0f32) {
        let img = Raster::filled(w, h, [v, 1.0 - v, 0.5]);
        let out = resample(&img, s).unwrap();
        prop_assert_eq!(out.width(), scaled_dim(w, s));
        for px in out.data().chunks(3) {
            prop_assert!((px[0] - v).abs() < 1e-5 && (px[1] - (1.0 - v)).abs() < 1e-5 && (px[2] - 0.5).abs() < 1e-5);
        }
    }

    #[test]
    fn resampling_stays_within_input_range(w in 2usize..30, h in 2usize..30, seed in 0u64..1000, s in prop::sample::select(vec![0.5, 2.0])) {
        let img = random_raster(w, h, seed);
        let out = resample(&img, s).unwrap();
        prop_assert!(out.data().iter().all(|&x| (-1e-6..=1.0 + 1e-6).contains(&x)));
    }

    #[test]
    fn file_formats_round_trip(w in 1usize..20, h in 1usize..20, seed in 0u64..1000) {
        let img = random_raster(w, h, seed);
        prop_assert_eq!(decode_f32raster(&encode_f32raster(&img), "t").unwrap(), img.clone());
        let ppm = decode_ppm(&encode_ppm(&img), "t").unwrap();
        for (a, b) in ppm.data().iter().zip(img.data()) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        // 8-bit values survive exactly
        prop_assert_eq!(decode_ppm(&encode_ppm(&ppm), "t").unwrap(), ppm);
    }
}
