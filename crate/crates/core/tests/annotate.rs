mod common;

use std::collections::HashSet;

use common::cases;
use dermo_core::annotate::{annotate, box_pixels, contour_pixels, rle_decode, rle_encode, text_pixels, GREEN};
use dermo_core::data::{BBox, Image};
use dermo_core::infer::predict;
use dermo_core::net::{DermoNet, NetworkConfig};
use dermo_core::rng;
use proptest::prelude::*;
use rand::Rng;

fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut r = rng::seeded(seed);
    // keep clear of pure green so drawn pixels are recognisable
    Image::new(h, w, c, (0..h * w * c).map(|_| r.random_range(0..200)).collect()).unwrap()
}

fn random_mask(h: usize, w: usize, seed: u64, density: f64) -> Image {
    let mut r = rng::seeded(seed);
    Image::new(h, w, 1, (0..h * w).map(|_| if r.random_bool(density) { 255 } else { 0 }).collect()).unwrap()
}

/// Mask pixels with a zero 4-neighbour inside the image.
fn boundary_oracle(mask: &Image) -> HashSet<usize> {
    let (h, w) = (mask.height() as i64, mask.width() as i64);
    let on = |y: i64, x: i64| mask.data()[(y * w + x) as usize] == 255;
    let mut out = HashSet::new();
    for y in 0..h {
        for x in 0..w {
            if !on(y, x) {
                continue;
            }
            let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| {
                let (ny, nx) = (y + dy, x + dx);
                (0..h).contains(&ny) && (0..w).contains(&nx) && !on(ny, nx)
            });
            if edge {
                out.insert((y * w + x) as usize);
            }
        }
    }
    out
}

#[test]
fn full_image_box_hugs_the_border() {
    let (h, w) = (20, 30);
    let img = random_image(h, w, 3, 1);
    let out = annotate(&img, &BBox::full(h, w), None, "").unwrap();
    for y in 0..h {
        for x in 0..w {
            let border = y < 2 || x < 2 || y >= h - 2 || x >= w - 2;
            assert_eq!(out.pixel(y, x) == GREEN, border, "({y}, {x})");
        }
    }
}

#[test]
fn drawing_is_local() {
    for seed in 0..30 {
        let mut r = rng::seeded(seed);
        let (h, w) = (r.random_range(6..40), r.random_range(6..40));
        let img = random_image(h, w, 3, seed);
        let x = r.random_range(0..w - 2);
        let y = r.random_range(0..h - 2);
        let b = BBox {
            x,
            y,
            w: r.random_range(2..=w - x),
            h: r.random_range(2..=h - y),
        };
        let mask = random_mask(h, w, seed + 1000, 0.3);
        let label = "MEL 94.7%";
        let out = annotate(&img, &b, Some(&mask), label).unwrap();
        let mut drawn: HashSet<(usize, usize)> = box_pixels(&b).into_iter().collect();
        drawn.extend(text_pixels(label, b.x + 3, b.y + 3).into_iter().filter(|&(py, px)| py < h && px < w));
        drawn.extend(boundary_oracle(&mask).into_iter().map(|i| (i / w, i % w)));
        for py in 0..h {
            for px in 0..w {
                if drawn.contains(&(py, px)) {
                    assert_eq!(out.pixel(py, px), GREEN);
                } else {
                    assert_eq!(out.pixel(py, px), img.pixel(py, px), "seed {seed} ({py}, {px})");
                }
            }
        }
    }
}

#[test]
fn contour_matches_boundary_oracle() {
    for seed in 0..100 {
        let mask = random_mask(17, 23, seed, 0.1 + 0.008 * seed as f64);
        let got: HashSet<usize> = contour_pixels(&mask).into_iter().collect();
        assert_eq!(got, boundary_oracle(&mask), "seed {seed}");
    }
    let solid = Image::filled(4, 4, 1, 255).unwrap();
    assert!(contour_pixels(&solid).is_empty());
}

#[test]
fn gray_input_and_bad_arguments() {
    let gray = Image::filled(10, 10, 1, 50).unwrap();
    let out = annotate(&gray, &BBox { x: 1, y: 1, w: 5, h: 5 }, None, "nev").unwrap();
    assert_eq!(out.channels(), 3);
    assert_eq!(out.pixel(9, 9), &[50, 50, 50]);
    assert!(annotate(&gray, &BBox { x: 6, y: 0, w: 5, h: 2 }, None, "").is_err());
    let wrong = Image::filled(9, 10, 1, 0).unwrap();
    assert!(annotate(&gray, &BBox::full(10, 10), Some(&wrong), "").is_err());
}

#[test]
fn text_layout() {
    let px = text_pixels("-", 10, 20);
    assert_eq!(px, (0..5).map(|dx| (23, 10 + dx)).collect::<Vec<_>>());
    let two = text_pixels("--", 0, 0);
    assert!(two.contains(&(3, 6)) && two.contains(&(3, 10)) && !two.contains(&(3, 5)));
    assert_eq!(text_pixels("m", 0, 0), text_pixels("M", 0, 0));
    assert!(text_pixels("?", 0, 0).is_empty());
    assert_eq!(text_pixels("?-", 0, 0), text_pixels(" -", 0, 0));
}

#[test]
fn rle_examples() {
    assert_eq!(rle_decode(&[4], 2, 2).unwrap().data(), &[0, 0, 0, 0]);
    assert_eq!(rle_decode(&[0, 4], 2, 2).unwrap().data(), &[255; 4]);
    assert_eq!(rle_decode(&[1, 2, 1], 2, 2).unwrap().data(), &[0, 255, 255, 0]);
    assert!(rle_decode(&[1, 2], 2, 2).is_err());
    assert_eq!(rle_encode(&Image::filled(2, 3, 1, 0).unwrap()), vec![6]);
    assert_eq!(rle_encode(&Image::filled(2, 3, 1, 255).unwrap()), vec![0, 6]);
}

#[test]
fn prediction_contract() {
    let seg = DermoNet::new(NetworkConfig::micro(), 1).unwrap();
    let cls = DermoNet::new(NetworkConfig::micro(), 2).unwrap();
    for (h, w, c) in [(32, 32, 3), (45, 70, 3), (50, 40, 1)] {
        let img = random_image(h, w, c, h as u64);
        let p = predict(&seg, &cls, &img).unwrap();
        let total: f64 = p.classes.iter().map(|c| c.probability).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert_eq!(p.classes.iter().map(|c| c.label.as_str()).collect::<Vec<_>>(), ["Nev", "Mel"]);
        assert!(p.bbox.fits(h, w));
        assert_eq!((p.mask.height(), p.mask.width()), (h, w));
        let resp = p.response("ddwf-test");
        assert_eq!(resp.mask.runs.iter().map(|&r| r as usize).sum::<usize>(), h * w);
        assert_eq!(rle_decode(&resp.mask.runs, h, w).unwrap(), p.mask);
        let again = predict(&seg, &cls, &img).unwrap().response("ddwf-test");
        assert_eq!(serde_json::to_string(&resp).unwrap(), serde_json::to_string(&again).unwrap());
        let label = p.label_text();
        assert!(label.ends_with('%') && label.starts_with(&p.top().label.to_uppercase()));
    }
}

proptest! {
    #![proptest_config(cases(100))]

    #[test]
    fn rle_round_trip(h in 1usize..30, w in 1usize..30, seed in any::<u64>(), density in 0.0f64..=1.0) {
        let mask = random_mask(h, w, seed, density);
        let runs = rle_encode(&mask);
        prop_assert_eq!(runs.iter().map(|&r| r as usize).sum::<usize>(), h * w);
        prop_assert!(runs.iter().skip(1).all(|&r| r > 0));
        prop_assert_eq!(rle_decode(&runs, h, w).unwrap(), mask);
    }
}
