mod common;

use common::cases;
use dermo_core::data::{
    augment, dataset_hash, decode_pnm, encode_pnm, extract_roi, flip_horizontal, flip_vertical, gen_synthetic,
    largest_component, read_dataset, read_pnm, rebalance, resize_nn, split_by_id, split_by_id_salted, standardize,
    standardize_unit, write_dataset, write_pnm, AugmentationSpec, BBox, DatasetMeta, Geometry, Image, Sample,
    SyntheticSpec, GENERATOR_VERSION,
};
use dermo_core::rng;
use proptest::prelude::*;
use rand::Rng;

fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut r = rng::seeded(seed);
    Image::new(h, w, c, (0..h * w * c).map(|_| r.random()).collect()).unwrap()
}

fn mask_from(h: usize, w: usize, on: impl Fn(usize, usize) -> bool) -> Image {
    let data = (0..h * w).map(|i| if on(i / w, i % w) { 255 } else { 0 }).collect();
    Image::new(h, w, 1, data).unwrap()
}

fn sample(id: &str, label: usize, seed: u64) -> Sample {
    Sample {
        id: id.to_string(),
        image: random_image(12, 10, 3, seed),
        mask: Some(mask_from(12, 10, |y, x| (3..8).contains(&y) && (2..6).contains(&x))),
        label: Some(label),
    }
}

#[test]
fn pnm_round_trip_and_header() {
    let dir = tempfile::tempdir().unwrap();
    for (c, name) in [(3, "a.ppm"), (1, "b.pgm")] {
        let img = random_image(7, 5, c, c as u64);
        let path = dir.path().join(name);
        write_pnm(&path, &img).unwrap();
        assert_eq!(read_pnm(&path).unwrap(), img);
    }

    let mut bytes = b"P6\n2 1\n255\n".to_vec();
    bytes.extend([1, 2, 3, 4, 5, 6]);
    let img = decode_pnm(&bytes).unwrap();
    assert_eq!((img.height(), img.width(), img.channels()), (1, 2, 3));
    assert_eq!(img.pixel(0, 1), &[4, 5, 6]);
    assert_eq!(encode_pnm(&img), bytes);

    let commented = b"P5 # gray\n# size\n1 1 255\n\x7f".to_vec();
    assert_eq!(decode_pnm(&commented).unwrap().data(), &[0x7f]);

    assert!(decode_pnm(b"P6\n2 1\n65535\n\0\0\0\0\0\0\0\0\0\0\0\0").is_err());
    assert!(decode_pnm(b"P6\n2 1\n255\n\0\0\0").is_err());
    assert!(decode_pnm(b"P3\n1 1\n255\n0 0 0").is_err());
    assert!(decode_pnm(b"P6\n2").is_err());
}

#[test]
fn float_view_is_exact() {
    let img = random_image(4, 4, 3, 9);
    let unit = img.to_unit();
    assert!(unit.iter().zip(img.data()).all(|(&f, &b)| f == b as f64 / 255.0));
    assert_eq!(Image::from_unit(4, 4, 3, &unit).unwrap(), img);
    assert!(Image::new(0, 3, 3, vec![]).is_err());
    assert!(Image::new(1, 1, 2, vec![0, 0]).is_err());
}

#[test]
fn resize_examples() {
    let img = Image::new(2, 2, 1, vec![1, 2, 3, 4]).unwrap();
    let up = resize_nn(&img, 4, 4).unwrap();
    assert_eq!(up.data(), &[1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]);
    let big = random_image(9, 13, 3, 4);
    assert_eq!(resize_nn(&big, 9, 13).unwrap(), big);
    let m = mask_from(31, 17, |y, x| (y * 7 + x * 3) % 5 == 0);
    for (h, w) in [(8, 8), (64, 3), (192, 256)] {
        let r = resize_nn(&m, h, w).unwrap();
        assert!(r.is_binary());
        for i in 0..h {
            for j in 0..w {
                assert_eq!(r.pixel(i, j), m.pixel(i * 31 / h, j * 17 / w));
            }
        }
    }
    assert!(resize_nn(&img, 0, 3).is_err());
}

#[test]
fn flips_are_involutions() {
    let s = sample("s", 0, 1);
    assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
    assert_eq!(flip_vertical(&flip_vertical(&s)), s);
    let f = flip_horizontal(&s);
    assert_eq!(f.image.pixel(0, 0), s.image.pixel(0, 9));
    assert_eq!(f.label, s.label);
}

#[test]
fn gamma_one_is_identity() {
    let spec = AugmentationSpec {
        gamma: (1.0, 1.0),
        ..AugmentationSpec::identity()
    };
    let s = sample("g", 1, 3);
    for seed in 0..10 {
        assert_eq!(augment(&s, &spec, &mut rng::seeded(seed)).unwrap(), s);
    }
}

#[test]
fn rotation_is_counter_clockwise() {
    let g = Geometry {
        angle_deg: 90.0,
        ..Geometry::identity()
    };
    let (y, x) = g.map_point(0.0, 0.0, 2, 2);
    assert!((y - 1.0).abs() < 1e-12 && x.abs() < 1e-12);
    let img = Image::new(2, 2, 1, vec![255, 0, 0, 0]).unwrap();
    assert_eq!(g.apply(&img).data(), &[0, 0, 255, 0]);
}

#[test]
fn augmentation_keeps_masks_aligned() {
    let samples = gen_synthetic(&SyntheticSpec::new(12, 3, 8).with_size(48, 64)).unwrap();
    let spec = AugmentationSpec::default();
    let mut checked = 0;
    for (i, s) in samples.iter().enumerate() {
        for k in 0..5 {
            let mut r = rng::seeded(rng::derive_seed(i as u64, &k.to_string()));
            let mut probe = r.clone();
            let out = augment(s, &spec, &mut r).unwrap();
            let mask = out.mask.as_ref().unwrap();
            assert!(mask.is_binary());
            assert_eq!(out.image.height(), s.image.height());

            let g = Geometry::sample(&spec, &mut probe, 48, 64);
            let src = s.mask.as_ref().unwrap();
            let on: Vec<(f64, f64)> = (0..48 * 64)
                .filter(|&p| src.data()[p] == 255)
                .map(|p| g.map_point((p / 64) as f64, (p % 64) as f64, 48, 64))
                .collect();
            // only lesions that stay fully inside the frame
            if on.iter().any(|&(y, x)| !(1.0..46.0).contains(&y) || !(1.0..62.0).contains(&x)) {
                continue;
            }
            let centroid = |pts: &[(f64, f64)]| {
                let n = pts.len() as f64;
                (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n)
            };
            let expected = centroid(&on);
            let got: Vec<(f64, f64)> = (0..48 * 64)
                .filter(|&p| mask.data()[p] == 255)
                .map(|p| ((p / 64) as f64, (p % 64) as f64))
                .collect();
            let got = centroid(&got);
            assert!((expected.0 - got.0).abs() <= 1.0 && (expected.1 - got.1).abs() <= 1.0);
            checked += 1;
        }
    }
    assert!(checked >= 20, "only {checked} unclipped cases");
}

#[test]
fn rebalance_examples() {
    let mut samples: Vec<Sample> = (0..10).map(|i| sample(&format!("a{i}"), 0, i)).collect();
    samples.extend((0..2).map(|i| sample(&format!("b{i}"), 1, 100 + i)));
    let spec = AugmentationSpec::default();
    let out = rebalance(&samples, &[10, 10], &spec).unwrap();
    assert_eq!(out.len(), 20);
    assert_eq!(&out[..12], samples.as_slice());
    let copies = &out[12..];
    assert!(copies.iter().all(|s| s.label == Some(1) && s.id.contains("_aug")));
    let mut ids: Vec<&str> = out.iter().map(|s| s.id.as_str()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 20);
    assert_ne!(copies[0].image, copies[2].image);
    assert_eq!(rebalance(&samples, &[10, 10], &spec).unwrap(), out);

    assert_eq!(rebalance(&samples, &[10, 2], &spec).unwrap(), samples);
    assert!(rebalance(&samples, &[9, 2], &spec).is_err());
    assert!(rebalance(&samples[..10], &[10, 3], &spec).is_err());

    let mut skewed: Vec<Sample> = (0..42).map(|i| sample(&format!("n{i}"), 0, i)).collect();
    skewed.extend((0..10).map(|i| sample(&format!("m{i}"), 1, 50 + i)));
    let out = rebalance(&skewed, &[42, 42], &spec).unwrap();
    let mel = out.iter().filter(|s| s.label == Some(1)).count();
    assert_eq!(mel, 42);
}

#[test]
fn roi_examples() {
    let (h, w) = (10, 10);
    let img = random_image(h, w, 3, 2);
    let probs: Vec<f64> = (0..h * w)
        .map(|i| if (2..6).contains(&(i / w)) && (3..8).contains(&(i % w)) { 1.0 } else { 0.0 })
        .collect();
    let roi = extract_roi(&probs, &img, 0.5, 0.0).unwrap();
    assert_eq!(roi.bbox, BBox { x: 3, y: 2, w: 5, h: 4 });
    assert_eq!(roi.crop, img.crop(3, 2, 5, 4).unwrap());
    assert!(!roi.degenerate);

    let empty = extract_roi(&vec![0.2; h * w], &img, 0.5, 0.05).unwrap();
    assert!(empty.degenerate);
    assert_eq!(empty.bbox, BBox::full(h, w));
    assert_eq!(empty.crop, img);

    // a 3x3 blob and a 2x2 blob
    let mut probs = vec![0.0; h * w];
    for (y, x) in (0..3).flat_map(|y| (0..3).map(move |x| (y + 6, x + 6))) {
        probs[y * w + x] = 0.9;
    }
    for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
        probs[y * w + x] = 0.9;
    }
    let roi = extract_roi(&probs, &img, 0.5, 0.0).unwrap();
    assert_eq!(roi.bbox, BBox { x: 6, y: 6, w: 3, h: 3 });

    // diagonal neighbours are separate components
    let diag = [true, false, false, true];
    assert_eq!(largest_component(&diag, 2, 2), vec![0]);
}

#[test]
fn bbox_rescale_round_trip() {
    let mut r = rng::seeded(12);
    for _ in 0..500 {
        let (h, w) = (r.random_range(8..200), r.random_range(8..200));
        let x = r.random_range(0..w);
        let y = r.random_range(0..h);
        let b = BBox {
            x,
            y,
            w: r.random_range(1..=w - x),
            h: r.random_range(1..=h - y),
        };
        let (sh, sw) = (192, 256);
        let small = b.rescale((h, w), (sh, sw));
        assert!(small.fits(sh, sw));
        let back = small.rescale((sh, sw), (h, w));
        assert!(back.fits(h, w));
        for (a, o) in [(back.x, b.x), (back.y, b.y), (back.x + back.w, b.x + b.w), (back.y + back.h, b.y + b.h)] {
            assert!(a.abs_diff(o) <= 1, "{b:?} -> {small:?} -> {back:?}");
        }
    }
}

#[test]
fn synthetic_generator() {
    let spec = SyntheticSpec::new(30, 3, 42).with_size(48, 64);
    let a = gen_synthetic(&spec).unwrap();
    let b = gen_synthetic(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(dataset_hash(&a), dataset_hash(&b));
    assert_ne!(dataset_hash(&a), dataset_hash(&gen_synthetic(&SyntheticSpec { seed: 43, ..spec.clone() }).unwrap()));
    let mut counts = [0; 3];
    for s in &a {
        s.validate(3).unwrap();
        counts[s.label.unwrap()] += 1;
        let m = s.mask.as_ref().unwrap();
        let frac = m.data().iter().filter(|&&v| v == 255).count() as f64 / (48.0 * 64.0);
        assert!((0.02..=0.60).contains(&frac), "{}: area {frac}", s.id);
    }
    assert_eq!(counts, [10, 10, 10]);

    let full = gen_synthetic(&SyntheticSpec::new(6, 2, 1)).unwrap();
    assert!(full.iter().all(|s| (s.image.height(), s.image.width()) == (192, 256)));
    let skewed = SyntheticSpec::new(52, 2, 1).with_ratios(&[4.2, 1.0]);
    assert_eq!(skewed.class_counts().unwrap(), vec![42, 10]);
}

#[test]
fn standardize_moments() {
    assert!(standardize(&Image::filled(5, 5, 3, 77).unwrap()).iter().all(|&v| v == 0.0));
    for seed in 0..20 {
        let img = random_image(9, 11, 3, seed);
        let z = standardize(&img);
        for c in 0..3 {
            let ch: Vec<f64> = z.iter().skip(c).step_by(3).copied().collect();
            let n = ch.len() as f64;
            let mean = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9 && (var.sqrt() - 1.0).abs() < 1e-9);
        }
        let again = standardize_unit(&z, 3);
        assert!(common::max_abs_diff(&z, &again) < 1e-9);
    }
}

#[test]
fn dataset_round_trip_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let mut samples = gen_synthetic(&SyntheticSpec::new(20, 2, 5).with_size(24, 32)).unwrap();
    samples[3].mask = None;
    let meta = DatasetMeta {
        num_classes: 2,
        seed: 5,
        generator_version: GENERATOR_VERSION,
    };
    write_dataset(dir.path(), &samples, &meta).unwrap();
    let header = std::fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    assert!(header.starts_with("id,label\n"));
    let (meta2, back) = read_dataset(dir.path()).unwrap();
    assert_eq!(meta2, meta);
    let mut sorted = samples.clone();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    assert_eq!(back, sorted);

    std::fs::write(dir.path().join("labels.csv"), "name,class\nx,0\n").unwrap();
    assert!(read_dataset(dir.path()).is_err());

    let many = gen_synthetic(&SyntheticSpec::new(400, 2, 6).with_size(8, 8)).unwrap();
    let (train, val) = split_by_id(&many, 0.2);
    assert_eq!(train.len() + val.len(), 400);
    assert!((60..=100).contains(&val.len()), "{}", val.len());
    assert_eq!(split_by_id(&many, 0.2), (train.clone(), val.clone()));
    let (_, other) = split_by_id_salted(&many, 0.2, 0x5eed);
    let overlap = other.iter().filter(|i| val.contains(i)).count();
    assert!(overlap < other.len() / 2);
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn roi_box_contains_component(
        h in 4usize..24, w in 4usize..24, seed in any::<u64>(), density in 0.05f64..0.7, margin in 0.0f64..0.2,
    ) {
        let mut r = rng::seeded(seed);
        let probs: Vec<f64> = (0..h * w).map(|_| if r.random_bool(density) { 0.8 } else { 0.1 }).collect();
        let img = random_image(h, w, 3, seed);
        let roi = extract_roi(&probs, &img, 0.5, margin).unwrap();
        prop_assert!(roi.bbox.fits(h, w));
        let fg: Vec<bool> = probs.iter().map(|&p| p >= 0.5).collect();
        let comp = largest_component(&fg, h, w);
        prop_assert_eq!(roi.degenerate, comp.is_empty());
        let inside = comp.iter().filter(|&&i| roi.bbox.contains(i / w, i % w)).count();
        prop_assert!(inside as f64 >= 0.95 * comp.len() as f64);
        prop_assert_eq!(roi.crop.height(), roi.bbox.h);
    }

    #[test]
    fn rebalance_preserves_originals(seed in any::<u64>(), extra in 0usize..6) {
        let samples: Vec<Sample> = (0..4).map(|i| sample(&format!("s{i}"), i % 2, seed ^ i as u64)).collect();
        let spec = AugmentationSpec { seed, ..AugmentationSpec::default() };
        let out = rebalance(&samples, &[2 + extra, 2], &spec).unwrap();
        prop_assert_eq!(&out[..4], samples.as_slice());
        prop_assert_eq!(out.len(), 4 + extra);
        for s in &out {
            prop_assert!(s.mask.as_ref().unwrap().is_binary());
        }
    }
}
