use hifi_core::embed::{Embedder, HistogramEmbedder};
use hifi_core::evalkit::{crop_to_mask, evaluate, metric_filter, ssim, ssim_hf, EvalItem};
use hifi_core::image::{BBox, Image, Mask};
use ndarr::Tensor;
use proptest::prelude::*;

fn random_image(w: usize, h: usize, c: usize, seed: u64, lo: f64, hi: f64) -> Image {
    let t = Tensor::uniform(&[w * h * c], lo, hi, seed);
    Image::new(w, h, c, t.data().iter().map(|&v| v as f32).collect()).unwrap()
}

#[test]
fn crop_examples() {
    let img = random_image(40, 30, 3, 1, 0.0, 1.0);
    let full = Mask::from_bbox(
        40,
        30,
        BBox {
            x0: 0,
            y0: 0,
            x1: 40,
            y1: 30,
        },
    )
    .unwrap();
    assert_eq!(crop_to_mask(&img, &full).unwrap(), img);
    let mut one = Mask::empty(40, 30);
    one.set(7, 9, true);
    let px = crop_to_mask(&img, &one).unwrap();
    assert_eq!((px.width(), px.height()), (1, 1));
    assert_eq!(px.get(0, 0, 2), img.get(7, 9, 2));
    let b = Mask::from_bbox(
        40,
        30,
        BBox {
            x0: 3,
            y0: 5,
            x1: 13,
            y1: 25,
        },
    )
    .unwrap();
    let c = crop_to_mask(&img, &b).unwrap();
    assert_eq!((c.width(), c.height()), (10, 20));
    assert_eq!(c.get(0, 0, 0), img.get(3, 5, 0));
    assert!(crop_to_mask(&img, &Mask::empty(40, 30)).is_err());
}

#[test]
fn ssim_identity_and_symmetry() {
    let a = random_image(24, 20, 3, 2, 0.0, 1.0);
    let b = random_image(24, 20, 3, 3, 0.0, 1.0);
    let s = ssim(&a, &a).unwrap();
    assert!((s.value - 1.0).abs() < 1e-12 && !s.global_fallback);
    let (ab, ba) = (ssim(&a, &b).unwrap().value, ssim(&b, &a).unwrap().value);
    assert!((ab - ba).abs() < 1e-9);
    assert!(ab < 0.5);
    assert!(ssim(&a, &random_image(20, 20, 3, 1, 0.0, 1.0)).is_err());
}

#[test]
fn constant_pair_matches_closed_form() {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    for (w, h) in [(16, 16), (5, 7)] {
        let a = Image::filled(w, h, 1, 0.2);
        let b = Image::filled(w, h, 1, 0.8);
        let (m1, m2) = (0.2f32 as f64, 0.8f32 as f64);
        let want = (2.0 * m1 * m2 + c1) * c2 / ((m1 * m1 + m2 * m2 + c1) * c2);
        let got = ssim(&a, &b).unwrap();
        assert!((got.value - want).abs() < 1e-9, "{} vs {want}", got.value);
        assert_eq!(got.global_fallback, w < 11);
    }
}

#[test]
fn ssim_hf_ignores_global_offsets() {
    let cfg = metric_filter(0.2).unwrap();
    let a = random_image(16, 16, 3, 4, 0.0, 0.8);
    let shifted = a.map(|v| v + 0.15);
    let same = ssim_hf(&a, &shifted, &cfg).unwrap().value;
    assert!((same - 1.0).abs() < 1e-6, "{same}");
    assert!(ssim(&a, &shifted).unwrap().value < 1.0);
    let b = random_image(16, 16, 3, 5, 0.0, 0.8);
    let base = ssim_hf(&a, &b, &cfg).unwrap().value;
    let moved = ssim_hf(&a.map(|v| v + 0.1), &b.map(|v| v + 0.1), &cfg)
        .unwrap()
        .value;
    assert!((base - moved).abs() < 1e-6);
    assert!((ssim_hf(&a, &a, &cfg).unwrap().value - 1.0).abs() < 1e-12);
}

#[test]
fn histogram_embedder_separates_disjoint_hues() {
    let red = Image::from_fn(12, 12, 3, |x, y, c| {
        if c == 0 {
            0.9 - 0.02 * ((x + y) % 3) as f32
        } else {
            0.1
        }
    });
    let blue = Image::from_fn(12, 12, 3, |x, y, c| {
        if c == 2 {
            0.9 - 0.02 * ((x * y) % 3) as f32
        } else {
            0.1
        }
    });
    let (s, _) = hifi_core::embed::embed_sim(&red, &blue, &HistogramEmbedder).unwrap();
    assert!(s < 0.3, "{s}");
}

struct Mean;
impl Embedder for Mean {
    fn name(&self) -> &str {
        "mean"
    }
    fn embed(&self, img: &Image) -> hifi_core::Result<Vec<f64>> {
        Ok(vec![
            img.data().iter().map(|&v| v as f64).sum::<f64>() + 1.0,
            1.0,
        ])
    }
}

#[test]
fn report_aggregates_and_protocol_consistency() {
    let cfg = metric_filter(0.1).unwrap();
    let preds: Vec<Image> = (0..4)
        .map(|k| random_image(32, 32, 3, 10 + k, 0.0, 1.0))
        .collect();
    let gts: Vec<Image> = (0..4)
        .map(|k| random_image(32, 32, 3, 20 + k, 0.0, 1.0))
        .collect();
    let masks: Vec<Mask> = (0..4)
        .map(|k| {
            Mask::from_bbox(
                32,
                32,
                BBox {
                    x0: k,
                    y0: 2,
                    x1: k + 14,
                    y1: 20,
                },
            )
            .unwrap()
        })
        .collect();
    let items: Vec<EvalItem> = (0..4)
        .map(|k| EvalItem {
            id: format!("s{k}"),
            pred: &preds[k],
            target: &gts[k],
            mask: &masks[k],
        })
        .collect();
    let report = evaluate(&items, &cfg, Some(&HistogramEmbedder)).unwrap();
    let mean = report.rows.iter().map(|r| r.ssim_hf).sum::<f64>() / 4.0;
    assert_eq!(report.ssim_hf, mean);
    for (k, row) in report.rows.iter().enumerate() {
        let (p, t) = (
            crop_to_mask(&preds[k], &masks[k]).unwrap(),
            crop_to_mask(&gts[k], &masks[k]).unwrap(),
        );
        assert_eq!(row.ssim, ssim(&p, &t).unwrap().value);
        assert_eq!(row.ssim_hf, ssim_hf(&p, &t, &cfg).unwrap().value);
        assert!((-1.0..=1.0).contains(&row.ssim) && (-1.0..=1.0).contains(&row.ssim_hf));
    }
    let swapped = evaluate(&items, &cfg, Some(&Mean)).unwrap();
    assert_ne!(swapped.embed_sim, report.embed_sim);
    let keys = |r: &hifi_core::evalkit::EvalReport| {
        serde_json::to_value(r)
            .unwrap()
            .as_object()
            .unwrap()
            .keys()
            .cloned()
            .collect::<Vec<_>>()
    };
    assert_eq!(keys(&report), keys(&swapped));
    assert!(evaluate(&[], &cfg, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn ssim_is_bounded(seed in 0u64..10_000, w in 3usize..20, h in 3usize..20) {
        let a = random_image(w, h, 1, seed, 0.0, 1.0);
        let b = random_image(w, h, 1, seed + 1, 0.0, 1.0);
        let s = ssim(&a, &b).unwrap().value;
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((ssim(&a, &a).unwrap().value - 1.0).abs() < 1e-9);
    }
}
