use hdrlift_core::hdr::ToneCurve;
use hdrlift_core::metrics::{psnr_mu, ssim_linear, PSNR_CAP_DB};
use hdrlift_core::HdrImage;
use proptest::prelude::*;

fn image(h: usize, w: usize, vals: &[f64]) -> HdrImage {
    HdrImage::new(h, w, vals.iter().take(h * w * 3).cloned().collect()).unwrap()
}

fn psnr_oracle(gt: &HdrImage, pred: &HdrImage, mu: f64) -> f64 {
    let s = gt.data().iter().cloned().fold(0.0, f64::max);
    let s = if s > 0.0 { s } else { 1.0 };
    let t = |x: f64| (1.0 + mu * (x / s).min(1.0)).ln() / (1.0 + mu).ln();
    let mut se = 0.0;
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let (a, b) = (gt.pixel(y, x), pred.pixel(y, x));
            for c in 0..3 {
                se += (t(a[c]) - t(b[c])).powi(2);
            }
        }
    }
    let mse = se / (gt.height() * gt.width() * 3) as f64;
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Direct 2-D windowed SSIM on luminance.
fn ssim_oracle(gt: &HdrImage, pred: &HdrImage) -> f64 {
    let (h, w) = (gt.height(), gt.width());
    let mut n = 11.min(h).min(w);
    if n % 2 == 0 {
        n -= 1;
    }
    let c = (n / 2) as f64;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / 4.5).exp()).collect();
    let gs: f64 = g.iter().sum();
    let lum = |img: &HdrImage, y: usize, x: usize| {
        let p = img.pixel(y, x);
        0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2]
    };
    let range = gt.data().iter().cloned().fold(0.0, f64::max);
    let range = if range > 0.0 { range } else { 1.0 };
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - n {
        for x0 in 0..=w - n {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let k = g[i] * g[j] / (gs * gs);
                    let (a, b) = (lum(gt, y0 + i, x0 + j), lum(pred, y0 + i, x0 + j));
                    ma += k * a;
                    mb += k * b;
                    aa += k * a * a;
                    bb += k * b * b;
                    ab += k * a * b;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    (total / count as f64).clamp(-1.0, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psnr_matches_oracle(
        h in 1usize..9,
        w in 1usize..9,
        a in proptest::collection::vec(0.0f64..50.0, 192),
        b in proptest::collection::vec(0.0f64..80.0, 192),
        mu in 1.0f64..1e4,
    ) {
        let (gt, pred) = (image(h, w, &a), image(h, w, &b));
        let curve = ToneCurve::mu_law(mu).unwrap();
        let got = psnr_mu(&gt, &pred, &curve).unwrap();
        prop_assert!((got - psnr_oracle(&gt, &pred, mu)).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_oracle(
        h in 3usize..16,
        w in 3usize..16,
        a in proptest::collection::vec(0.0f64..20.0, 768),
        b in proptest::collection::vec(0.0f64..20.0, 768),
    ) {
        let (gt, pred) = (image(h, w, &a), image(h, w, &b));
        let got = ssim_linear(&gt, &pred).unwrap();
        prop_assert!((got - ssim_oracle(&gt, &pred)).abs() < 1e-9);
    }
}

#[test]
fn psnr_is_not_symmetric() {
    // the ground truth sets the normalisation, so swapping the inputs changes the score
    let gt = HdrImage::new(1, 2, vec![1.0, 1.0, 1.0, 4.0, 4.0, 4.0]).unwrap();
    let pred = HdrImage::new(1, 2, vec![2.0, 2.0, 2.0, 8.0, 8.0, 8.0]).unwrap();
    let c = ToneCurve::default();
    let (ab, ba) = (psnr_mu(&gt, &pred, &c).unwrap(), psnr_mu(&pred, &gt, &c).unwrap());
    assert!((ab - ba).abs() > 0.1, "{ab} vs {ba}");
    assert!((ab - psnr_oracle(&gt, &pred, c.mu)).abs() < 1e-9);
    assert!((ba - psnr_oracle(&pred, &gt, c.mu)).abs() < 1e-9);
}
