//! Regenerates the bundled overlay mask assets in `assets/masks/`.
//!
//! Each mask is a 64x64 RGBA PNG whose alpha channel is the per-pixel
//! blend weight; `--constraint overlay:<mask>` resamples it to the
//! working image size at load time.
//!
//! Run from the workspace root: `cargo run -p deeprobe-core --example make_masks`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: u32 = 64;

fn save(name: &str, pixel: impl Fn(f64, f64) -> [f64; 4]) {
    let img = image::RgbaImage::from_fn(N, N, |x, y| {
        let u = x as f64 / (N - 1) as f64;
        let v = y as f64 / (N - 1) as f64;
        let p = pixel(u, v);
        image::Rgba(p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    let path = format!("assets/masks/{name}.png");
    img.save(&path).expect("mask saves");
    println!("wrote {path}");
}

fn main() {
    std::fs::create_dir_all("assets/masks").expect("assets dir");

    // Sun glare: warm radial bloom anchored near the top-left corner.
    save("glare", |u, v| {
        let r = ((u - 0.25).powi(2) + (v - 0.2).powi(2)).sqrt();
        let alpha = (1.0 - r * 1.8).max(0.0).powf(1.5);
        [1.0, 0.96, 0.78, alpha]
    });

    // Rain: diagonal streaks of varying phase and strength.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let streaks: Vec<(f64, f64, f64)> = (0..26)
        .map(|_| {
            (
                rng.gen_range(-0.4..1.4),  // intercept
                rng.gen_range(0.010..0.022), // half width
                rng.gen_range(0.35..0.9),  // strength
            )
        })
        .collect();
    save("rain", move |u, v| {
        let mut alpha: f64 = 0.0;
        for &(b, w, s) in &streaks {
            // Streak along u = b + 0.35 v.
            let d = (u - b - 0.35 * v).abs();
            if d < w {
                alpha = alpha.max(s * (1.0 - d / w));
            }
        }
        [0.67, 0.75, 0.83, alpha]
    });

    // Water drops on the windshield: scattered soft discs.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let drops: Vec<(f64, f64, f64)> = (0..18)
        .map(|_| {
            (
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.03..0.09),
            )
        })
        .collect();
    save("drops", move |u, v| {
        let mut alpha: f64 = 0.0;
        for &(cx, cy, rad) in &drops {
            let r = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
            if r < rad {
                alpha = alpha.max(0.85 * (1.0 - (r / rad).powi(2)));
            }
        }
        [0.78, 0.86, 0.94, alpha]
    });

    // Fog: smooth low-frequency field, denser toward the horizon line.
    save("fog", |u, v| {
        let field = 0.5
            + 0.22 * (u * 5.1 + 1.3).sin() * (v * 3.7 + 0.4).cos()
            + 0.14 * (u * 11.0).sin() * (v * 9.3 + 2.0).sin();
        let horizon = 1.0 - (v - 0.45).abs() * 1.2;
        let alpha = (0.35 * field + 0.3 * horizon.max(0.0)).clamp(0.0, 0.8);
        [0.86, 0.87, 0.89, alpha]
    });
}
